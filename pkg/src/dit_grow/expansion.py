"""Depth growth by duplicating transformer blocks.

New blocks are copies of an existing block whose residual last-linears are
zeroed, so each new block is an exact identity map when it is inserted.
"""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .model import BASE_LAST_LINEARS, LLM_LAST_LINEAR, Block, ConditionBatch, DiT
from .optim import AdamState
from .rng import Rng

VARIANTS = ("insert", "prefix", "suffix")


class ExpansionError(ValueError):
    pass


@dataclass(frozen=True)
class ExpansionSpec:
    """``insert`` uses the ratio ``k``; ``prefix``/``suffix`` use the count ``P``."""

    variant: str
    k: Fraction | None = None
    count: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ExpansionError(f"unknown expansion variant {self.variant!r}")
        if self.variant == "insert":
            if self.k is None or self.k <= 0:
                raise ExpansionError("insert stacking needs a positive ratio k")
            object.__setattr__(self, "k", Fraction(self.k))
        elif self.count is None or self.count < 1:
            raise ExpansionError(f"{self.variant} stacking needs a positive block count P")

    @classmethod
    def parse(cls, text: str) -> "ExpansionSpec":
        """Parse ``insert:k=1/2``, ``prefix:P=2`` or ``suffix:P=2``."""
        m = re.fullmatch(r"\s*(insert|prefix|suffix)\s*:\s*(k|P)\s*=\s*([0-9./]+)\s*", text)
        if not m:
            raise ExpansionError(f"cannot parse expansion spec {text!r}")
        variant, key, value = m.groups()
        if variant == "insert":
            if key != "k":
                raise ExpansionError("insert stacking is parameterized by k")
            try:
                return cls("insert", k=Fraction(value))
            except (ValueError, ZeroDivisionError):
                raise ExpansionError(f"bad ratio {value!r}") from None
        if key != "P" or not value.isdigit():
            raise ExpansionError(f"{variant} stacking is parameterized by an integer P")
        return cls(variant, count=int(value))

    def __str__(self):
        if self.variant == "insert":
            return f"insert:k={self.k}"
        return f"{self.variant}:P={self.count}"


@dataclass(frozen=True)
class Slot:
    position: int
    source: int
    is_new: bool


@dataclass
class ExpansionPlan:
    spec: ExpansionSpec
    original_blocks: int
    slots: list[Slot]
    zero_init_targets: dict[int, list[str]] = field(default_factory=dict)

    @property
    def total_blocks(self) -> int:
        return len(self.slots)

    @property
    def new_blocks(self) -> int:
        return sum(s.is_new for s in self.slots)

    def report(self) -> str:
        """One line per stack slot: index, origin, source, zeroed layers."""
        lines = [f"# plan {self.spec} N={self.original_blocks} P={self.new_blocks} "
                 f"total={self.total_blocks}"]
        for s in self.slots:
            zeroed = ",".join(self.zero_init_targets.get(s.position, [])) or "-"
            origin = "new" if s.is_new else "orig"
            lines.append(f"{s.position} {origin} src={s.source} zero={zeroed}")
        return "\n".join(lines) + "\n"


def plan_expansion(n_blocks: int, spec: ExpansionSpec, llm_branch: bool = False) -> ExpansionPlan:
    if n_blocks < 1:
        raise ExpansionError("cannot expand an empty block stack")
    targets = list(BASE_LAST_LINEARS) + ([LLM_LAST_LINEAR, "gate"] if llm_branch else [])
    order: list[tuple[int, bool]] = []
    if spec.variant == "insert":
        x, y = spec.k.numerator, spec.k.denominator
        if n_blocks % y:
            raise ExpansionError(f"N must be divisible by M = {y} (got N = {n_blocks}, k = {x}/{y})")
        for i in range(n_blocks):
            order.append((i, False))
            if (i + 1) % y == 0:
                order.extend((i, True) for _ in range(x))
    elif spec.variant == "prefix":
        order = [(0, True)] * spec.count + [(i, False) for i in range(n_blocks)]
    else:
        order = [(i, False) for i in range(n_blocks)] + [(n_blocks - 1, True)] * spec.count
    slots = [Slot(pos, src, new) for pos, (src, new) in enumerate(order)]
    zero = {s.position: list(targets) for s in slots if s.is_new}
    return ExpansionPlan(spec, n_blocks, slots, zero)


def zero_init_block(block: Block) -> Block:
    """Zero every residual last-linear (weights and bias) and the llm gate."""
    for name in block.last_linears():
        block.sublayer(name).zero_()
    if block.gate is not None:
        block.gate.data[...] = 0
    return block


def expand_model(model: DiT, plan: ExpansionPlan, freeze_original: bool = False) -> DiT:
    """Return a new model grown per ``plan``; ``model`` is left untouched."""
    if plan.original_blocks != len(model.blocks):
        raise ExpansionError(f"plan built for N={plan.original_blocks}, model has {len(model.blocks)} blocks")
    out = model.clone()
    originals = out.blocks
    grown: list[Block] = []
    for slot in plan.slots:
        if slot.is_new:
            block = zero_init_block(copy.deepcopy(originals[slot.source]))
            block.zero_grad()
        else:
            block = originals[slot.source]
        grown.append(block)
    if freeze_original:
        for block in originals:
            for p in block.parameters():
                p.requires_grad = False
    out.blocks = grown
    out.config.blocks = len(grown)
    return out


def remap_optimizer_state(state: AdamState, plan: ExpansionPlan) -> AdamState:
    """Carry moments of original blocks to their new indices; new blocks start fresh."""
    moved = {}
    for slot in plan.slots:
        if not slot.is_new:
            moved[f"blocks.{slot.source}."] = f"blocks.{slot.position}."
    out = AdamState()
    for name in state.m:
        target = name
        if name.startswith("blocks."):
            prefix = ".".join(name.split(".")[:2]) + "."
            target = moved[prefix] + name[len(prefix):]
        out.m[target] = state.m[name].copy()
        out.v[target] = state.v[name].copy()
        out.step[target] = state.step[name]
    return out


def random_probe(config, rng: Rng, batch: int = 1, t5_len: int = 8, llm_len: int = 8, max_t: int = 1000):
    """Random (z_t, t, conditions) triple for output-equivalence checks."""
    z = rng.normal((batch, *config.latent_shape)).astype(np.float32)
    t = rng.integers(0, max_t, batch)
    t5_mask = np.ones((batch, t5_len), dtype=bool)
    llm_mask = np.ones((batch, llm_len), dtype=bool)
    t5_mask[:, t5_len // 2:] = rng.uniform((batch, t5_len - t5_len // 2)) < 0.5
    llm_mask[:, llm_len // 2:] = rng.uniform((batch, llm_len - llm_len // 2)) < 0.5
    cond = ConditionBatch(
        rng.normal((batch, t5_len, config.t5_width)).astype(np.float32) * t5_mask[..., None],
        t5_mask,
        rng.normal((batch, llm_len, config.llm_width)).astype(np.float32) * llm_mask[..., None],
        llm_mask,
    )
    return z, t, cond


def verify_identity(base: DiT, expanded: DiT, n_probes: int = 8, rng: Rng | None = None) -> float:
    """Max absolute output difference between two models over random probes."""
    rng = rng or Rng(0, stream=99)
    worst = 0.0
    with T.no_grad():
        for _ in range(n_probes):
            z, t, cond = random_probe(base.config, rng, batch=2)
            a = base(z, t, cond).data
            b = expanded(z, t, cond).data
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                return float("inf")
            worst = max(worst, float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))))
    return worst
