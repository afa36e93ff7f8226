"""Prompt handling and condition production.

Real T5 / LLM encoders are replaced by frozen hash-embedding stubs: each
whitespace token is hashed into a vocabulary and looked up in a fixed
Gaussian table. Anything implementing ``encode(text) -> (emb, mask)`` can be
swapped in for a stub.
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np

from .model import MOD_SLOTS, ConditionBatch, DiT
from .nn import Attention, ConditionEmbedder
from .rng import Rng
from .tensor import Parameter, Tensor

DEFAULT_SEPARATOR = ". "
DEFAULT_PREFIX = "[INST] Describe and generate: "
DEFAULT_SUFFIX = " [/INST]"


@dataclass(frozen=True)
class TemplateSpec:
    prefix: str = DEFAULT_PREFIX
    suffix: str = DEFAULT_SUFFIX

    def __post_init__(self):
        if self.prefix is None or self.suffix is None:
            raise ValueError("template prefix/suffix may be empty but not None")


def merge_prompts_sl(p: str, p_l: str, separator: str = DEFAULT_SEPARATOR) -> str:
    """Short prompt first, detailed prompt appended after ``separator``."""
    if not p:
        raise ValueError("short prompt required")
    if not p_l:
        return p
    return p + separator + p_l


def apply_llm_template(p_sl: str, template: TemplateSpec = TemplateSpec()) -> str:
    return template.prefix + p_sl + template.suffix


def strip_llm_template(p_star: str, template: TemplateSpec = TemplateSpec()) -> str:
    if not (p_star.startswith(template.prefix) and p_star.endswith(template.suffix)):
        raise ValueError("text does not carry the given template")
    return p_star[len(template.prefix):len(p_star) - len(template.suffix)]


def split_sl_prompt(p_sl: str, p: str, separator: str = DEFAULT_SEPARATOR) -> str:
    """Recover the long prompt from a merged prompt given the short one."""
    if p_sl == p:
        return ""
    head = p + separator
    if not p_sl.startswith(head):
        raise ValueError("merged prompt does not start with the short prompt")
    return p_sl[len(head):]


@dataclass(frozen=True)
class PromptSet:
    p: str
    p_l: str
    p_sl: str
    p_star: str

    @classmethod
    def build(cls, p: str, p_l: str = "", separator: str = DEFAULT_SEPARATOR,
              template: TemplateSpec = TemplateSpec()) -> "PromptSet":
        p_sl = merge_prompts_sl(p, p_l, separator)
        return cls(p, p_l, p_sl, apply_llm_template(p_sl, template))


def read_prompt_file(path) -> list[tuple[str, str]]:
    """UTF-8 lines of ``short<TAB>long``; the long column may be missing."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            p, _, p_l = line.partition("\t")
            records.append((p, p_l))
    return records


# -- encoders -------------------------------------------------------------

class TextEncoder(Protocol):
    length: int
    width: int

    def encode(self, text: str) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class EncoderConfig:
    length: int
    width: int
    vocab_size: int = 4096
    seed: int = 0


ENCODER_STREAMS = {"t5": 11, "llm": 13}


def stable_token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


class StubEncoder:
    """Frozen deterministic stand-in for a text encoder."""

    def __init__(self, encoder_id: str, config: EncoderConfig):
        if encoder_id not in ENCODER_STREAMS:
            raise ValueError(f"unknown encoder {encoder_id!r}")
        self.encoder_id = encoder_id
        self.config = config
        self.length = config.length
        self.width = config.width
        rng = Rng(config.seed, stream=ENCODER_STREAMS[encoder_id])
        self.table = rng.normal((config.vocab_size, config.width)).astype(np.float32)
        self.table.flags.writeable = False

    def token_ids(self, text: str) -> list[int]:
        return [stable_token_hash(tok) % self.config.vocab_size for tok in text.split()]

    def encode(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        ids = self.token_ids(text)[: self.length]
        emb = np.zeros((self.length, self.width), dtype=np.float32)
        mask = np.zeros(self.length, dtype=bool)
        if ids:
            emb[: len(ids)] = self.table[ids]
            mask[: len(ids)] = True
        return emb, mask


def encode_stub(text: str, encoder_id: str, config: EncoderConfig):
    return StubEncoder(encoder_id, config).encode(text)


def condition_embedder_forward(c_raw, embedder: ConditionEmbedder, mask=None):
    """Apply the trainable embedder positionwise; the mask passes through."""
    return embedder(c_raw if isinstance(c_raw, Tensor) else Tensor(c_raw)), mask


# -- model surgery --------------------------------------------------------

def inject_llm_branch(model: DiT, rng: Rng | None = None) -> DiT:
    """Return a copy of ``model`` with a gated llm cross-attention in every block.

    The new sub-layer copies the T5 cross-attention (K/V too when the encoder
    widths agree) and starts with gate 0, so outputs are unchanged.
    """
    cfg = model.config
    if cfg.llm_branch:
        raise ValueError("model already has an llm branch")
    rng = rng or Rng(0, stream=31)
    out = model.clone()
    out.config.llm_branch = True
    d = cfg.hidden
    same_width = cfg.llm_width == cfg.t5_width
    for block in out.blocks:
        src = block.cross_t5
        llm = Attention(d, cfg.llm_width, cfg.heads)
        llm.q.weight.data = src.q.weight.data.copy()
        llm.q.bias.data = src.q.bias.data.copy()
        llm.out.weight.data = src.out.weight.data.copy()
        llm.out.bias.data = src.out.bias.data.copy()
        for name in ("k", "v"):
            dst, s = getattr(llm, name), getattr(src, name)
            if same_width:
                dst.weight.data = s.weight.data.copy()
            else:
                dst.weight.data = rng.normal(dst.weight.shape, 1.0 / math.sqrt(cfg.llm_width)).astype(s.weight.dtype)
            dst.bias.data = s.bias.data.copy()
        block.cross_llm = llm
        block.gate = Parameter(np.zeros(1), dtype=src.q.weight.dtype)
        # llm slot modulation (gamma, beta) starts as a copy of the t5 slot's
        mod = block.modulation
        t5 = MOD_SLOTS["cross_t5"]
        w_extra = mod.weight.data[:, t5 * d:(t5 + 2) * d]
        b_extra = mod.bias.data[t5 * d:(t5 + 2) * d]
        mod.weight = Parameter(np.concatenate([mod.weight.data, w_extra], axis=1), dtype=w_extra.dtype)
        mod.bias = Parameter(np.concatenate([mod.bias.data, b_extra]), dtype=b_extra.dtype)
    dt = out.t5_null.dtype
    if same_width:
        out.llm_embedder = copy.deepcopy(out.t5_embedder)
        out.llm_null = Parameter(out.t5_null.data.copy(), dtype=dt)
    else:
        out.llm_embedder = ConditionEmbedder(cfg.llm_width, cfg.llm_width, rng)
        out.llm_embedder.astype(dt)
        out.llm_null = Parameter(rng.normal(cfg.llm_width, 1.0 / math.sqrt(cfg.llm_width)), dtype=dt)
    out.zero_grad()
    return out


# -- batching -------------------------------------------------------------

@dataclass
class Encoders:
    t5: TextEncoder
    llm: TextEncoder


def encode_prompts(prompts: Iterable[PromptSet], encoders: Encoders) -> ConditionBatch:
    """Raw frozen-encoder conditions: T5 reads p_sl, the LLM reads p_star."""
    t5, t5_mask, llm, llm_mask = [], [], [], []
    for ps in prompts:
        e, m = encoders.t5.encode(ps.p_sl)
        t5.append(e)
        t5_mask.append(m)
        e, m = encoders.llm.encode(ps.p_star)
        llm.append(e)
        llm_mask.append(m)
    return ConditionBatch(np.stack(t5), np.stack(t5_mask), np.stack(llm), np.stack(llm_mask))


def build_condition_batch(prompts: Iterable[PromptSet], encoders: Encoders, model: DiT | None = None):
    """Encode prompts; with ``model`` also run its trainable condition embedders.

    Returns the raw ``ConditionBatch`` alone, or ``(batch, (c_t5, m_t5, c_llm, m_llm))``.
    """
    batch = encode_prompts(list(prompts), encoders)
    if model is None:
        return batch
    return batch, model.embed_conditions(batch)
