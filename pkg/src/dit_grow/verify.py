"""Property checks shared by ``grow verify`` and the acceptance tests."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .diffusion import (DropoutPolicy, GuidanceScales, NoiseDraw, cfg_single, combine_guidance,
                        guidance_passes, make_schedule, sample_condition_mask, training_loss)
from .expansion import ExpansionError, ExpansionSpec, expand_model, plan_expansion, random_probe, verify_identity
from .model import DiT, ModelConfig, init_model
from .rng import Rng
from .text import inject_llm_branch

IDENTITY_SPECS = ("insert:k=1", "insert:k=1/2", "insert:k=2", "prefix:P=2", "suffix:P=2")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name}: {status}" + (f" {self.detail}" if self.detail else "")


def _fmt(x: float) -> str:
    return "0" if x == 0.0 else f"{x:.3g}"


def check_expansion_identity(model: DiT, spec_text: str, n_probes: int = 8, seed: int = 0) -> CheckResult:
    name = f"identity[{spec_text}]"
    try:
        plan = plan_expansion(len(model.blocks), ExpansionSpec.parse(spec_text), model.config.llm_branch)
    except ExpansionError as e:
        return CheckResult(name, True, f"skipped ({e})")
    diff = verify_identity(model, expand_model(model, plan), n_probes, Rng(seed, stream=99))
    return CheckResult(name, diff == 0.0, f"max_abs_diff={_fmt(diff)}")


def check_injection_identity(model: DiT, n_probes: int = 8, seed: int = 0) -> CheckResult:
    if model.config.llm_branch:
        return CheckResult("injection", True, "skipped (llm branch already present)")
    injected = inject_llm_branch(model)
    diff = verify_identity(model, injected, n_probes, Rng(seed, stream=98))
    ok = diff == 0.0
    if model.config.llm_width == model.config.t5_width:
        ok = ok and all(
            np.array_equal(b.cross_llm.k.weight.data, b.cross_t5.k.weight.data)
            and np.array_equal(b.cross_llm.v.weight.data, b.cross_t5.v.weight.data)
            for b in injected.blocks)
    return CheckResult("injection", ok, f"max_abs_diff={_fmt(diff)}")


def check_cfg_algebra(model: DiT, seed: int = 0) -> CheckResult:
    rng = Rng(seed, stream=97)
    z, t, cond = random_probe(model.config, rng, batch=2)
    eu, et, ef = guidance_passes(model, z, t, cond)
    telescoped = np.array_equal(combine_guidance(eu, et, ef, GuidanceScales(1.0, 1.0)), ef)
    single = np.array_equal(combine_guidance(eu, et, ef, GuidanceScales(4.5, 0.0)), cfg_single(eu, et, 4.5))
    uncond = np.array_equal(combine_guidance(eu, et, ef, GuidanceScales(0.0, 0.0)), eu)
    defaults = np.all(np.isfinite(combine_guidance(eu, et, ef, GuidanceScales(7.0, 12.5))))
    ok = telescoped and single and uncond and defaults
    return CheckResult("cfg_algebra", bool(ok),
                       f"telescope={telescoped} single={single} uncond={uncond} defaults_finite={defaults}")


def check_dropout_stats(n: int = 100_000, seed: int = 0) -> CheckResult:
    policy = DropoutPolicy()
    use_t5, use_llm = sample_condition_mask(Rng(seed, stream=96), policy, n)
    drop_all = float(np.mean(~use_t5))
    drop_llm = float(np.mean(use_t5 & ~use_llm))
    ok = True
    for rate, p in ((drop_llm, policy.p_drop_llm), (drop_all, policy.p_drop_all)):
        ok &= abs(rate - p) <= 3 * math.sqrt(p * (1 - p) / n)
    return CheckResult("dropout_stats", ok, f"drop_llm={drop_llm:.5f} drop_all={drop_all:.5f}")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    mask = np.abs(analytic) > floor
    if not mask.any():
        return 0.0
    a, n = analytic[mask], numeric[mask]
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), np.abs(n))))


GRAD_CHECK_CONFIG = ModelConfig(channels=2, frames=2, height=2, width=2, hidden=8, heads=2, blocks=2,
                                ffn_mult=2, t5_width=8, llm_width=6, llm_branch=False)


def gradient_check_model(seed: int = 0) -> tuple[DiT, Callable[[], T.Tensor]]:
    """A 2-block, llm-enabled toy model in 64-bit with every parameter generic.

    Returns the model and a closure computing a fixed-draw training loss.
    """
    with T.verify_mode():
        model = inject_llm_branch(init_model(GRAD_CHECK_CONFIG, seed))
        rng = Rng(seed, stream=95)
        for _, p in model.named_parameters():
            p.data = rng.normal(p.shape, 0.3).astype(np.float64)
        cfg = model.config
        z0, _, cond = random_probe(cfg, rng, batch=2, t5_len=3, llm_len=4)
        # sample 0 sees both conditions, sample 1 gets both null embeddings
        draw = NoiseDraw(np.array([10, 700]), rng.normal((2, *cfg.latent_shape)),
                         np.array([True, False]), np.array([True, False]))
        schedule = make_schedule()

    def loss():
        return training_loss(model, z0.astype(np.float64), cond, schedule, draw=draw)

    return model, loss


def gradient_errors(h: float = 1e-4, max_per_param: int | None = None, seed: int = 0) -> dict[str, float]:
    """Worst relative error per parameter between backward and central differences."""
    model, loss_fn = gradient_check_model(seed)
    errors = {}
    pick = Rng(seed, stream=94)
    with T.verify_mode():
        model.zero_grad()
        loss_fn().backward()
        for name, p in model.named_parameters():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = np.sort(pick.integers(0, flat.size, max_per_param))
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * h)
            errors[name] = relative_error(analytic.reshape(-1)[idx], numeric)
    return errors


def check_gradients(max_per_param: int | None = 4, tol: float = 1e-4) -> CheckResult:
    errors = gradient_errors(max_per_param=max_per_param)
    worst_name = max(errors, key=errors.get)
    return CheckResult("gradients", errors[worst_name] < tol,
                       f"params={len(errors)} worst={errors[worst_name]:.2e} ({worst_name})")


def run_all(model: DiT | None = None, seed: int = 0) -> list[CheckResult]:
    model = model or init_model(ModelConfig(blocks=4), seed)
    results = [check_expansion_identity(model, s, seed=seed) for s in IDENTITY_SPECS]
    results.append(check_injection_identity(model, seed=seed))
    target = model if model.config.llm_branch else inject_llm_branch(model)
    results.append(check_cfg_algebra(target, seed))
    results.append(check_dropout_stats(seed=seed))
    results.append(check_gradients())
    return results
