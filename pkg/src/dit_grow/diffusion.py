"""Noise schedule, two-condition training objective, guidance and sampling."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .model import ConditionBatch, DiT
from .optim import AdamState, adam_step
from .rng import Rng
from .tensor import Tensor


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas_cumprod: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)


def make_schedule(steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule; float64 throughout."""
    if steps < 2:
        raise ValueError("schedule needs at least 2 steps")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def _check_t(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t))
    if np.any(t < 0) or np.any(t >= schedule.steps):
        raise ValueError(f"timestep out of range [0, {schedule.steps})")
    return t


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with one t per sample."""
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {z0.shape} and noise {eps.shape} differ in shape")
    t = _check_t(t, schedule)
    abar = schedule.alphas_cumprod[t].reshape(-1, *([1] * (z0.ndim - 1)))
    dtype = np.result_type(z0.dtype, np.float32)
    return (np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps).astype(dtype)


# -- condition dropout ------------------------------------------------------

@dataclass(frozen=True)
class DropoutPolicy:
    p_drop_llm: float = 0.01
    p_drop_all: float = 0.001

    def __post_init__(self):
        for v in (self.p_drop_llm, self.p_drop_all):
            if not 0.0 <= v <= 1.0:
                raise ValueError("dropout probabilities must lie in [0, 1]")
        if self.p_drop_llm + self.p_drop_all > 1.0:
            raise ValueError("p_drop_llm + p_drop_all must not exceed 1")


def sample_condition_mask(rng: Rng, policy: DropoutPolicy, batch: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (use_t5, use_llm) flags.

    One uniform per sample: below p_drop_all drops both conditions, the next
    p_drop_llm of mass drops only the llm condition.
    """
    u = rng.uniform(batch)
    drop_all = u < policy.p_drop_all
    drop_llm = ~drop_all & (u < policy.p_drop_all + policy.p_drop_llm)
    return ~drop_all, ~(drop_all | drop_llm)


# -- objective --------------------------------------------------------------

@dataclass
class NoiseDraw:
    """Everything random in one loss evaluation, so it can be replayed."""

    t: np.ndarray
    eps: np.ndarray
    use_t5: np.ndarray
    use_llm: np.ndarray


def draw_noise(rng: Rng, batch: int, latent_shape, schedule: NoiseSchedule, policy: DropoutPolicy) -> NoiseDraw:
    t = rng.integers(0, schedule.steps, batch)
    eps = rng.normal((batch, *latent_shape)).astype(np.float32)
    use_t5, use_llm = sample_condition_mask(rng, policy, batch)
    return NoiseDraw(t, eps, use_t5, use_llm)


def training_loss(model: DiT, z0: np.ndarray, cond: ConditionBatch, schedule: NoiseSchedule,
                  rng: Rng | None = None, policy: DropoutPolicy = DropoutPolicy(),
                  draw: NoiseDraw | None = None) -> Tensor:
    """Mean squared error between the drawn noise and the model's prediction."""
    if draw is None:
        draw = draw_noise(rng, z0.shape[0], z0.shape[1:], schedule, policy)
    z_t = q_sample(z0, draw.t, draw.eps, schedule)
    cond = cond.with_flags(draw.use_t5, draw.use_llm)
    diff = model(z_t, draw.t, cond) - Tensor(draw.eps)
    return (diff * diff).mean()


# -- guidance ---------------------------------------------------------------

@dataclass(frozen=True)
class GuidanceScales:
    s_t5: float = 7.0
    s_llm: float = 12.5

    def __post_init__(self):
        if not (np.isfinite(self.s_t5) and np.isfinite(self.s_llm)):
            raise ValueError("guidance scales must be finite")


def cfg_single(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """Single-condition guidance written as a weighted sum of the two passes."""
    dt = eps_cond.dtype
    return dt.type(1.0 - scale) * eps_uncond + dt.type(scale) * eps_cond


def combine_guidance(eps_u: np.ndarray, eps_t5: np.ndarray, eps_full: np.ndarray, scales: GuidanceScales) -> np.ndarray:
    """eps_u + s_t5 (eps_t5 - eps_u) + s_llm (eps_full - eps_t5), regrouped.

    The weights (1 - s_t5, s_t5 - s_llm, s_llm) multiply each pass and the
    products are summed in a fixed order, so (1, 1) returns ``eps_full``
    exactly, (0, 0) returns ``eps_u`` and s_llm = 0 matches ``cfg_single``.
    """
    dt = eps_full.dtype
    w_u = dt.type(1.0 - scales.s_t5)
    w_t = dt.type(scales.s_t5 - scales.s_llm)
    w_f = dt.type(scales.s_llm)
    return (w_u * eps_u + w_t * eps_t5) + w_f * eps_full


def guidance_passes(model: DiT, z_t, t, cond: ConditionBatch):
    """The three forward passes: unconditional, t5 only, both conditions."""
    b = cond.batch_size
    no, yes = np.zeros(b, dtype=bool), np.ones(b, dtype=bool)
    with T.no_grad():
        eps_u = model(z_t, t, cond.with_flags(no, no)).data
        eps_t5 = model(z_t, t, cond.with_flags(yes, no)).data
        eps_full = model(z_t, t, cond.with_flags(yes, yes)).data
    return eps_u, eps_t5, eps_full


def cfg_epsilon(model: DiT, z_t, t, cond: ConditionBatch, scales: GuidanceScales) -> np.ndarray:
    return combine_guidance(*guidance_passes(model, z_t, t, cond), scales)


# -- sampling ---------------------------------------------------------------

def ddim_timesteps(n_steps: int, schedule: NoiseSchedule) -> np.ndarray:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_steps > schedule.steps:
        raise ValueError(f"n_steps {n_steps} exceeds schedule length {schedule.steps}")
    return np.round(np.linspace(schedule.steps - 1, 0, n_steps)).astype(np.int64)


def ddim_sample(model: DiT, shape, cond: ConditionBatch, scales: GuidanceScales, n_steps: int,
                rng: Rng, schedule: NoiseSchedule, clip_denoised: float | None = None) -> np.ndarray:
    """Deterministic DDIM (eta = 0) from seeded Gaussian noise with guided noise estimates."""
    steps = ddim_timesteps(n_steps, schedule)
    x = rng.normal(shape).astype(np.float32)
    b = shape[0]
    abar = schedule.alphas_cumprod
    for i, t in enumerate(steps):
        eps = cfg_epsilon(model, x, np.full(b, t), cond, scales).astype(np.float64)
        a_t = abar[t]
        a_prev = abar[steps[i + 1]] if i + 1 < len(steps) else 1.0
        x0 = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        if clip_denoised is not None:
            x0 = np.clip(x0, -clip_denoised, clip_denoised)
        x = (np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps).astype(np.float32)
    return x


# -- training ---------------------------------------------------------------

@dataclass
class StepMetric:
    step: int
    loss: float
    wall_ms: float


@dataclass
class TrainResult:
    model: DiT
    metrics: list[StepMetric]
    optimizer: AdamState


@dataclass
class Dataset:
    """Latents with raw conditions attached, indexable by sample."""

    z0: np.ndarray
    cond: ConditionBatch
    prompts: list = field(default_factory=list)

    def __len__(self):
        return self.z0.shape[0]

    def batch(self, idx) -> tuple[np.ndarray, ConditionBatch]:
        return self.z0[idx], self.cond.take(idx)


def train_loop(model: DiT, dataset: Dataset, steps: int, lr: float, policy: DropoutPolicy, rng: Rng,
               callbacks: Iterable[Callable[[StepMetric, DiT], None]] = (), batch_size: int = 8,
               schedule: NoiseSchedule | None = None, optimizer: AdamState | None = None,
               start_step: int = 0) -> TrainResult:
    """Adam on every trainable parameter; one callback call per step."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    schedule = schedule or make_schedule()
    optimizer = optimizer if optimizer is not None else AdamState()
    params = dict(model.named_parameters())
    _drop_stale_moments(optimizer, params)
    metrics = []
    for i in range(start_step, start_step + steps):
        t0 = time.perf_counter()
        idx = rng.integers(0, len(dataset), batch_size)
        z0, cond = dataset.batch(idx)
        model.zero_grad()
        loss = training_loss(model, z0, cond, schedule, rng, policy)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {i}")
        loss.backward()
        trainable = {n: p for n, p in params.items() if p.requires_grad and p.grad is not None}
        adam_step({n: p.data for n, p in trainable.items()}, {n: p.grad for n, p in trainable.items()},
                  optimizer, lr)
        m = StepMetric(i, value, (time.perf_counter() - t0) * 1000.0)
        metrics.append(m)
        for cb in callbacks:
            cb(m, model)
    model.zero_grad()
    return TrainResult(model, metrics, optimizer)


def _drop_stale_moments(state: AdamState, params) -> None:
    for name in list(state.m):
        if name not in params or state.m[name].shape != params[name].shape:
            del state.m[name], state.v[name], state.step[name]


class CsvMetrics:
    """Writes ``step,loss,wall_ms`` rows, flushing after every step."""

    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8", newline="")
        self.fh.write("step,loss,wall_ms\n")
        self.fh.flush()

    def __call__(self, m: StepMetric, model=None) -> None:
        self.fh.write(f"{m.step},{m.loss:.9g},{m.wall_ms:.3f}\n")
        self.fh.flush()

    def close(self):
        self.fh.close()
