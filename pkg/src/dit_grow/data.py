"""Procedural "moving blob" latent videos with short and long captions.

Channel layout: 0 intensity, 1 x-velocity * intensity, 2 y-velocity *
intensity, 3 a constant per-class code. Extra channels (C > 4) stay zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import Dataset
from .model import ModelConfig
from .rng import Rng
from .text import DEFAULT_SEPARATOR, Encoders, PromptSet, TemplateSpec, encode_prompts

# (name, description, bump width in pixels, class code)
CLASSES = (
    ("tiny dot", "a tiny bright dot of light", 0.7, 0.5),
    ("small blob", "a small soft round blob", 1.1, 1.0),
    ("round cloud", "a medium round glowing cloud", 1.6, 1.5),
    ("wide haze", "a wide faint patch of haze", 2.3, 2.0),
)

# (name, (dx, dy) in pixels per frame)
MOTIONS = (
    ("right", (1, 0)),
    ("left", (-1, 0)),
    ("down", (0, 1)),
    ("up", (0, -1)),
    ("down-right", (1, 1)),
    ("up-left", (-1, -1)),
    ("down-left", (-1, 1)),
    ("up-right", (1, -1)),
    ("still", (0, 0)),
)

STILL = len(MOTIONS) - 1


@dataclass(frozen=True)
class SyntheticSample:
    z0: np.ndarray
    p: str
    p_l: str
    class_id: int
    motion_id: int


def short_prompt(class_id: int, motion_id: int) -> str:
    name = CLASSES[class_id][0]
    motion = MOTIONS[motion_id][0]
    return f"{name} staying still" if motion_id == STILL else f"{name} moving {motion}"


def long_prompt(class_id: int, motion_id: int, frames: int, start) -> str:
    desc = CLASSES[class_id][1]
    motion = MOTIONS[motion_id][0]
    act = "rests motionless" if motion_id == STILL else f"glides steadily toward the {motion}"
    return (f"A short clip of {desc} that {act} over {frames} frames on a dark background, "
            f"starting near row {start[1]:.0f} and column {start[0]:.0f}.")


def render_latent(class_id: int, motion_id: int, seed: int, config: ModelConfig):
    """Deterministic (C, T, H, W) latent for one (class, motion, seed), plus the start point."""
    c, t, h, w = config.latent_shape
    _, _, width, code = CLASSES[class_id]
    dx, dy = MOTIONS[motion_id][1]
    rng = Rng(seed, stream=7)
    span_x = max(w - 1 - abs(dx) * (t - 1), 0)
    span_y = max(h - 1 - abs(dy) * (t - 1), 0)
    x0 = rng.uniform(1)[0] * span_x + (abs(dx) * (t - 1) if dx < 0 else 0)
    y0 = rng.uniform(1)[0] * span_y + (abs(dy) * (t - 1) if dy < 0 else 0)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    z = np.zeros((max(c, 4), t, h, w))
    for f in range(t):
        cx, cy = x0 + dx * f, y0 + dy * f
        bump = 2.0 * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * width**2))
        z[0, f] = bump
        z[1, f] = dx * bump
        z[2, f] = dy * bump
        z[3, f] = code
    return z[:c].astype(np.float32), (x0, y0)


def gen_synthetic_dataset(n: int, config: ModelConfig, seed: int = 0) -> list[SyntheticSample]:
    if n < 1:
        raise ValueError("dataset needs at least one sample")
    pick = Rng(seed, stream=5)
    classes = pick.integers(0, len(CLASSES), n)
    motions = pick.integers(0, len(MOTIONS), n)
    sample_seeds = pick.integers(0, 2**62, n)
    out = []
    for cls, mot, s in zip(classes, motions, sample_seeds):
        z, start = render_latent(int(cls), int(mot), int(s), config)
        out.append(SyntheticSample(z, short_prompt(cls, mot), long_prompt(cls, mot, config.frames, start),
                                   int(cls), int(mot)))
    return out


def make_dataset(samples: list[SyntheticSample], encoders: Encoders, separator: str = DEFAULT_SEPARATOR,
                 template: TemplateSpec = TemplateSpec()) -> Dataset:
    prompts = [PromptSet.build(s.p, s.p_l, separator, template) for s in samples]
    return Dataset(np.stack([s.z0 for s in samples]), encode_prompts(prompts, encoders), prompts)
