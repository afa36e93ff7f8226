"""Spatio-temporal diffusion transformer.

Tokens live in a (B, T, S, d) layout inside the block stack, S = H*W. Each
block runs spatial self-attention, temporal self-attention, T5
cross-attention, an optional gated LLM cross-attention and a feed-forward
layer, each as a residual sub-layer modulated by the timestep embedding.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Attention, ConditionEmbedder, FeedForward, Linear, Module
from .rng import Rng
from .tensor import Parameter, ShapeError, Tensor


@dataclass
class ModelConfig:
    channels: int = 4
    frames: int = 4
    height: int = 8
    width: int = 8
    hidden: int = 32
    heads: int = 4
    blocks: int = 2
    ffn_mult: int = 4
    t5_width: int = 32
    llm_width: int = 32
    llm_branch: bool = False

    def __post_init__(self):
        for name in ("channels", "frames", "height", "width", "hidden", "heads", "blocks",
                     "ffn_mult", "t5_width", "llm_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.hidden % 2:
            raise ValueError("hidden width must be even for sinusoidal embeddings")

    @property
    def tokens(self) -> int:
        return self.frames * self.height * self.width

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.channels, self.frames, self.height, self.width)


@dataclass
class ConditionBatch:
    """Raw (frozen-encoder) condition embeddings plus per-sample usage flags.

    Masks are boolean keep-masks over token positions. A sample whose
    ``use_*`` flag is False gets the model's learned null embedding instead.
    """

    t5: np.ndarray
    t5_mask: np.ndarray
    llm: np.ndarray | None = None
    llm_mask: np.ndarray | None = None
    use_t5: np.ndarray | None = None
    use_llm: np.ndarray | None = None

    def __post_init__(self):
        b = self.t5.shape[0]
        if self.use_t5 is None:
            self.use_t5 = np.ones(b, dtype=bool)
        if self.use_llm is None:
            self.use_llm = np.ones(b, dtype=bool)
        self.use_t5 = np.asarray(self.use_t5, dtype=bool)
        self.use_llm = np.asarray(self.use_llm, dtype=bool)

    @property
    def batch_size(self) -> int:
        return self.t5.shape[0]

    def with_flags(self, use_t5, use_llm) -> "ConditionBatch":
        b = self.batch_size
        return dataclasses.replace(self, use_t5=np.broadcast_to(use_t5, (b,)).copy(),
                                   use_llm=np.broadcast_to(use_llm, (b,)).copy())

    def take(self, idx) -> "ConditionBatch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return ConditionBatch(self.t5[idx], self.t5_mask[idx], pick(self.llm), pick(self.llm_mask),
                              self.use_t5[idx], self.use_llm[idx])


# -- embeddings -----------------------------------------------------------

def sinusoidal_embedding(positions, d: int) -> np.ndarray:
    """Half sines then half cosines over log-spaced frequencies, float64."""
    if d % 2:
        raise ValueError(f"embedding width must be even, got {d}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = pos[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def timestep_embedding(t, d: int, max_t: int | None = None) -> np.ndarray:
    """Pre-MLP timestep features for integer timesteps ``t``."""
    t = np.atleast_1d(np.asarray(t))
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("timesteps must be integers")
    if np.any(t < 0) or (max_t is not None and np.any(t >= max_t)):
        raise ValueError(f"timestep out of range [0, {max_t})")
    return sinusoidal_embedding(t, d)


def positional_encoding(frames: int, spatial: int, d: int) -> np.ndarray:
    """Fixed additive encoding of shape (frames*spatial, d): frame part + spatial part."""
    temporal = sinusoidal_embedding(np.arange(frames), d)
    space = sinusoidal_embedding(np.arange(spatial), d)
    return (temporal[:, None, :] + space[None, :, :]).reshape(frames * spatial, d)


# -- reshapes -------------------------------------------------------------

def reshape_spatial(x: Tensor) -> Tensor:
    """(B, T, S, d) -> (B*T, S, d); element (b, t, s) lands at (b*T + t, s)."""
    b, t, s, d = x.shape
    return x.reshape(b * t, s, d)


def unreshape_spatial(x: Tensor, batch: int) -> Tensor:
    bt, s, d = x.shape
    return x.reshape(batch, bt // batch, s, d)


def reshape_temporal(x: Tensor) -> Tensor:
    """(B, T, S, d) -> (B*S, T, d); element (b, t, s) lands at (b*S + s, t)."""
    b, t, s, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b * s, t, d)


def unreshape_temporal(x: Tensor, batch: int) -> Tensor:
    bs, t, d = x.shape
    return x.reshape(batch, bs // batch, t, d).transpose(0, 2, 1, 3)


# -- block ----------------------------------------------------------------

# Modulation layout, in units of d: (gamma, beta, alpha) per residual
# sub-layer, then (gamma, beta) for the LLM slot, which is gated by tanh(gate).
MOD_SLOTS = {"spatial": 0, "temporal": 3, "cross_t5": 6, "ffn": 9, "cross_llm": 12}
BASE_CHUNKS = 12
LLM_CHUNKS = 2

# The last linear of each residual sub-layer: what zero-init targets.
BASE_LAST_LINEARS = ("spatial.out", "temporal.out", "cross_t5.out", "ffn.fc2")
LLM_LAST_LINEAR = "cross_llm.out"


class Block(Module):
    def __init__(self, config: ModelConfig, rng: Rng | None = None):
        d = config.hidden
        chunks = BASE_CHUNKS + (LLM_CHUNKS if config.llm_branch else 0)
        self.modulation = Linear(d, chunks * d)
        if rng is not None:
            self.modulation.weight.data[...] = rng.normal((d, chunks * d), 0.02)
        bias = np.zeros((chunks, d))
        bias[[0, 2, 3, 5, 6, 8, 9, 11]] = 1.0  # gammas and alphas start at 1
        if config.llm_branch:
            bias[12] = 1.0
        self.modulation.bias.data[...] = bias.reshape(-1)
        self.spatial = Attention(d, d, config.heads, rng)
        self.temporal = Attention(d, d, config.heads, rng)
        self.cross_t5 = Attention(d, config.t5_width, config.heads, rng)
        self.cross_llm: Attention | None = None
        self.gate: Parameter | None = None
        if config.llm_branch:
            self.cross_llm = Attention(d, config.llm_width, config.heads, rng)
            self.gate = Parameter(np.zeros(1))
        self.ffn = FeedForward(d, config.ffn_mult, rng)

    @property
    def has_llm(self) -> bool:
        return self.cross_llm is not None

    def last_linears(self) -> list[str]:
        names = list(BASE_LAST_LINEARS)
        if self.has_llm:
            names.append(LLM_LAST_LINEAR)
        return names

    def sublayer(self, dotted: str) -> Linear:
        obj = self
        for part in dotted.split("."):
            obj = getattr(obj, part)
        return obj

    def modulate(self, t_emb: Tensor, slot: str) -> list[Tensor]:
        """Per-sample (gamma, beta[, alpha]) for ``slot``, each shaped (B, 1, 1, d)."""
        d = self.modulation.d_in
        start = MOD_SLOTS[slot]
        n = 2 if slot == "cross_llm" else 3
        mod = self.modulation(t_emb)
        b = mod.shape[0]
        return [mod[:, (start + i) * d:(start + i + 1) * d].reshape(b, 1, 1, d) for i in range(n)]

    def __call__(self, x, t_emb, c_t5, t5_mask, c_llm=None, llm_mask=None):
        return transformer_block_forward(x, self, t_emb, c_t5, t5_mask, c_llm, llm_mask)


def apply_s_adaln(x: Tensor, gamma, beta, eps: float = 1e-6) -> Tensor:
    """gamma * LayerNorm(x) + beta."""
    return T.layer_norm(x, eps) * gamma + beta


def self_attention_sublayer(x: Tensor, block: Block, axis: str, t_emb: Tensor) -> Tensor:
    if axis not in ("spatial", "temporal"):
        raise ValueError(f"axis must be 'spatial' or 'temporal', got {axis!r}")
    gamma, beta, alpha = block.modulate(t_emb, axis)
    h = apply_s_adaln(x, gamma, beta)
    b = x.shape[0]
    if axis == "spatial":
        a = unreshape_spatial(block.spatial(reshape_spatial(h)), b)
    else:
        a = unreshape_temporal(block.temporal(reshape_temporal(h)), b)
    return x + alpha * a


def cross_attention_sublayer(x: Tensor, cond: Tensor, mask, block: Block, slot: str, t_emb: Tensor) -> Tensor:
    if slot not in ("t5", "llm"):
        raise ValueError(f"slot must be 't5' or 'llm', got {slot!r}")
    if slot == "llm" and not block.has_llm:
        raise RuntimeError("llm cross-attention invoked on a block without the llm branch")
    attn = block.cross_t5 if slot == "t5" else block.cross_llm
    if cond.shape[-1] != attn.k.d_in:
        raise ShapeError(f"{slot} condition width {cond.shape[-1]} != expected {attn.k.d_in}")
    b, t, s, d = x.shape
    if slot == "t5":
        gamma, beta, gain = block.modulate(t_emb, "cross_t5")
    else:
        gamma, beta = block.modulate(t_emb, "cross_llm")
        gain = T.tanh(block.gate)
    h = apply_s_adaln(x, gamma, beta).reshape(b, t * s, d)
    a = attn(h, cond, mask).reshape(b, t, s, d)
    return x + gain * a


def ffn_sublayer(x: Tensor, block: Block, t_emb: Tensor) -> Tensor:
    gamma, beta, alpha = block.modulate(t_emb, "ffn")
    return x + alpha * block.ffn(apply_s_adaln(x, gamma, beta))


def transformer_block_forward(x: Tensor, block: Block, t_emb: Tensor, c_t5: Tensor, t5_mask,
                              c_llm: Tensor | None = None, llm_mask=None) -> Tensor:
    if c_llm is not None and not block.has_llm:
        raise RuntimeError("llm condition given to a block whose llm branch is disabled")
    x = self_attention_sublayer(x, block, "spatial", t_emb)
    x = self_attention_sublayer(x, block, "temporal", t_emb)
    x = cross_attention_sublayer(x, c_t5, t5_mask, block, "t5", t_emb)
    if block.has_llm:
        if c_llm is None:
            raise RuntimeError("block has an llm branch but no llm condition was given")
        x = cross_attention_sublayer(x, c_llm, llm_mask, block, "llm", t_emb)
    return ffn_sublayer(x, block, t_emb)


# -- model ----------------------------------------------------------------

class DiT(Module):
    def __init__(self, config: ModelConfig, rng: Rng | None = None):
        self.config = dataclasses.replace(config)
        c, d = config.channels, config.hidden
        self.x_embed = Linear(c, d, rng)
        self.t_fc1 = Linear(d, d, rng)
        self.t_fc2 = Linear(d, d, rng)
        self.t5_embedder = ConditionEmbedder(config.t5_width, config.t5_width, rng)
        self.t5_null = Parameter(_null_init(rng, config.t5_width))
        self.llm_embedder: ConditionEmbedder | None = None
        self.llm_null: Parameter | None = None
        if config.llm_branch:
            self.llm_embedder = ConditionEmbedder(config.llm_width, config.llm_width, rng)
            self.llm_null = Parameter(_null_init(rng, config.llm_width))
        self.blocks: list[Block] = [Block(config, rng) for _ in range(config.blocks)]
        self.final = Linear(d, c, rng)
        self._pos_cache: dict = {}

    def pos_embed(self, dtype) -> np.ndarray:
        key = (np.dtype(dtype).str, self.config.frames, self.config.height * self.config.width)
        if key not in self._pos_cache:
            cfg = self.config
            self._pos_cache[key] = positional_encoding(cfg.frames, cfg.height * cfg.width, cfg.hidden).astype(dtype)
        return self._pos_cache[key]

    def embed_timestep(self, t) -> Tensor:
        feats = Tensor(timestep_embedding(t, self.config.hidden))
        return self.t_fc2(T.gelu(self.t_fc1(feats)))

    def tokens_from_latent(self, z) -> Tensor:
        z = T.as_tensor(z)
        cfg = self.config
        if z.ndim != 5 or z.shape[1:] != cfg.latent_shape:
            raise ShapeError(f"latent shape {z.shape} does not match (B, {cfg.latent_shape})")
        b = z.shape[0]
        x = z.transpose(0, 2, 3, 4, 1).reshape(b, cfg.tokens, cfg.channels)
        return self.x_embed(x) + self.pos_embed(x.dtype)

    def latent_from_tokens(self, tokens: Tensor) -> Tensor:
        cfg = self.config
        if tokens.ndim != 3 or tokens.shape[1] != cfg.tokens:
            raise ShapeError(f"expected {cfg.tokens} tokens, got shape {tokens.shape}")
        b = tokens.shape[0]
        y = self.final(tokens).reshape(b, cfg.frames, cfg.height, cfg.width, cfg.channels)
        return y.transpose(0, 4, 1, 2, 3)

    def _embed_condition(self, raw, mask, use, null, embedder, width, label):
        raw = np.asarray(raw)
        if raw.ndim != 3 or raw.shape[-1] != width:
            raise ShapeError(f"{label} condition shape {raw.shape} does not match width {width}")
        x = T.where(use[:, None, None], Tensor(raw), null)
        mask = np.asarray(mask, dtype=bool) | ~use[:, None]
        return embedder(x), mask

    def embed_conditions(self, cond: ConditionBatch):
        cfg = self.config
        c_t5, m_t5 = self._embed_condition(cond.t5, cond.t5_mask, cond.use_t5, self.t5_null,
                                           self.t5_embedder, cfg.t5_width, "t5")
        c_llm = m_llm = None
        if cfg.llm_branch:
            if cond.llm is None:
                raise ValueError("model has an llm branch but the batch carries no llm condition")
            c_llm, m_llm = self._embed_condition(cond.llm, cond.llm_mask, cond.use_llm, self.llm_null,
                                                 self.llm_embedder, cfg.llm_width, "llm")
        return c_t5, m_t5, c_llm, m_llm

    def __call__(self, z_t, t, cond: ConditionBatch) -> Tensor:
        """Predicted noise with the same shape as ``z_t``."""
        cfg = self.config
        t = np.atleast_1d(np.asarray(t))
        b = np.shape(z_t)[0]
        if t.shape != (b,) or cond.batch_size != b:
            raise ShapeError(f"batch mismatch: z_t {b}, t {t.shape}, conditions {cond.batch_size}")
        tokens = self.tokens_from_latent(z_t)
        t_emb = self.embed_timestep(t)
        c_t5, m_t5, c_llm, m_llm = self.embed_conditions(cond)
        x = tokens.reshape(b, cfg.frames, cfg.height * cfg.width, cfg.hidden)
        for block in self.blocks:
            x = block(x, t_emb, c_t5, m_t5, c_llm, m_llm)
        return self.latent_from_tokens(x.reshape(b, cfg.tokens, cfg.hidden))


def _null_init(rng: Rng | None, width: int) -> np.ndarray:
    return rng.normal(width, 1.0 / math.sqrt(width)) if rng is not None else np.zeros(width)


def model_forward(model: DiT, z_t, t, cond: ConditionBatch) -> Tensor:
    return model(z_t, t, cond)


def init_model(config: ModelConfig, seed: int = 0) -> DiT:
    return DiT(config, Rng(seed, stream=1))


def block_param_count(config: ModelConfig, llm: bool | None = None) -> int:
    """Closed-form scalar count of one transformer block."""
    d, m = config.hidden, config.ffn_mult
    llm = config.llm_branch if llm is None else llm
    chunks = BASE_CHUNKS + (LLM_CHUNKS if llm else 0)

    def attn(d_kv):
        return 2 * (d * d + d) + 2 * (d_kv * d + d)

    n = (d * chunks * d + chunks * d) + 2 * attn(d) + attn(config.t5_width)
    n += (d * m * d + m * d) + (m * d * d + d)
    if llm:
        n += attn(config.llm_width) + 1
    return n


def _group(name: str) -> str:
    if name.startswith("blocks."):
        return "blocks"
    if name.startswith("final."):
        return "heads"
    return "embedders"


def count_parameters(model: DiT, grouped: bool = False):
    """Exact scalar parameter count, optionally split into embedders/blocks/heads."""
    groups = {"embedders": 0, "blocks": 0, "heads": 0}
    for name, p in model.named_parameters():
        groups[_group(name)] += p.data.size
    return groups if grouped else sum(groups.values())
