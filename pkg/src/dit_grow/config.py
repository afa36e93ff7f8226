"""Flat ``key = value`` run configuration.

Strings are written JSON-quoted so leading/trailing spaces survive; on read
an unquoted string is taken verbatim (stripped). ``#`` starts a comment line.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields

from .diffusion import DropoutPolicy, GuidanceScales, make_schedule
from .model import ModelConfig
from .text import DEFAULT_PREFIX, DEFAULT_SEPARATOR, DEFAULT_SUFFIX, EncoderConfig, Encoders, StubEncoder, TemplateSpec

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))


class ConfigError(ValueError):
    pass


@dataclass
class GrowConfig:
    # model
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
    # frozen stub encoders
    t5_len: int = 16
    llm_len: int = 24
    vocab_size: int = 4096
    encoder_seed: int = 1
    # noise schedule
    sched_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    # training
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 8
    seed: int = 0
    dataset_size: int = 512
    # condition dropout
    p_drop_llm: float = 0.01
    p_drop_all: float = 0.001
    # guidance and sampling
    s_t5: float = 7.0
    s_llm: float = 12.5
    sample_steps: int = 50
    sample_clip: float | None = 2.5  # clamp on the predicted x0; none disables
    # prompts
    separator: str = DEFAULT_SEPARATOR
    template_prefix: str = DEFAULT_PREFIX
    template_suffix: str = DEFAULT_SUFFIX
    # paths (optional)
    ckpt: str | None = None
    out: str | None = None
    metrics: str | None = None
    prompts: str | None = None

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in MODEL_KEYS})

    def schedule(self):
        return make_schedule(self.sched_steps, self.beta_start, self.beta_end)

    def dropout(self) -> DropoutPolicy:
        return DropoutPolicy(self.p_drop_llm, self.p_drop_all)

    def guidance(self) -> GuidanceScales:
        return GuidanceScales(self.s_t5, self.s_llm)

    def template(self) -> TemplateSpec:
        return TemplateSpec(self.template_prefix, self.template_suffix)

    def encoders(self) -> Encoders:
        return Encoders(
            StubEncoder("t5", EncoderConfig(self.t5_len, self.t5_width, self.vocab_size, self.encoder_seed)),
            StubEncoder("llm", EncoderConfig(self.llm_len, self.llm_width, self.vocab_size, self.encoder_seed)),
        )

    def with_model(self, model_config: ModelConfig) -> "GrowConfig":
        return dataclasses.replace(self, **dataclasses.asdict(model_config))


_TYPES = {f.name: f.type for f in fields(GrowConfig)}


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    if kind.endswith("| None") and raw.lower() in ("", "none"):
        return None
    if kind == "str | None" or kind == "str":
        if raw.startswith('"'):
            try:
                return json.loads(raw)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{key}: bad quoted string: {e}") from None
        return raw
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return int(raw) if kind == "int" else float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None


def parse_config(text: str) -> GrowConfig:
    values = {}
    # only \n ends a line; quoted strings may hold other unicode line breaks
    for lineno, line in enumerate(text.split("\n"), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = key.strip(), raw.strip()
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if not raw.startswith('"') and " #" in raw:
            raw = raw.split(" #", 1)[0].rstrip()
        values[key] = _parse_value(key, raw)
    try:
        cfg = GrowConfig(**values)
        cfg.model_config()
        cfg.dropout()
        cfg.guidance()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path) -> GrowConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if value is None:
        return "none"
    return repr(value)


def serialize_config(cfg: GrowConfig, keys=None) -> str:
    names = keys or [f.name for f in fields(GrowConfig)]
    return "".join(f"{k} = {_format_value(getattr(cfg, k))}\n" for k in names)
