"""``grow`` command line: plan, expand, inject, train, sample, verify.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
3 verification failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import verify
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, GrowConfig, load_config
from .data import gen_synthetic_dataset, make_dataset
from .diffusion import CsvMetrics, TrainingDiverged, ddim_sample, train_loop
from .expansion import ExpansionError, ExpansionSpec, expand_model, plan_expansion, remap_optimizer_state, verify_identity
from .model import init_model
from .optim import AdamState
from .rng import Rng
from .text import PromptSet, encode_prompts, inject_llm_branch, read_prompt_file

log = logging.getLogger("dit_grow")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3

# rng streams owned by the CLI
TRAIN_STREAM = 3 << 32
SAMPLE_STREAM = 4 << 32
PROBE_STREAM = 5 << 32


class UsageError(Exception):
    pass


def _path(value, what: str) -> Path:
    if not value:
        raise UsageError(f"missing {what} path (pass it on the command line or set it in the config)")
    return Path(value)


def _identity_line(diff: float) -> str:
    status = "PASS" if diff == 0.0 else "FAIL"
    return f"identity: {status} max_abs_diff={'0' if diff == 0.0 else f'{diff:.3g}'}"


def _prune_moments(state: AdamState | None, model) -> AdamState | None:
    if state is None:
        return None
    shapes = {n: p.shape for n, p in model.named_parameters()}
    for name in [n for n in state.m if shapes.get(n) != state.m[n].shape]:
        del state.m[name], state.v[name], state.step[name]
    return state


def cmd_plan(cfg: GrowConfig, args) -> int:
    if not args.spec:
        raise UsageError("plan needs --spec")
    plan = plan_expansion(cfg.blocks, ExpansionSpec.parse(args.spec), cfg.llm_branch)
    sys.stdout.write(plan.report())
    return EXIT_OK


def cmd_expand(cfg: GrowConfig, args) -> int:
    if not args.spec:
        raise UsageError("expand needs --spec")
    src, dst = _path(args.ckpt or cfg.ckpt, "--ckpt"), _path(args.out or cfg.out, "--out")
    spec = ExpansionSpec.parse(args.spec)
    model, opt = load_checkpoint(src)
    plan = plan_expansion(len(model.blocks), spec, model.config.llm_branch)
    grown = expand_model(model, plan)
    diff = verify_identity(model, grown, 8, Rng(args.seed, PROBE_STREAM))
    print(_identity_line(diff))
    if diff != 0.0:
        print("refusing to save: expanded model changes outputs", file=sys.stderr)
        return EXIT_VERIFY
    save_checkpoint(grown, dst, remap_optimizer_state(opt, plan) if opt is not None else None)
    log.info("wrote %s (%d -> %d blocks)", dst, plan.original_blocks, plan.total_blocks)
    return EXIT_OK


def cmd_inject(cfg: GrowConfig, args) -> int:
    src, dst = _path(args.ckpt or cfg.ckpt, "--ckpt"), _path(args.out or cfg.out, "--out")
    model, opt = load_checkpoint(src)
    injected = inject_llm_branch(model, Rng(args.seed, PROBE_STREAM + 1))
    diff = verify_identity(model, injected, 8, Rng(args.seed, PROBE_STREAM))
    print(_identity_line(diff))
    if diff != 0.0:
        print("refusing to save: injected model changes outputs", file=sys.stderr)
        return EXIT_VERIFY
    save_checkpoint(injected, dst, _prune_moments(opt, injected))
    log.info("wrote %s with llm branch", dst)
    return EXIT_OK


def cmd_train(cfg: GrowConfig, args) -> int:
    dst = _path(args.out or cfg.out, "--out")
    ckpt = args.ckpt or cfg.ckpt
    if ckpt:
        model, opt = load_checkpoint(ckpt)
        opt = opt or AdamState()
    else:
        model, opt = init_model(cfg.model_config(), cfg.seed), AdamState()
    start = max(opt.step.values(), default=0)
    samples = gen_synthetic_dataset(cfg.dataset_size, model.config, cfg.seed)
    dataset = make_dataset(samples, dataclasses.replace(cfg, **dataclasses.asdict(model.config)).encoders(),
                           cfg.separator, cfg.template())
    metrics_path = Path(cfg.metrics) if cfg.metrics else dst.with_name(dst.name + ".metrics.csv")
    csv = CsvMetrics(metrics_path)

    def progress(m, _model):
        if (m.step + 1) % 100 == 0:
            log.info("step %d loss %.5f", m.step + 1, m.loss)

    try:
        result = train_loop(model, dataset, cfg.steps, cfg.lr, cfg.dropout(), Rng(cfg.seed, TRAIN_STREAM + start),
                            (csv, progress), cfg.batch, cfg.schedule(), opt, start)
    finally:
        csv.close()
    save_checkpoint(result.model, dst, result.optimizer)
    print(f"trained {cfg.steps} steps, final loss {result.metrics[-1].loss:.6g}")
    return EXIT_OK


def _sample_prompts(cfg: GrowConfig, args, model_config) -> PromptSet:
    if args.prompt:
        p, p_l = args.prompt, args.long_prompt or ""
    elif cfg.prompts:
        p, p_l = read_prompt_file(cfg.prompts)[0]
    else:
        first = gen_synthetic_dataset(1, model_config, cfg.seed)[0]
        p, p_l = first.p, first.p_l
    return PromptSet.build(p, p_l, cfg.separator, cfg.template())


def write_pgm_strip(latent: np.ndarray, path, scale: int = 4) -> None:
    """Channel 0 of a (C, T, H, W) latent as frames side by side, min-max scaled."""
    frames = latent[0]
    strip = np.concatenate(list(frames), axis=1).astype(np.float64)
    lo, hi = strip.min(), strip.max()
    img = np.zeros_like(strip) if hi == lo else (strip - lo) / (hi - lo)
    img = np.round(img * 255).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def cmd_sample(cfg: GrowConfig, args) -> int:
    src, dst = _path(args.ckpt or cfg.ckpt, "--ckpt"), _path(args.out or cfg.out, "--out")
    model, _ = load_checkpoint(src)
    mc = model.config
    prompts = _sample_prompts(cfg, args, mc)
    encoders = dataclasses.replace(cfg, **dataclasses.asdict(mc)).encoders()
    cond = encode_prompts([prompts], encoders)
    latent = ddim_sample(model, (1, *mc.latent_shape), cond, cfg.guidance(), cfg.sample_steps,
                         Rng(args.seed, SAMPLE_STREAM), cfg.schedule(), cfg.sample_clip)
    npy = dst if dst.suffix == ".npy" else dst.with_name(dst.name + ".npy")
    np.save(npy, latent[0])
    pgm = npy.with_suffix(".pgm")
    write_pgm_strip(latent[0], pgm)
    print(f"wrote {npy} and {pgm}")
    return EXIT_OK


def cmd_verify(cfg: GrowConfig, args) -> int:
    ckpt = args.ckpt or cfg.ckpt
    model = load_checkpoint(ckpt)[0] if ckpt else init_model(cfg.model_config(), args.seed)
    results = verify.run_all(model, args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


COMMANDS = {
    "plan": cmd_plan,
    "expand": cmd_expand,
    "inject": cmd_inject,
    "train": cmd_train,
    "sample": cmd_sample,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grow", description="Grow and train toy video diffusion transformers.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value run configuration")
        p.add_argument("--ckpt", help="input checkpoint")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--steps", type=int, help="training steps (train)")
        p.add_argument("--spec", help="expansion spec such as insert:k=1/2 or prefix:P=2")
        p.add_argument("--s-t5", type=float, dest="s_t5")
        p.add_argument("--s-llm", type=float, dest="s_llm")
        p.add_argument("--prompt", help="short prompt (sample)")
        p.add_argument("--long-prompt", dest="long_prompt", help="long prompt merged after the short one")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _apply_overrides(cfg: GrowConfig, args) -> GrowConfig:
    updates = {k: getattr(args, k) for k in ("seed", "steps", "s_t5", "s_llm") if getattr(args, k) is not None}
    try:
        cfg = dataclasses.replace(cfg, **updates)
        cfg.guidance()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.steps < 1:
        raise ConfigError("steps must be >= 1")
    args.seed = cfg.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        try:
            cfg = load_config(args.config)
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from None
        cfg = _apply_overrides(cfg, args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ExpansionError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        print(f"error [{e.code}]: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, TrainingDiverged, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
