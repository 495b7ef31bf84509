"""Command-line entry point: ``magnet <command> [options]``.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures. Outputs go
to ``$MAGNET_RUN_DIR/<name>`` (default root ``runs``), together with the
resolved configuration.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import dataset as ds
from . import dfot as df
from . import metrics
from . import pipeline
from . import sampler as sp
from . import vqvae as vq
from .errors import MagnetError

log = logging.getLogger("magnet")

STRATEGY_CHOICES = list(sp.STRATEGIES) + ["ultralong"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers

def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.RunConfig()
    for path in args.config or []:
        cfg = config_mod.load(_require_file(path, "--config"), base=cfg)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value)
    return cfg


def _run_dir(args, default_name) -> Path:
    root = Path(os.environ.get("MAGNET_RUN_DIR", "runs"))
    out = root / (args.name or default_name)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).is_file():
        raise UsageError(f"{flag}: no such file {path}")
    return Path(path)


def _require_dir(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).is_dir():
        raise UsageError(f"{flag}: no such directory {path}")
    return Path(path)


def _motion_files(directory, prefix=""):
    return sorted(p for p in Path(directory).glob(f"{prefix}*.motion"))


def _references(path):
    """A single ground-truth file, or a directory whose sorted files map to conditions c000, c001, ..."""
    if Path(path).is_dir():
        files = _motion_files(path)
        if not files:
            raise UsageError(f"--reference: no .motion files in {path}")
        return files
    return [_require_file(path, "--reference")]


def _load_split(data_dir, split):
    files = _motion_files(data_dir, split + "_")
    return [pipeline.ensure_preprocessed(ds.load(p)) for p in files]


def _seed_everything(seed):
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    for key, attr in (("data.mode", "mode"), ("data.P", "P"), ("data.T", "T"), ("data.n_train", "n_train"),
                      ("data.n_val", "n_val"), ("seed", "seed")):
        value = getattr(args, attr)
        if value is not None:
            cfg.set(key, str(value))
    out = _run_dir(args, "data")
    train, val = ds.train_val_seeds(cfg["data.n_train"], cfg["data.n_val"], base=cfg["seed"])
    for split, seeds in (("train", train), ("val", val)):
        for i, s in enumerate(seeds):
            seq = ds.preprocess(ds.generate_interaction(cfg["data.mode"], cfg["data.P"], cfg["data.T"], s))
            ds.save(seq, out / f"{split}_{i:03d}.motion")
            if cfg["data.mirror_augment"]:
                ds.save(ds.mirror_augment(seq), out / f"{split}_{i:03d}_mirror.motion")
    cfg.write(out / "config.resolved")
    print(f"wrote {len(train)} train and {len(val)} val sequences to {out}")
    return 0


def cmd_train_vqvae(args) -> int:
    cfg = _load_config(args)
    data = _require_dir(args.data, "--data")
    train = _load_split(data, "train")
    if not train:
        raise UsageError(f"--data: no train_*.motion files in {data}")
    val = _load_split(data, "val") or None
    out = _run_dir(args, "vqvae")
    _seed_everything(cfg["seed"])
    res = vq.train_vqvae(train, cfg.vq(), cfg.vq_train(), seed=cfg["seed"], val_seqs=val)
    vq.save_vqvae(res.model, out / "vqvae.ckpt")
    _write_history(out / "history.txt", res.history)
    cfg.write(out / "config.resolved")
    print(f"vqvae: initial loss {res.initial_loss:.6g}, best val {res.best_val:.6g} at step {res.best_step}, "
          f"codebook usage {res.usage:.3f} -> {out / 'vqvae.ckpt'}")
    return 0


def cmd_train_dfot(args) -> int:
    cfg = _load_config(args)
    data = _require_dir(args.data, "--data")
    raw = cfg["dfot.raw_features"]
    vqvae = None if raw else vq.load_vqvae(_require_file(args.vqvae, "--vqvae"))
    train = _load_split(data, "train")
    if not train:
        raise UsageError(f"--data: no train_*.motion files in {data}")
    val = _load_split(data, "val")
    if raw:
        omega = cfg["vq.omega"]
        d_z = omega * (cfg["vq.n_joints"] * 6 + 9)
    else:
        omega, d_z = vqvae.config.omega, vqvae.config.d_vq
    config = cfg.dfot(d_z)
    if config.omega != omega:
        raise UsageError(f"dfot.omega={config.omega} differs from the tokenizer's omega={omega}")
    codec = pipeline.fit_codec(train, vqvae, config.layout)
    out = _run_dir(args, "dfot")
    res = df.train_dfot(pipeline.tokenize(train, vqvae, codec), config, codec, cfg.dfot_train(),
                        seed=cfg["seed"], val_examples=pipeline.tokenize(val, vqvae, codec) if val else None)
    df.save_dfot(res.model, codec, out / "dfot.ckpt")
    _write_history(out / "history.txt", res.history)
    cfg.write(out / "config.resolved")
    print(f"dfot: initial loss {res.initial_loss:.6g}, best val {res.best_val:.6g} at step {res.best_step} "
          f"-> {out / 'dfot.ckpt'}")
    return 0


def _sampling_setup(args, cfg):
    for key, attr in (("sample.strategy", "strategy"), ("sample.guidance", "guidance"), ("sample.w", "w"),
                      ("sample.tt_offset", "tt_offset"), ("sample.samples", "samples"), ("seed", "seed"),
                      ("sample.history", "history"), ("sample.target", "target")):
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(key, str(value))
    if not 0.0 <= cfg["sample.tt_offset"] <= 1.0:
        raise UsageError(f"--tt-offset must lie in [0, 1], got {cfg['sample.tt_offset']}")
    if cfg["sample.strategy"] not in STRATEGY_CHOICES:
        raise UsageError(f"--strategy: unknown strategy {cfg['sample.strategy']!r}")
    if cfg["sample.guidance"] not in sp.GUIDANCE_MODES:
        raise UsageError(f"--guidance: unknown mode {cfg['sample.guidance']!r}")
    model, codec = df.load_dfot(_require_file(args.dfot, "--dfot"))
    # without --vqvae the checkpoint must be a raw-feature model
    vqvae = None if args.vqvae is None else vq.load_vqvae(_require_file(args.vqvae, "--vqvae"))
    if vqvae is not None and vqvae.config.d_vq != model.config.d_z:
        raise UsageError("--vqvae: latent width does not match the DFoT checkpoint")
    if vqvae is None and model.config.d_z != model.config.omega * (cfg["vq.n_joints"] * 6 + 9):
        raise UsageError("--vqvae is required for this DFoT checkpoint")
    strategy = cfg["sample.strategy"]
    needs_cond = strategy in ("inpaint", "inbetween", "control", "ultralong") or (
        strategy in ("predict", "joint", "agentic-sync", "agentic-async") and cfg["sample.history"] > 0)
    conditioning = [None]
    if args.conditioning or needs_cond:
        if not args.conditioning:
            raise UsageError("--conditioning is required")
        conditioning = [ds.load(_require_file(c, "--conditioning")) for c in args.conditioning]
    guidance = sp.GuidanceSpec(cfg["sample.guidance"], cfg["sample.w"])
    return model, codec, vqvae, conditioning, guidance


def _strategy_kwargs(cfg):
    keys = cfg["sample.keyframes"].strip()
    return dict(history=cfg["sample.history"], target=cfg["sample.target"], offset=cfg["sample.tt_offset"],
                keyframes=[int(k) for k in keys.split(",")] if keys else [], controller=cfg["sample.controller"],
                steps=cfg["sample.steps"], window=cfg["sample.window"], overlap=cfg["sample.overlap"],
                total=cfg["sample.total"], snap=cfg["sample.snap"])


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    model, codec, vqvae, conditioning, guidance = _sampling_setup(args, cfg)
    out = _run_dir(args, "samples")
    strategy = cfg["sample.strategy"]
    kwargs = _strategy_kwargs(cfg)
    n = cfg["sample.samples"]
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(len(conditioning) * n)
    for c, cond in enumerate(conditioning):
        for k in range(n):
            ss = seeds[c * n + k]
            _, motion = pipeline.run_strategy(model, vqvae, codec, strategy, cond, P=args.agents,
                                              n_steps=args.token_steps, guidance=guidance,
                                              seed=int(ss.generate_state(1)[0]), **kwargs)
            stem = f"sample_c{c:03d}_s{k:02d}"
            ds.save(motion, out / f"{stem}.motion")
            if args.plot:
                plot_trajectories(motion, out / f"{stem}.png", reference=cond)
    cfg.write(out / "config.resolved")
    print(f"{strategy}: wrote {len(conditioning) * n} samples to {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    gen_dir = _require_dir(args.generated, "--generated")
    real_dir = _require_dir(args.real, "--real")
    gen_files = _motion_files(gen_dir)
    real = [pipeline.ensure_preprocessed(ds.load(p)) for p in _motion_files(real_dir)]
    if not gen_files:
        raise UsageError(f"--generated: no .motion files in {gen_dir}")
    if not real:
        raise UsageError(f"--real: no .motion files in {real_dir}")
    generated = [ds.load(p) for p in gen_files]
    groups = {}  # condition index -> joint arrays, in file order
    for p, s in zip(gen_files, generated):
        cond = p.stem.split("_")[1] if p.stem.startswith("sample_") else "all"
        groups.setdefault(cond, []).append(s.joints_world())
    samples = [np.stack(g) for g in groups.values() if len({x.shape for x in g}) == 1]
    gt = None
    if args.reference is not None:
        refs = _references(args.reference)
        if len(refs) != len(groups):
            raise UsageError(f"--reference: {len(refs)} ground-truth files for {len(groups)} conditions")
        gt = [ds.load(r).joints_world() for r, g in zip(refs, groups.values()) if len({x.shape for x in g}) == 1]
    report = metrics.evaluate(generated, real, cfg.values, samples=samples, ground_truth_joints=gt)
    out = _run_dir(args, "eval")
    text = report.format()
    (out / "report.txt").write_text(text, encoding="utf-8")
    cfg.write(out / "config.resolved")
    print(text, end="")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    model, codec, vqvae, conditioning, guidance = _sampling_setup(args, cfg)
    strategy = cfg["sample.strategy"]
    kwargs = _strategy_kwargs(cfg)
    frames = 0
    t0 = time.perf_counter()
    for k in range(args.repeats):
        _, motion = pipeline.run_strategy(model, vqvae, codec, strategy, conditioning[0], P=args.agents,
                                          n_steps=args.token_steps, guidance=guidance, seed=k, **kwargs)
        frames += motion.T
    elapsed = time.perf_counter() - t0
    fps = frames / elapsed
    out = _run_dir(args, "bench")
    h = metrics.config_hash(cfg.values)
    text = (f"strategy={strategy}\nframes={frames}\nseconds={elapsed!r}\nframes_per_second={fps!r}\n"
            f"config_hash={h}\n")
    (out / "bench.txt").write_text(text, encoding="utf-8")
    cfg.write(out / "config.resolved")
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# plotting

def plot_trajectories(motion: ds.MotionSequence, path, reference: ds.MotionSequence | None = None):
    """Top-down (x, z) root trajectories, one line per agent."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    for p in np.flatnonzero(motion.presence):
        xz = motion.root_world.t[:, p][:, [0, 2]]
        line, = ax.plot(xz[:, 0], xz[:, 1], label=f"agent {p + 1}")
        ax.plot(*xz[0], "o", color=line.get_color())
        if reference is not None and p < reference.P:
            ref = reference.root_world.t[:, p][:, [0, 2]]
            ax.plot(ref[:, 0], ref[:, 1], "--", color=line.get_color(), alpha=0.5)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _write_history(path, history):
    keys = sorted({k for h in history for k in h if k != "step"})
    lines = ["step " + " ".join(keys)]
    for h in history:
        lines.append(f"{h['step']} " + " ".join(repr(h[k]) if k in h else "-" for k in keys))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="magnet", description="Multi-agent motion generation with per-token diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", action="append", help="key=value configuration file; repeat to layer overrides")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--name", help="run directory name under the output root")

    p = sub.add_parser("gen-data", help="write synthetic interaction sequences")
    common(p)
    p.add_argument("mode", nargs="?", choices=["orbit", "mirror", "approach_retreat", "ring"])
    p.add_argument("--P", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vqvae", help="train the motion tokenizer")
    common(p)
    p.add_argument("--data", help="directory written by gen-data")
    p.set_defaults(func=cmd_train_vqvae)

    p = sub.add_parser("train-dfot", help="train the diffusion transformer")
    common(p)
    p.add_argument("--data", help="directory written by gen-data")
    p.add_argument("--vqvae", help="tokenizer checkpoint (omit with dfot.raw_features=true)")
    p.set_defaults(func=cmd_train_dfot)

    for name, func, helptext in (("sample", cmd_sample, "generate motion with a sampling strategy"),
                                 ("bench", cmd_bench, "measure generated frames per second")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--dfot", help="DFoT checkpoint")
        p.add_argument("--vqvae", help="tokenizer checkpoint (omit for raw-feature models)")
        p.add_argument("--conditioning", action="append",
                       help="motion file supplying clamped tokens; repeat for several conditions")
        p.add_argument("--strategy", choices=STRATEGY_CHOICES)
        p.add_argument("--guidance", choices=list(sp.GUIDANCE_MODES))
        p.add_argument("--w", type=float, help="guidance weight")
        p.add_argument("--tt-offset", dest="tt_offset", type=float, help="turn-taking offset in [0, 1]")
        p.add_argument("--history", type=int, help="clamped history length in token-steps")
        p.add_argument("--target", type=int, help="generated agent for inpaint/predict")
        p.add_argument("--seed", type=int)
        p.add_argument("--agents", type=int, default=2, help="agents when sampling without conditioning")
        p.add_argument("--token-steps", dest="token_steps", type=int, default=16,
                       help="token-steps when sampling without conditioning")
        if name == "sample":
            p.add_argument("--samples", type=int)
            p.add_argument("--plot", action="store_true", help="write top-down trajectory plots")
        else:
            p.add_argument("--repeats", type=int, default=3)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="compute metrics for generated motion")
    common(p)
    p.add_argument("--generated", help="directory of generated .motion files")
    p.add_argument("--real", help="directory of reference .motion files")
    p.add_argument("--reference", help="ground-truth motion file, or a directory with one file per condition")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"magnet: error: {exc}", file=sys.stderr)
        return 1
    except (MagnetError, OSError) as exc:
        print(f"magnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
