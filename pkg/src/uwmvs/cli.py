"""Command-line entry point: ``uwmvs synth|depth|train|render|restore|eval``.

Every command writes ``run_config.json`` (the fully resolved configuration,
including the seed) next to its outputs.  A run can be repeated with
``--config <dir>/run_config.json``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .costvolume import CascadeConfig
from .exceptions import DomainError, NumericalError, ParseError
from .geometry import ray_directions
from .imaging import (
    central_crop_eval_region,
    load_dataset,
    psnr,
    read_image,
    ssim,
    viewpoint_from_dict,
    write_depth,
    write_image,
)
from .losses import LossConfig
from .medium import SH_LEVEL, restore_pixel
from .synthetic import SceneSpec, SpecError, generate_dataset
from .training import ModelWeights, SceneContext, TrainConfig, render_novel_view, train_scene

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "model.ckpt"


class ConfigError(DomainError):
    pass


# -- run configuration ------------------------------------------------------------
@dataclass
class CascadeSection:
    planes: tuple = (16, 8)
    lambda_confidence: float = 1.5
    temperature: float = 10.0
    occlusion_subsets: bool = True
    n_sources: int = 4


@dataclass
class MediumSection:
    sh_level: int = SH_LEVEL
    eq19_compat: bool = False
    use_medium: bool = True


@dataclass
class TrainSection:
    iterations: int = 3000
    lr: float = 5e-3
    lr_final: float = 1e-4
    view_counts: tuple = (2, 3, 4)
    view_probs: tuple = (0.1, 0.8, 0.1)
    patch_size: int = 32
    source_pool: int = 4


@dataclass
class LossSection:
    lambda_loss: float = 0.2
    epsilon: float = 1e-3
    use_l1_variant: bool = False


@dataclass
class RunConfig:
    manifest: str | None = None
    output: str | None = None
    seed: int = 0
    cascade: CascadeSection = field(default_factory=CascadeSection)
    medium: MediumSection = field(default_factory=MediumSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {"cascade": CascadeSection, "medium": MediumSection, "train": TrainSection, "loss": LossSection}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        kw = {}
        for k, v in d.items():
            if k in sections:
                kw[k] = _section(sections[k], v, k)
            else:
                kw[k] = v
        return cls(**kw)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def cascade_config(self, near, far) -> CascadeConfig:
        c = self.cascade
        return CascadeConfig(
            near,
            far,
            planes=tuple(c.planes),
            lambda_confidence=c.lambda_confidence,
            temperature=c.temperature,
            occlusion_subsets=c.occlusion_subsets,
        )

    def train_config(self) -> TrainConfig:
        t, m = self.train, self.medium
        return TrainConfig(
            iterations=t.iterations,
            lr=t.lr,
            lr_final=t.lr_final,
            view_counts=tuple(t.view_counts),
            view_probs=tuple(t.view_probs),
            patch_size=t.patch_size,
            source_pool=t.source_pool,
            seed=self.seed,
            use_medium=m.use_medium,
            sh_level=m.sh_level,
            eq19_compat=m.eq19_compat,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(**asdict(self.loss))

    def validate(self):
        self.train_config()
        self.loss_config()
        self.cascade_config(1.0, 2.0)
        if self.cascade.n_sources < 2:
            raise ConfigError("cascade.n_sources must be >= 2")


def _section(kind, d, name):
    if not isinstance(d, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    known = {f.name for f in fields(kind)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown field(s) in '{name}': {', '.join(sorted(unknown))}")
    try:
        return kind(**d)
    except TypeError as exc:
        raise ConfigError(f"bad '{name}' section: {exc}") from None


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return RunConfig.from_dict(doc)


def _int_list(text: str, name: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"--{name} expects comma-separated integers, got {text!r}") from None


def resolve_config(args) -> RunConfig:
    """Config file (if any) overridden by explicit command-line flags."""
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = [
        ("manifest", None, "manifest"),
        ("out", None, "output"),
        ("seed", None, "seed"),
        ("planes", "cascade", "planes"),
        ("lambda_confidence", "cascade", "lambda_confidence"),
        ("temperature", "cascade", "temperature"),
        ("n_sources", "cascade", "n_sources"),
        ("sh_level", "medium", "sh_level"),
        ("iterations", "train", "iterations"),
        ("lr", "train", "lr"),
        ("lr_final", "train", "lr_final"),
        ("patch_size", "train", "patch_size"),
        ("lambda_loss", "loss", "lambda_loss"),
    ]
    for arg, section, name in over:
        val = getattr(args, arg, None)
        if val is None:
            continue
        if arg == "planes":
            val = _int_list(val, "planes")
        if arg in ("manifest", "out"):
            val = str(val)
        setattr(getattr(cfg, section) if section else cfg, name, val)
    if getattr(args, "no_medium", False):
        cfg.medium.use_medium = False
    if getattr(args, "eq19_compat", False):
        cfg.medium.eq19_compat = True
    if getattr(args, "l1", False):
        cfg.loss.use_l1_variant = True
    cfg.validate()
    return cfg


def _write_run_record(out: Path, command: str, cfg: RunConfig, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    meta = {"command": command, "version": __version__, "seed": cfg.seed, "numpy": np.__version__}
    meta.update(extra or {})
    (out / "run_metadata.json").write_text(json.dumps(_plain(meta), indent=2, sort_keys=True) + "\n")


def _need(cfg: RunConfig, *names):
    for n in names:
        if not getattr(cfg, n):
            raise ConfigError(f"--{'out' if n == 'output' else n} is required")


def _load_scene(cfg: RunConfig):
    ds = load_dataset(cfg.manifest)
    ctx = SceneContext.from_dataset(ds, cfg.cascade_config(ds.near, ds.far))
    return ds, ctx


def _targets(spec: str, ds) -> list[int]:
    if spec == "heldout":
        return list(ds.heldout_indices)
    if spec == "all":
        return list(range(len(ds)))
    idx = list(_int_list(spec, "target"))
    for i in idx:
        if not 0 <= i < len(ds):
            raise ConfigError(f"target index {i} out of range [0, {len(ds)})")
    if not idx:
        raise ConfigError("no target views given")
    return idx


# -- commands ----------------------------------------------------------------------
def cmd_synth(args) -> int:
    spec = SceneSpec.load(args.spec) if args.spec else SceneSpec()
    if args.seed is not None:
        spec.seed = int(args.seed)
        spec.validate()
    out = Path(args.out)
    ds = generate_dataset(spec, out)
    print(f"wrote {len(ds)} views to {out} (depth range {ds.near:.3f}-{ds.far:.3f})")
    return EXIT_OK


def cmd_depth(args) -> int:
    cfg = resolve_config(args)
    _need(cfg, "manifest", "output")
    ds, ctx = _load_scene(cfg)
    t = args.target
    if not 0 <= t < len(ds):
        raise ConfigError(f"target index {t} out of range [0, {len(ds)})")
    if args.sources:
        sources = list(_int_list(args.sources, "sources"))
        if t in sources or any(not 0 <= s < len(ds) for s in sources):
            raise ConfigError("source indices must be valid views other than the target")
    else:
        sources = [i for i in range(len(ds)) if i != t]
        sources.sort(key=lambda i: float(np.linalg.norm(ds.viewpoints[i].pose.center - ds.viewpoints[t].pose.center)))
        sources = sorted(sources[: cfg.cascade.n_sources])
    if len(sources) < 2:
        raise ConfigError("depth needs at least two source views besides the target")
    entry = ctx.depth(ds.viewpoints[t], sources, key=("view", t))
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    dm = entry.depth_map
    write_depth(out / "depth.pfm", dm.depth, dm.valid)
    write_depth(out / "sigma.pfm", dm.sigma, dm.valid)
    _write_run_record(out, "depth", cfg, {"target": t, "sources": sources, "planes": list(cfg.cascade.planes)})
    d = dm.depth[dm.valid]
    if d.size:
        print(f"depth min {d.min():.4f} max {d.max():.4f} median {np.median(d):.4f} ({d.size} valid pixels)")
    else:
        print("no valid depth pixels")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _need(cfg, "manifest", "output")
    ds, ctx = _load_scene(cfg)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    every = max(1, cfg.train.iterations // 20)

    def progress(it, parts):
        if not args.quiet and (it % every == 0 or it == cfg.train.iterations - 1):
            print(f"iter {it:5d}  total {parts['total']:.5f}  recon {parts['recon']:.5f}  dssim {parts['dssim']:.5f}")

    result = train_scene(ds, cfg.train_config(), cfg.loss_config(), context=ctx, callback=progress)
    result.weights.save(out / CHECKPOINT_NAME, {"run_config": cfg.to_dict()})
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "recon", "dssim", "total"])
        for r in result.trace:
            w.writerow([r["iteration"], repr(r["recon"]), repr(r["dssim"]), repr(r["total"])])
    _write_run_record(out, "train", cfg, {"planes": list(cfg.cascade.planes)})
    print(f"trained {cfg.train.iterations} iterations in {time.perf_counter() - t0:.1f} s -> {out / CHECKPOINT_NAME}")
    return EXIT_OK


def _model_and_config(args) -> tuple[ModelWeights, RunConfig]:
    model, meta = ModelWeights.load(args.checkpoint)
    stored = meta.get("run_config")
    base = RunConfig.from_dict(stored) if stored else RunConfig()
    if args.config:
        base = load_run_config(args.config)
    for arg, attr in (("manifest", "manifest"), ("out", "output")):
        if getattr(args, arg, None):
            setattr(base, attr, str(getattr(args, arg)))
    if getattr(args, "planes", None):
        base.cascade.planes = _int_list(args.planes, "planes")
    base.validate()
    return model, base


def cmd_render(args) -> int:
    model, cfg = _model_and_config(args)
    _need(cfg, "manifest", "output")
    ds, ctx = _load_scene(cfg)
    out = Path(cfg.output)
    jobs = []
    if args.pose:
        try:
            rec = json.loads(Path(args.pose).read_text())
            vp = viewpoint_from_dict(rec)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad pose file: {exc}") from None
        jobs.append(("novel", vp, None, ()))
    else:
        for i in _targets(args.target, ds):
            jobs.append((ds.names[i], ds.viewpoints[i], ("view", i), (i,)))
    for name, vp, key, exclude in jobs:
        r = render_novel_view(model, ctx, vp, exclude=exclude, key=key)
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        write_image(d / "underwater.png", np.clip(r.underwater, 0, 1))
        write_image(d / "clear.png", np.clip(r.clear, 0, 1))
        write_image(d / "atten.png", np.clip(r.i_atten, 0, 1))
        write_image(d / "backscatter.png", np.clip(r.i_bs, 0, 1))
        write_depth(d / "depth.pfm", r.depth.depth, r.depth.valid)
        print(f"{name}: rendered from sources {r.sources}")
    _write_run_record(out, "render", cfg, {"checkpoint": str(args.checkpoint), "views": [j[0] for j in jobs]})
    return EXIT_OK


def cmd_restore(args) -> int:
    model, cfg = _model_and_config(args)
    _need(cfg, "manifest", "output")
    if not model.use_medium:
        raise ConfigError("the checkpoint was trained without the medium subnet; nothing to restore")
    ds, ctx = _load_scene(cfg)
    out = Path(cfg.output)
    for i in _targets(args.view, ds):
        vp = ds.viewpoints[i]
        sources = ctx.nearest_sources(vp, cfg.cascade.n_sources, exclude=(i,))
        entry = ctx.depth(vp, sources, key=("view", i))
        params = model.medium_params(ray_directions(vp))
        res = restore_pixel(ds.images[i].astype(np.float64), params, entry.depth[..., None])
        d = out / ds.names[i]
        d.mkdir(parents=True, exist_ok=True)
        write_image(d / "restored.png", res.clear)
        n_ill = int(np.count_nonzero(res.ill_conditioned))
        print(f"{ds.names[i]}: restored ({n_ill} ill-conditioned pixel channels)")
    _write_run_record(out, "restore", cfg, {"checkpoint": str(args.checkpoint), "views": args.view})
    return EXIT_OK


def evaluate_pairs(pairs) -> list[dict]:
    """PSNR/SSIM on the central 80% of each ``(name, prediction, truth)``."""
    rows = []
    for name, pred, truth in pairs:
        if pred.shape != truth.shape:
            raise DomainError(f"{name}: prediction {pred.shape} vs truth {truth.shape}")
        a, b = central_crop_eval_region(pred), central_crop_eval_region(truth)
        rows.append({"view": name, "psnr": psnr(a, b), "ssim": ssim(a, b)})
    if rows:
        rows.append(
            {
                "view": "mean",
                "psnr": float(np.mean([r["psnr"] for r in rows])),
                "ssim": float(np.mean([r["ssim"] for r in rows])),
            }
        )
    return rows


def cmd_eval(args) -> int:
    ds = load_dataset(args.manifest)
    renders = Path(args.renders)
    views = _targets(args.views, ds)
    pairs = []
    for i in views:
        name = ds.names[i]
        if args.kind == "clear":
            truth = ds.clear[i] if ds.clear else None
            if truth is None:
                raise ConfigError(f"{name} has no ground-truth clear image")
        else:
            truth = ds.images[i]
        pred = read_image(renders / name / f"{args.kind}.png")
        pairs.append((name, pred, truth))
    rows = evaluate_pairs(pairs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "psnr", "ssim"])
        for r in rows:
            w.writerow([r["view"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}"])
    for r in rows:
        print(f"{r['view']:>12s}  PSNR {r['psnr']:8.3f} dB  SSIM {r['ssim']:.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uwmvs", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"uwmvs {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads (1 = fully deterministic)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, train=False):
        sp.add_argument("--config", help="JSON run configuration; flags override it")
        sp.add_argument("--manifest", help="dataset manifest.json")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--planes", help="coarse,fine plane counts (default 16,8)")
        sp.add_argument("--lambda-confidence", dest="lambda_confidence", type=float)
        sp.add_argument("--temperature", type=float)
        sp.add_argument("--n-sources", dest="n_sources", type=int)
        if train:
            sp.add_argument("--iterations", type=int)
            sp.add_argument("--lr", type=float)
            sp.add_argument("--lr-final", dest="lr_final", type=float)
            sp.add_argument("--patch-size", dest="patch_size", type=int)
            sp.add_argument("--lambda-loss", dest="lambda_loss", type=float)
            sp.add_argument("--sh-level", dest="sh_level", type=int)
            sp.add_argument("--no-medium", dest="no_medium", action="store_true", help="ablation: identity medium")
            sp.add_argument("--eq19-compat", dest="eq19_compat", action="store_true")
            sp.add_argument("--l1", action="store_true", help="L1 + D-SSIM loss variant")
            sp.add_argument("--quiet", action="store_true")

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--spec", help="scene spec JSON (default scene if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("depth", help="cascade depth for one view")
    common(s)
    s.add_argument("--target", type=int, required=True)
    s.add_argument("--sources", help="comma-separated source view indices")
    s.set_defaults(func=cmd_depth)

    s = sub.add_parser("train", help="fit the medium subnet and colour MLP")
    common(s, train=True)
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("render", cmd_render, "render views from a checkpoint"), ("restore", cmd_restore, "remove the medium from input views")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--config")
        s.add_argument("--manifest")
        s.add_argument("--out")
        s.add_argument("--planes")
        if name == "render":
            g = s.add_mutually_exclusive_group()
            g.add_argument("--target", default="heldout", help="view indices, 'heldout' or 'all'")
            g.add_argument("--pose", help="JSON viewpoint record for a novel camera")
        else:
            s.add_argument("--view", default="all", help="view indices, 'heldout' or 'all'")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="PSNR/SSIM of renders against ground truth")
    s.add_argument("--manifest", required=True)
    s.add_argument("--renders", required=True, help="directory written by 'render'")
    s.add_argument("--views", default="heldout")
    s.add_argument("--kind", choices=("underwater", "clear"), default="underwater")
    s.add_argument("--out", required=True, help="CSV path")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (ConfigError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
