"""Command-line entry point: ``plaindetr <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import costmodel
from .errors import ConfigError, PlainDetrError

log = logging.getLogger("plaindetr")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config handling


def _load_run_config(args, **defaults):
    from .train import RunConfig

    cfg = RunConfig()
    if defaults:
        cfg = cfg.with_overrides(defaults)
    if args.config:
        try:
            cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        over[key] = _parse_value(raw)
    if args.out:
        over["out_dir"] = args.out
    return cfg.with_overrides(over) if over else cfg


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class Arm:
    name: str
    overrides: dict = field(default_factory=dict)


LADDER = [
    Arm("baseline", dict(bias="none", reparam=False, lft=False, mqs=False, hybrid=False)),
    Arm("+boxrpb", dict(bias="decomposed", reparam=False, lft=False, mqs=False, hybrid=False)),
    Arm("+reparam", dict(bias="decomposed", reparam=True, lft=False, mqs=False, hybrid=False)),
    Arm("+lft", dict(bias="decomposed", reparam=True, lft=True, mqs=False, hybrid=False)),
    Arm("+mqs", dict(bias="decomposed", reparam=True, lft=True, mqs=True, hybrid=False)),
    Arm("+hybrid", dict(bias="decomposed", reparam=True, lft=True, mqs=True, hybrid=True)),
]
PRESETS = {
    "core": [
        Arm("none", dict(bias="none")),
        Arm("decomposed", dict(bias="decomposed")),
        Arm("decomposed-noreparam", dict(bias="decomposed", reparam=False)),
    ],
    "ladder": LADDER,
    "bias": [Arm(v, dict(bias=v)) for v in ("none", "naive", "decomposed", "center", "boxmask", "roisample")],
}


@dataclass
class AblationGrid:
    arms: list[Arm]

    @classmethod
    def from_json(cls, data) -> "AblationGrid":
        """Accepts a list of ``{"name", "overrides"}`` or a dict of toggle lists to cross."""
        if isinstance(data, dict):
            keys = sorted(data)
            arms = [Arm("", {})]
            for k in keys:
                arms = [Arm(f"{a.name},{k}={v}".lstrip(","), {**a.overrides, k: v}) for a in arms for v in data[k]]
            return cls(arms)
        if not isinstance(data, list):
            raise ConfigError("ablation grid must be a list of arms or a dict of toggle lists")
        arms = []
        for i, item in enumerate(data):
            if not isinstance(item, dict):
                raise ConfigError(f"arm {i} is not an object")
            arms.append(Arm(str(item.get("name", f"arm{i}")), dict(item.get("overrides", {}))))
        return cls(arms)

    def resolve(self, base):
        """Complete RunConfigs per arm, dropping arms whose config repeats an earlier one."""
        seen = {}
        out = []
        for arm in self.arms:
            cfg = base.with_overrides(arm.overrides)
            key = json.dumps(cfg.to_dict(), sort_keys=True)
            if key in seen:
                log.warning("arm %r duplicates %r; skipped", arm.name, seen[key])
                continue
            seen[key] = arm.name
            out.append((arm, cfg))
        return out


TOGGLES = ("bias", "reparam", "lft", "mqs", "hybrid")


def run_ablation(base, grid: AblationGrid, seeds, out: Path, eval_every: int = 0):
    """Train every arm on every seed; returns summary rows. Failures are recorded, not raised."""
    from .train import attention_focus, train, train_eval_split

    data = train_eval_split(base)
    rows = []
    for arm, cfg in grid.resolve(base):
        per_seed, errors, t0 = [], [], time.perf_counter()
        for s in seeds:
            run_cfg = cfg.with_overrides({"seed": int(s)})
            try:
                res = train(run_cfg, out_dir=out / arm.name.replace("/", "_") / f"seed{s}", data=data,
                            eval_every=eval_every)
                m = dict(res.metrics)
                m["focus"] = attention_focus(res.model, data[1])
                per_seed.append(m)
            except Exception as exc:  # one broken arm must not sink the table
                log.error("arm %s seed %s failed: %s", arm.name, s, exc)
                errors.append(f"seed{s}: {type(exc).__name__}: {exc}")
        row = {"arm": arm.name, **{t: getattr(cfg.pipeline, t) for t in TOGGLES}}
        for key in ("AP", "AP50", "AP75", "focus"):
            vals = [m[key] for m in per_seed]
            row[f"{key}_mean"] = float(np.mean(vals)) if vals else float("nan")
            row[f"{key}_min"] = float(np.min(vals)) if vals else float("nan")
            row[f"{key}_max"] = float(np.max(vals)) if vals else float("nan")
        row["AP50_seeds"] = [m["AP50"] for m in per_seed]
        row["focus_seeds"] = [m["focus"] for m in per_seed]
        row["seconds"] = time.perf_counter() - t0
        row["status"] = "ok" if not errors else "; ".join(errors)
        rows.append(row)
    return rows


def _fmt(row, key):
    m, lo, hi = row[f"{key}_mean"], row[f"{key}_min"], row[f"{key}_max"]
    if np.isnan(m):
        return "n/a"
    return f"{m:.3f} ± {(hi - lo) / 2:.3f}"


def ablation_markdown(rows) -> str:
    head = ["arm", *TOGGLES, "AP", "AP50", "AP75", "focus", "seconds", "status"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [r["arm"], *(str(r[t]) for t in TOGGLES), *(_fmt(r, k) for k in ("AP", "AP50", "AP75", "focus")),
                 f"{r['seconds']:.0f}", r["status"]]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    cols = ["arm", *TOGGLES]
    for k in ("AP", "AP50", "AP75", "focus"):
        cols += [f"{k}_mean", f"{k}_min", f"{k}_max"]
    cols += ["seconds", "status"]
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def monotone_report(rows) -> str:
    vals = [r["AP50_mean"] for r in rows]
    ok = all(b >= a for a, b in zip(vals, vals[1:]))
    return f"monotone AP50 trend across arms: {'yes' if ok else 'no'} ({', '.join(f'{v:.3f}' for v in vals)})"


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    from .synth import SyntheticSpec, export

    spec_kw = {}
    if args.config:
        try:
            spec_kw = json.loads(Path(args.config).read_text()).get("data", {})
        except (OSError, json.JSONDecodeError, AttributeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if args.seed is not None:
        spec_kw["seed"] = args.seed
    try:
        spec = SyntheticSpec(**spec_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if args.n < 0:
        raise ConfigError("--n must be non-negative")
    path = export(spec, args.n, args.out or "data", images=args.images)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import loss_curves
    from .train import train

    cfg = _load_run_config(args)
    out = Path(cfg.out_dir)
    res = train(cfg, out_dir=out, resume=args.resume, eval_every=args.eval_every)
    loss_curves({"train": res.history}, out / "loss.png") if res.history else None
    print(json.dumps({k: res.metrics[k] for k in ("AP", "AP50", "AP75")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import attention_focus, evaluate, load_model, train_eval_split

    cfg = _load_run_config(args)
    model, _ = _load_checkpoint(args.checkpoint, load_model)
    cfg = cfg.with_overrides({f"pipeline.{k}": v for k, v in model.cfg.to_dict().items()})
    _, held = train_eval_split(cfg)
    metrics = evaluate(model, held)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    if args.focus:
        print(f"attention mass inside matched gt: {attention_focus(model, held):.4f}")
    print(json.dumps({k: metrics[k] for k in ("AP", "AP50", "AP75")}))
    return EXIT_OK


def _load_checkpoint(path, loader):
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.json"
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loader(p)


def cmd_ablate(args) -> int:
    from .plotting import ablation_bars

    cfg = _load_run_config(args, **({"epochs": args.epochs} if args.epochs is not None else {}))
    if args.grid:
        try:
            grid = AblationGrid.from_json(json.loads(Path(args.grid).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read grid {args.grid}: {exc}") from exc
    else:
        grid = AblationGrid(list(PRESETS[args.preset]))
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    rows = run_ablation(cfg, grid, seeds, out)
    (out / "ablation.md").write_text(ablation_markdown(rows) + "\n" + monotone_report(rows) + "\n")
    (out / "ablation.csv").write_text(ablation_csv(rows))
    ablation_bars(rows, out / "ablation.png")
    sys.stdout.write(ablation_markdown(rows))
    print(monotone_report(rows))
    return EXIT_OK


def cmd_flops(args) -> int:
    from .plotting import flop_scaling

    if args.shapes:
        try:
            shapes = json.loads(Path(args.shapes).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read shapes {args.shapes}: {exc}") from exc
    else:
        shapes = [costmodel.REFERENCE_SHAPE, costmodel.TOY_SHAPE]
    try:
        text = costmodel.flops_csv(shapes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad shape row: {exc}") from exc
    out = Path(args.out or "flops")
    out.mkdir(parents=True, exist_ok=True)
    (out / "flops.csv").write_text(text)
    if shapes:
        s = shapes[0]
        flop_scaling(s["K"], s["M"], s["h"], [4, 8, 16, 32, 64, 128], out / "flops.png")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_dump_attn(args) -> int:
    from .attention import _inside_mask, dump_attention_maps
    from .plotting import attention_panel
    from .synth import SyntheticSpec, generate
    from .train import load_model, predict

    model, meta = _load_checkpoint(args.checkpoint, load_model)
    cfg = model.cfg
    spec_kw = {"image_size": cfg.image_size, "num_classes": cfg.num_classes}
    if args.seed is not None:
        spec_kw["seed"] = args.seed
    sample = generate(SyntheticSpec(**spec_kw), args.index)
    _, boxes, out = predict(model, sample.image[None], keep_weights=True)
    H, W = cfg.grid
    dest = Path(args.out or "attn")
    files = []
    for li, layer in enumerate(out.main.layers):
        files += dump_attention_maps(layer.weights[0], li, H, W, dest)
    final = out.main.layers[-1].weights[0].mean(axis=0)  # (K, N)
    inside = _inside_mask(boxes[0], H, W).reshape(len(boxes[0]), H * W)
    mass = [float(final[q][inside[q]].sum()) for q in range(len(final))]
    index = {
        "checkpoint": str(args.checkpoint),
        "sample": args.index,
        "grid": [H, W],
        "files": [f"{f}.pgm" for f in files] + [f"{f}.csv" for f in files],
        "maps": files,
        "inside_box_mass": mass,
        "mean_inside_box_mass": float(np.mean(mass)),
    }
    (dest / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    order = np.argsort(-np.array(mass), kind="stable")[:6]
    attention_panel(final[order].reshape(-1, H, W), dest / "attention.png", boxes[0][order],
                    [f"q{q} {mass[q]:.2f}" for q in order])
    print(f"{len(files)} maps, mean inside-box mass {index['mean_inside_box_mass']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="seed (u64)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="plaindetr", description="Toy plain-backbone detection transformer.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--n", type=int, default=512)
    g.add_argument("--images", action="store_true", help="also write PGM images")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train one configuration")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    t.add_argument("--resume", help="checkpoint manifest to continue from")
    t.add_argument("--eval-every", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the held-out split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--focus", action="store_true", help="also report attention mass inside matched boxes")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="train a grid of arms over several seeds")
    a.add_argument("--preset", choices=sorted(PRESETS), default="core")
    a.add_argument("--grid", help="JSON arm list or dict of toggle lists")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--epochs", type=int)
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("flops", parents=[common], help="bias-path cost table")
    f.add_argument("--shapes", help="JSON list of {K,H,W,M,h}")
    f.set_defaults(func=cmd_flops)

    d = sub.add_parser("dump-attn", parents=[common], help="write cross-attention maps for one sample")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--index", type=int, default=0)
    d.set_defaults(func=cmd_dump_attn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, PlainDetrError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
