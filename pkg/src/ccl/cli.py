"""Command-line entry point: ``ccl {generate,train,eval,ablate,plot,translate}``.

Configs are JSON. An experiment file looks like::

    {"data": "runs/bench" | {<benchmark spec>},
     "train": {<TrainConfig fields>},
     "seeds": [0, 1, 2],
     "grid": [[true, true, true], ...],
     "individual": false}

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ConfigError, MultiDomainDataset, NumericalError, load_dataset, save_dataset
from .styletransfer import StyleStats, compute_style, translate
from .synthdata import BenchmarkSpec
from .trainer import (MODES, TrainConfig, evaluate, final_metrics, load_checkpoint, train,
                      with_weights)

log = logging.getLogger("ccl")

# Ablation toggle order (L_cl, L_okd, L_wr); row 8 completes the 2^3 grid.
TABLE_ROWS = [
    (False, False, False),
    (False, True, False),
    (False, False, True),
    (False, True, True),
    (True, True, False),
    (True, False, True),
    (True, True, True),
    (True, False, False),
]


def _read_json(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


@dataclass
class ExperimentSpec:
    data: str | dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    grid: list[tuple[bool, bool, bool]] = field(default_factory=lambda: list(TABLE_ROWS))
    individual: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        unknown = set(d) - {"data", "train", "seeds", "grid", "individual"}
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        grid = [tuple(bool(v) for v in row) for row in d.get("grid", TABLE_ROWS)]
        if not grid or any(len(row) != 3 for row in grid):
            raise ConfigError("grid must be a non-empty list of [cl, okd, wr] toggles")
        if len(set(grid)) != len(grid):
            raise ConfigError("grid entries must be unique")
        seeds = [int(s) for s in d.get("seeds", [0, 1, 2])]
        if not seeds:
            raise ConfigError("seeds must be non-empty")
        return cls(d.get("data", {}), TrainConfig.from_dict(d.get("train", {})), seeds, grid,
                   bool(d.get("individual", False)))

    def dataset(self) -> MultiDomainDataset:
        if isinstance(self.data, str):
            return load_dataset(self.data)
        return BenchmarkSpec.from_dict(self.data).generate()


# ------------------------------------------------------------------ commands

def cmd_generate(args) -> int:
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    spec = BenchmarkSpec.from_dict(d)
    ds = spec.generate()
    out = Path(args.out)
    save_dataset(ds, out)
    print(f"wrote {out}: M={ds.M}, C={ds.num_classes}, size={ds.image_size[0]}x{ds.image_size[1]}, "
          f"source={len(ds.source)}, targets={[len(t) for t in ds.targets]}, "
          f"eval={[len(e) for e in ds.eval_splits]}, seed={spec.seed}")
    return 0


def _train_config(spec: ExperimentSpec, args) -> TrainConfig:
    cfg = spec.train
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.mode is not None:
        cfg = replace(cfg, mode=args.mode)
    return cfg


def cmd_train(args) -> int:
    spec = ExperimentSpec.from_dict(_read_json(args.config))
    config = _train_config(spec, args)
    ds = spec.dataset()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log_path = out / "checkpoint.npz", out / "losses.jsonl"
    state = None
    if args.resume and ckpt.exists():
        state, saved = load_checkpoint(ckpt, ds.num_classes)
        if saved != config:
            raise ConfigError("checkpoint was written with a different config")
        _truncate_log(log_path, state.step)
    else:
        log_path.unlink(missing_ok=True)
    _write_json(out / "config.json", config.to_dict())
    state, history = train(ds, config, state=state, log_path=log_path, checkpoint_path=ckpt,
                           checkpoint_every=args.checkpoint_every or config.iterations)
    with open(out / "evals.jsonl", "w") as f:
        for r in history["evals"]:
            f.write(json.dumps(r) + "\n")
    metrics = final_metrics(history)
    _write_json(out / "metrics.json", metrics)
    for r in metrics:
        print(f"{r['role']:>10} target {r['domain_id']}: mIoU {r['miou']:.4f}")
    return 0


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if json.loads(line)["step"] < step]
    path.write_text("".join(line + "\n" for line in keep))


def cmd_eval(args) -> int:
    spec = ExperimentSpec.from_dict(_read_json(args.config))
    ds = spec.dataset()
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "checkpoint.npz"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    state, config = load_checkpoint(ckpt, ds.num_classes)
    reports = evaluate(state, ds, args.mode or config.mode)
    _write_json(Path(args.out) / "eval.json", reports)
    for r in reports:
        print(json.dumps(r))
    return 0


# ------------------------------------------------------------------ ablation

def _row_label(row) -> str:
    if row == "individual":
        return "Individual"
    return str(TABLE_ROWS.index(row) + 1) if row in TABLE_ROWS else "-"


def _row_config(base: TrainConfig, row, seed: int) -> TrainConfig:
    if row == "individual":
        return replace(base, mode="individual", seed=seed)
    cl, okd, wr = row
    w = base.weights
    return replace(with_weights(base, lambda_cl=w.lambda_cl if cl else 0.0,
                                lambda_okd=w.lambda_okd if okd else 0.0,
                                lambda_wr=w.lambda_wr if wr else 0.0),
                   mode="ccl", seed=seed)


def _run_one(ds: MultiDomainDataset, config: TrainConfig) -> dict[int, float]:
    """Final mIoU per target of the deployable model(s) of one run."""
    _, history = train(ds, replace(config, eval_every=0))
    individual = config.mode == "individual"
    return {r["domain_id"]: r["miou"] for r in final_metrics(history)
            if r["role"] == (f"expert_{r['domain_id']}" if individual else "student")}


def _summary(values: list[float]) -> dict:
    return {"mean": statistics.fmean(values), "sd": statistics.stdev(values) if len(values) > 1 else 0.0}


def run_ablation(spec: ExperimentSpec, ds: MultiDomainDataset, jobs: int = 1) -> dict:
    """Every (row, seed) run on one shared dataset; returns the machine-readable table."""
    base = spec.train
    rows = list(spec.grid) + (["individual"] if spec.individual else [])
    configs = [(row, seed, _row_config(base, row, seed)) for row in rows for seed in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_one, [ds] * len(configs), [c for _, _, c in configs]))
    else:
        results = [_run_one(ds, c) for _, _, c in configs]
    table = []
    for row in rows:
        runs = [(seed, res) for (r, seed, _), res in zip(configs, results) if r == row]
        per_target = {}
        for m in range(1, ds.M + 1):
            values = [res[m] for _, res in runs]
            per_target[str(m)] = {"per_seed": values, **_summary(values)}
        entry = {"model": _row_label(row), "runs": len(runs), "miou": per_target}
        if row != "individual":
            entry.update(L_cl=row[0], L_okd=row[1], L_wr=row[2])
        table.append(entry)
    return {"seeds": spec.seeds, "train": base.to_dict(), "rows": table}


def format_table(result: dict) -> str:
    rows = result["rows"]
    targets = list(rows[0]["miou"])
    header = ["Model #", "L_cl", "L_okd", "L_wr"] + [f"target {m}" for m in targets]
    lines = []
    for r in rows:
        marks = ["x" if r.get(k) else "" for k in ("L_cl", "L_okd", "L_wr")]
        cells = [f"{100 * r['miou'][m]['mean']:.1f} ± {100 * r['miou'][m]['sd']:.1f}" for m in targets]
        lines.append([r["model"], *marks, *cells])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *lines)]
    fmt = lambda cells: "  ".join(str(c).center(w) for c, w in zip(cells, widths))
    out = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(line) for line in lines]
    return "\n".join(out) + "\n"


def cmd_ablate(args) -> int:
    spec = ExperimentSpec.from_dict(_read_json(args.config))
    if args.seed is not None:
        spec = replace(spec, seeds=[args.seed])
    ds = spec.dataset()
    result = run_ablation(spec, ds, jobs=args.jobs)
    out = Path(args.out)
    _write_json(out / "ablation.json", result)
    text = format_table(result)
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return 0


# ------------------------------------------------------------------ plotting

def read_loss_log(path: Path) -> dict[str, list[tuple[int, float]]]:
    curves: dict[str, list[tuple[int, float]]] = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                curves.setdefault(rec["term_name"], []).append((rec["step"], rec["value"]))
    return curves


def plot_run(run_dir: str | Path, out_dir: str | Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir, out_dir = Path(run_dir), Path(out_dir)
    curves = read_loss_log(run_dir / "losses.jsonl")
    if not curves:
        raise ConfigError(f"no loss records in {run_dir / 'losses.jsonl'}")
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(curves)
    cols = min(4, n)
    fig, axes = plt.subplots(math.ceil(n / cols), cols, figsize=(4 * cols, 3 * math.ceil(n / cols)), squeeze=False)
    for ax, (name, pts) in zip(axes.flat, sorted(curves.items())):
        steps, values = zip(*pts)
        ax.plot(steps, values, lw=0.8)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("step")
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    fig.tight_layout()
    written = [out_dir / "loss_curves.png"]
    fig.savefig(written[0], dpi=100)
    plt.close(fig)

    evals_path = run_dir / "evals.jsonl"
    if evals_path.exists():
        evals = [json.loads(x) for x in evals_path.read_text().splitlines() if x.strip()]
        series: dict[str, list[tuple[int, float]]] = {}
        for r in evals:
            series.setdefault(f"{r.get('role', 'model')} @ target {r['domain_id']}", []).append((r["step"], r["miou"]))
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, pts in sorted(series.items()):
            steps, values = zip(*pts)
            ax.plot(steps, values, marker="o", ms=3, label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("mIoU")
        ax.legend(fontsize=8)
        fig.tight_layout()
        written.append(out_dir / "miou_curves.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    return written


def cmd_plot(args) -> int:
    for p in plot_run(args.run, args.out):
        print(f"wrote {p}")
    return 0


# ------------------------------------------------------------------ translate

def _load_image(path: str) -> np.ndarray:
    try:
        return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError as e:
        raise ConfigError(f"image not found: {path}") from e


def cmd_translate(args) -> int:
    image = _load_image(args.image)
    try:
        src = StyleStats.load(args.source_stats) if args.source_stats else compute_style([image])
        tgt = StyleStats.load(args.target_stats)
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read style stats: {e}") from e
    out = translate(image, src, tgt)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(out * 255).astype(np.uint8)).save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_stats(args) -> int:
    images = [_load_image(str(p)) for p in sorted(Path(args.images).glob("*.png"))]
    if not images:
        raise ConfigError(f"no PNG images in {args.images}")
    compute_style(images).save(args.out)
    print(f"wrote {args.out}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccl", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic multi-domain benchmark")
    g.add_argument("--config", help="benchmark spec JSON (defaults if omitted)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", help="experiment JSON")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on every eval split")
    e.add_argument("--config", help="experiment JSON (for the dataset)")
    e.add_argument("--checkpoint")
    e.add_argument("--mode", choices=MODES)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the loss-toggle grid over seeds")
    a.add_argument("--config", help="experiment JSON")
    a.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    a.add_argument("--out", required=True)
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="plot loss and mIoU curves of a training run")
    pl.add_argument("run", help="directory written by 'ccl train'")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    tr = sub.add_parser("translate", help="restyle an image to target LAB statistics")
    tr.add_argument("--image", required=True)
    tr.add_argument("--source-stats", help="stats JSON (computed from the image if omitted)")
    tr.add_argument("--target-stats", required=True)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_translate)

    s = sub.add_parser("stats", help="compute LAB style statistics of a directory of PNGs")
    s.add_argument("images")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
