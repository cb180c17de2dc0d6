"""Experiment command line.

Subcommands cover the full study suite at desk scale:

* ``generate``: synthetic dataset splits plus a statistics table
* ``train``: multi-seed training with traces, checkpoints, summary
* ``eval``: score a checkpoint on one split
* ``ablate-agg``: aggregation grid, mean / max / attention
* ``ablate-impute``: imputation grid, none / ffill / mean / interpolation
* ``ablate-concat``: head-input grid, both / global / local
* ``drop-study``: performance vs fraction of dropped observations
* ``scale-study``: performance vs training-set prefix size
* ``importance``: per-sensor attention importance vs sampling rate
* ``bench``: backend comparison and epoch-scaling report

Config precedence is flags > ``--config`` JSON file > built-in defaults.
Grid commands run their (variant, seed) cells in parallel when the
``SLAN_THREADS`` environment variable is above 1; results are identical
either way.  Every command is deterministic given seed, config, and data,
except ``bench`` whose output is wall-clock timings.
"""

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import data, kernels, model, svg, training

DEFAULT_SEEDS = "2024,2025,2026"
IMPUTE_VARIANTS = ("none",) + data.IMPUTE_MODES
DROP_FRACTIONS = "0,0.25,0.5,0.75"
SCALE_FRACTIONS = "0.25,0.5,0.75,1.0"

TRAIN_DEFAULTS = {
    "epochs": 20,
    "patience": 5,
    "lr": 5e-4,
    "batch": 16,
    "hidden": 64,
    "t2v_dim": 16,
    "agg": "mean",
    "impute": "none",
    "concat": "both",
    "init": "zeros",
    "clip": None,
    "drop": 0.0,
    "workers": 1,
}

# two-sided 95% Student-t critical values by degrees of freedom;
# the normal value is close enough past df = 10
_T95 = {1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571,
        6: 2.447, 7: 2.365, 8: 2.306, 9: 2.262, 10: 2.228}
_Z95 = 1.960

SUMMARY_HEADER = ("variant", "seeds", "auroc_mean", "auroc_std",
                  "auprc_mean", "auprc_std", "auroc", "auprc")
TRACE_HEADER = ("epoch", "train_loss", "val_auprc", "val_auroc", "lr", "seconds")


class CliError(Exception):
    """Usage-level failure carrying its exit code."""

    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Small shared helpers.

def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    """Re-parse a CSV this tool wrote: header plus one dict per row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"empty csv: {path}") from None
        rows = [dict(zip(header, row)) for row in reader]
    return header, rows


def _print_table(header, rows) -> None:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    for k, row in enumerate(cells):
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
        if k == 0:
            print("  ".join("-" * w for w in widths))


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def _ci95(std: float, k: int) -> float:
    if k < 2:
        return 0.0
    return _T95.get(k - 1, _Z95) * std / math.sqrt(k)


def _pm(mean: float, spread: float) -> str:
    """Report-table convention: values x100, two decimals."""
    return f"{100.0 * mean:.2f} ± {100.0 * spread:.2f}"


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise CliError(2, f"bad --seeds value: {text!r}") from None
    if not seeds:
        raise CliError(2, "at least one seed is required")
    return seeds


def _parse_fractions(text: str, lo: float = 0.0, hi: float = 1.0) -> list[float]:
    try:
        fracs = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise CliError(2, f"bad fractions value: {text!r}") from None
    if not fracs or any(not lo <= f <= hi for f in fracs):
        raise CliError(2, f"fractions must lie in [{lo}, {hi}]: {text!r}")
    return fracs


def _resolve(args) -> dict:
    """Effective run config: flags > config file > built-in defaults."""
    cfg = dict(TRAIN_DEFAULTS)
    path = getattr(args, "config", None)
    if path:
        if not os.path.exists(path):
            raise CliError(2, f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(2, f"config file {path} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise CliError(2, f"config file {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise CliError(2, f"unknown config keys in {path}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in TRAIN_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    if cfg["agg"] not in model.AGGREGATIONS:
        raise CliError(2, f"agg must be one of {model.AGGREGATIONS}, got {cfg['agg']!r}")
    if cfg["impute"] not in IMPUTE_VARIANTS:
        raise CliError(2, f"impute must be one of {IMPUTE_VARIANTS}, got {cfg['impute']!r}")
    if cfg["concat"] not in model.CONCATS:
        raise CliError(2, f"concat must be one of {model.CONCATS}, got {cfg['concat']!r}")
    if cfg["init"] not in model.STATE_INITS:
        raise CliError(2, f"init must be one of {model.STATE_INITS}, got {cfg['init']!r}")
    if not 0.0 <= float(cfg["drop"]) < 1.0:
        raise CliError(2, f"drop must be in [0, 1), got {cfg['drop']}")
    return cfg


def _load_splits(data_dir) -> tuple[data.Dataset, data.Dataset, data.Dataset]:
    if not os.path.isdir(data_dir):
        raise CliError(2, f"data directory not found: {data_dir}")
    try:
        return data.load_split_dir(data_dir)
    except FileNotFoundError as exc:
        raise CliError(2, str(exc)) from None


def _grid(cells, fn):
    """Run one callable per cell, optionally on SLAN_THREADS threads.

    Cells are independent; results are collected in the given cell order so
    thread count never changes any output.  Per-cell exceptions become
    (cell, message) failure records instead of aborting the whole grid.
    """
    threads = int(os.environ.get("SLAN_THREADS", "1") or "1")
    done, failures = {}, []
    if threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(cells))) as pool:
            futures = {cell: pool.submit(fn, cell) for cell in cells}
            for cell in cells:
                try:
                    done[cell] = futures[cell].result()
                except Exception as exc:
                    failures.append((cell, str(exc)))
    else:
        for cell in cells:
            try:
                done[cell] = fn(cell)
            except Exception as exc:
                failures.append((cell, str(exc)))
    return done, failures


def _report_failures(failures) -> int:
    if not failures:
        return 0
    print(f"{len(failures)} run(s) failed:", file=sys.stderr)
    for cell, message in failures:
        print(f"  FAILED {cell}: {message}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# One training run: shared pipeline for train/ablate/drop/scale commands.

def _single_run(splits, cfg: dict, seed: int, *, drop: float = 0.0,
                drop_seed: int | None = None, impute_mode: str | None = None,
                prefix: float = 1.0):
    train_ds, val_ds, test_ds = splits
    if drop > 0.0:
        base = drop_seed if drop_seed is not None else seed
        train_ds, _ = data.drop_dataset(train_ds, drop, base)
        val_ds, _ = data.drop_dataset(val_ds, drop, base + 1)
        test_ds, _ = data.drop_dataset(test_ds, drop, base + 2)
    if prefix < 1.0:
        keep = max(1, int(round(prefix * len(train_ds))))
        train_ds = data.Dataset(train_ds.instances[:keep], train_ds.sensor_count,
                                train_ds.static_count, train_ds.sensor_names)
    mode = impute_mode if impute_mode is not None else cfg["impute"]
    if mode != "none":
        meta_raw = data.compute_meta(train_ds)
        train_ds = data.impute_dataset(train_ds, mode, meta_raw)
        val_ds = data.impute_dataset(val_ds, mode, meta_raw)
        test_ds = data.impute_dataset(test_ds, mode, meta_raw)

    model_cfg = model.ModelConfig(
        sensor_count=train_ds.sensor_count, hidden=cfg["hidden"],
        t2v_dim=cfg["t2v_dim"], static_count=train_ds.static_count,
        aggregation=cfg["agg"], concat=cfg["concat"], state_init=cfg["init"],
        seed=seed)
    train_cfg = training.TrainConfig(
        epochs=cfg["epochs"], patience=cfg["patience"], lr=cfg["lr"],
        batch_size=cfg["batch"],
        clip_norm=None if cfg["clip"] in (None, 0) else float(cfg["clip"]),
        seed=seed, workers=cfg["workers"])
    result = training.train(train_ds, val_ds, model_cfg, train_cfg)
    report = training.evaluate(result.params, test_ds, result.meta)
    return result, report


def _write_trace(path, trace) -> None:
    rows = [(e.epoch, f"{e.train_loss:.6f}", f"{e.val_auprc:.6f}",
             f"{e.val_auroc:.6f}", f"{e.lr:.8g}", f"{e.seconds:.3f}")
            for e in trace]
    _write_csv(path, TRACE_HEADER, rows)


def _save_checkpoint(path, result, report, seed: int) -> None:
    meta = result.meta
    arrays = {"mean": meta.mean, "std": meta.std,
              "static_mean": meta.static_mean, "static_std": meta.static_std,
              "class_counts": meta.class_counts}
    extra = {"seed": seed, "best_epoch": result.best_epoch,
             "best_val_auprc": result.best_val_auprc,
             "test_auroc": report.auroc, "test_auprc": report.auprc}
    result.params.save(path, arrays, extra)


def _load_checkpoint(path):
    if not os.path.exists(path):
        raise CliError(2, f"checkpoint not found: {path}")
    params, arrays, extra = model.SlanParams.load(path)
    meta = None
    if "mean" in arrays:
        meta = data.DatasetMeta(
            params.config.sensor_count, params.config.static_count,
            arrays["mean"], arrays["std"], arrays["static_mean"],
            arrays["static_std"], arrays["class_counts"].astype(np.int64))
    return params, meta, extra


def _variant_summary(variants, per_variant) -> list[tuple]:
    """One mean-over-seeds row per variant, report-table formatting."""
    rows = []
    for variant in variants:
        pairs = per_variant.get(variant, [])
        if not pairs:
            continue
        aurocs = [a for a, _ in pairs]
        auprcs = [p for _, p in pairs]
        am, asd = _mean_std(aurocs)
        pm, psd = _mean_std(auprcs)
        rows.append((variant, len(pairs),
                     f"{100 * am:.2f}", f"{100 * asd:.2f}",
                     f"{100 * pm:.2f}", f"{100 * psd:.2f}",
                     _pm(am, asd), _pm(pm, psd)))
    return rows


def _train_grid(args, variants, apply_variant, out_dir):
    """Shared driver for train and the three ablate commands.

    ``apply_variant(cfg, variant) -> (cfg2, impute_mode)`` specializes the
    run config per variant; per-run files land in ``out_dir/<variant>/``
    when there is more than one variant.
    """
    cfg = _resolve(args)
    seeds = _parse_seeds(args.seeds)
    splits = _load_splits(args.data)
    os.makedirs(out_dir, exist_ok=True)

    cells = [(variant, seed) for variant in variants for seed in seeds]

    def run(cell):
        variant, seed = cell
        cfg2, impute_mode = apply_variant(dict(cfg), variant)
        drop = float(cfg2["drop"])
        return _single_run(splits, cfg2, seed, drop=drop,
                           drop_seed=seed * 7919, impute_mode=impute_mode)

    done, failures = _grid(cells, run)

    run_rows = []
    per_variant: dict[str, list[tuple[float, float]]] = {}
    for variant in variants:
        vdir = out_dir if len(variants) == 1 else os.path.join(out_dir, variant)
        os.makedirs(vdir, exist_ok=True)
        for seed in seeds:
            if (variant, seed) not in done:
                continue
            result, report = done[(variant, seed)]
            _write_trace(os.path.join(vdir, f"trace_{seed}.csv"), result.trace)
            _save_checkpoint(os.path.join(vdir, f"checkpoint_{seed}.bin"),
                             result, report, seed)
            per_variant.setdefault(variant, []).append((report.auroc, report.auprc))
            run_rows.append((variant, seed, f"{report.auroc:.6f}",
                             f"{report.auprc:.6f}", result.best_epoch,
                             result.epochs_run))

    _write_csv(os.path.join(out_dir, "runs.csv"),
               ("variant", "seed", "auroc", "auprc", "best_epoch", "epochs_run"),
               run_rows)
    summary_rows = _variant_summary(variants, per_variant)
    _write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_HEADER, summary_rows)
    _print_table(SUMMARY_HEADER, summary_rows)

    # learning curves, rebuilt from the emitted traces (round-trip check)
    series = []
    for variant in variants:
        vdir = out_dir if len(variants) == 1 else os.path.join(out_dir, variant)
        for seed in seeds:
            tpath = os.path.join(vdir, f"trace_{seed}.csv")
            if not os.path.exists(tpath):
                continue
            _, rows = read_csv(tpath)
            name = f"seed {seed}" if len(variants) == 1 else f"{variant} s{seed}"
            series.append((name, [float(r["epoch"]) for r in rows],
                           [100.0 * float(r["val_auprc"]) for r in rows]))
    if series:
        svg.line_chart(os.path.join(out_dir, "chart.svg"), series,
                       title="Validation AUPRC by epoch", xlabel="epoch",
                       ylabel="val AUPRC x100")
    return _report_failures(failures)


# ---------------------------------------------------------------------------
# Commands.

def cmd_generate(args) -> int:
    """Write synthetic train/val/test JSONL splits plus statistics."""
    sc = data.SyntheticConfig(
        n=args.n, sensor_count=args.sensors, max_steps=args.max_steps,
        missing_rate=args.missing, noise=args.noise, drift=args.drift,
        informative=not args.plain_missingness,
        n_informative=args.informative_sensors, static_count=args.statics,
        positive_rate=args.positive_rate, seed=args.seed)
    try:
        sc.validate()
    except ValueError as exc:
        raise CliError(2, str(exc)) from None
    fracs = _parse_fractions(args.split)
    if len(fracs) != 3 or abs(sum(fracs) - 1.0) > 1e-9:
        raise CliError(2, f"--split needs three fractions summing to 1, got {args.split!r}")

    dataset = data.generate_synthetic(sc)
    parts = data.split_dataset(dataset, seed=args.seed, fractions=tuple(fracs))
    os.makedirs(args.out, exist_ok=True)
    header = ("split", "instances", "sensors", "statics", "avg_observations",
              "avg_events", "missing_pct", "imbalance_pct")
    rows = []
    for name, part in zip(("train", "val", "test"), parts):
        data.write_jsonl(part, os.path.join(args.out, f"{name}.jsonl"))
        st = data.dataset_stats(part)
        rows.append((name, st["instances"], st["sensors"], st["statics"],
                     f"{st['avg_observations']:.2f}", f"{st['avg_events']:.2f}",
                     f"{st['missing_pct']:.2f}", f"{st['imbalance_pct']:.2f}"))
    st = data.dataset_stats(dataset)
    rows.append(("all", st["instances"], st["sensors"], st["statics"],
                 f"{st['avg_observations']:.2f}", f"{st['avg_events']:.2f}",
                 f"{st['missing_pct']:.2f}", f"{st['imbalance_pct']:.2f}"))
    _write_csv(os.path.join(args.out, "stats.csv"), header, rows)
    _print_table(header, rows)
    return 0


def cmd_train(args) -> int:
    """Train one model per seed and aggregate the test metrics."""
    return _train_grid(args, ["slan"], lambda cfg, _v: (cfg, None), args.out)


def cmd_eval(args) -> int:
    """Score an existing checkpoint on one split."""
    params, meta, extra = _load_checkpoint(args.checkpoint)
    splits = _load_splits(args.data)
    split_ds = dict(zip(("train", "val", "test"), splits))[args.split]
    if not len(split_ds):
        raise CliError(2, f"split {args.split!r} in {args.data} is empty")
    report = training.evaluate(params, split_ds, meta)
    header = ("variant", "split", "instances", "auroc", "auprc")
    row = (f"eval:{os.path.basename(os.fspath(args.checkpoint))}", args.split,
           len(split_ds), f"{100 * report.auroc:.2f}", f"{100 * report.auprc:.2f}")
    _print_table(header, [row])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_csv(os.path.join(args.out, "summary.csv"), header, [row])
    return 0


def cmd_ablate(args) -> int:
    """Variant grid over aggregation, imputation, or concat layout."""
    kind = args.kind
    if kind == "agg":
        variants = list(model.AGGREGATIONS)

        def apply(cfg, variant):
            cfg["agg"] = variant
            return cfg, None
    elif kind == "impute":
        variants = list(IMPUTE_VARIANTS)

        def apply(cfg, variant):
            return cfg, variant
    else:
        variants = list(model.CONCATS)

        def apply(cfg, variant):
            cfg["concat"] = variant
            return cfg, None
    return _train_grid(args, variants, apply, args.out)


def cmd_drop_study(args) -> int:
    """Train and evaluate after dropping a fraction of all observations."""
    cfg = _resolve(args)
    seeds = _parse_seeds(args.seeds)
    fractions = _parse_fractions(args.fractions, hi=0.99)
    splits = _load_splits(args.data)
    os.makedirs(args.out, exist_ok=True)

    cells = [(frac, seed) for frac in fractions for seed in seeds]

    def run(cell):
        frac, seed = cell
        base = seed * 7919 + int(round(1000 * frac))
        _, report = _single_run(splits, cfg, seed, drop=frac, drop_seed=base)
        return report

    done, failures = _grid(cells, run)

    rows = [(f"{frac:g}", seed, f"{done[(frac, seed)].auroc:.6f}",
             f"{done[(frac, seed)].auprc:.6f}")
            for frac in fractions for seed in seeds if (frac, seed) in done]
    _write_csv(os.path.join(args.out, "drop.csv"),
               ("fraction", "seed", "auroc", "auprc"), rows)

    header = ("fraction", "seeds", "auroc", "auprc",
              "delta_auprc_abs", "delta_auprc_rel_pct")
    summary, base_mean = [], None
    for frac in fractions:
        pairs = [(done[(frac, s)].auroc, done[(frac, s)].auprc)
                 for s in seeds if (frac, s) in done]
        if not pairs:
            continue
        am, asd = _mean_std([a for a, _ in pairs])
        pm, psd = _mean_std([p for _, p in pairs])
        if base_mean is None:
            base_mean = pm
        d_abs = 100.0 * (pm - base_mean)
        d_rel = 100.0 * (pm - base_mean) / base_mean if base_mean else 0.0
        summary.append((f"{frac:g}", len(pairs), _pm(am, asd), _pm(pm, psd),
                        f"{d_abs:.2f}", f"{d_rel:.2f}"))
    _write_csv(os.path.join(args.out, "summary.csv"), header, summary)
    _print_table(header, summary)

    _, parsed = read_csv(os.path.join(args.out, "drop.csv"))
    by_frac: dict[str, list[tuple[float, float]]] = {}
    for row in parsed:
        by_frac.setdefault(row["fraction"], []).append(
            (float(row["auroc"]), float(row["auprc"])))
    xs = [float(f) for f in by_frac]
    auroc_means = [100 * _mean_std([a for a, _ in by_frac[f]])[0] for f in by_frac]
    auprc_means = [100 * _mean_std([p for _, p in by_frac[f]])[0] for f in by_frac]
    svg.line_chart(os.path.join(args.out, "chart.svg"),
                   [("AUROC", xs, auroc_means), ("AUPRC", xs, auprc_means)],
                   title="Performance vs dropped observations",
                   xlabel="drop fraction", ylabel="metric x100")
    return _report_failures(failures)


def cmd_scale_study(args) -> int:
    """Train on growing prefixes of the training split."""
    cfg = _resolve(args)
    seeds = _parse_seeds(args.seeds)
    fractions = _parse_fractions(args.fractions, lo=1e-6)
    splits = _load_splits(args.data)
    os.makedirs(args.out, exist_ok=True)
    n_train = len(splits[0])

    cells = [(frac, seed) for frac in fractions for seed in seeds]

    def run(cell):
        frac, seed = cell
        _, report = _single_run(splits, cfg, seed, prefix=frac)
        return report

    done, failures = _grid(cells, run)

    def prefix_n(frac):
        return max(1, int(round(frac * n_train)))

    rows = [(f"{frac:g}", prefix_n(frac), seed,
             f"{done[(frac, seed)].auroc:.6f}", f"{done[(frac, seed)].auprc:.6f}")
            for frac in fractions for seed in seeds if (frac, seed) in done]
    _write_csv(os.path.join(args.out, "scale.csv"),
               ("fraction", "n_train", "seed", "auroc", "auprc"), rows)

    header = ("fraction", "n_train", "seeds", "auroc", "auprc",
              "auroc_ci95", "auprc_ci95")
    summary = []
    for frac in fractions:
        pairs = [(done[(frac, s)].auroc, done[(frac, s)].auprc)
                 for s in seeds if (frac, s) in done]
        if not pairs:
            continue
        am, asd = _mean_std([a for a, _ in pairs])
        pm, psd = _mean_std([p for _, p in pairs])
        aci, pci = _ci95(asd, len(pairs)), _ci95(psd, len(pairs))
        summary.append((f"{frac:g}", prefix_n(frac), len(pairs),
                        _pm(am, aci), _pm(pm, pci),
                        f"{100 * aci:.2f}", f"{100 * pci:.2f}"))
    _write_csv(os.path.join(args.out, "summary.csv"), header, summary)
    _print_table(header, summary)

    _, parsed = read_csv(os.path.join(args.out, "scale.csv"))
    by_frac: dict[str, list[tuple[float, float]]] = {}
    for row in parsed:
        by_frac.setdefault(row["fraction"], []).append(
            (float(row["auroc"]), float(row["auprc"])))
    xs = [float(f) for f in by_frac]
    svg.line_chart(
        os.path.join(args.out, "chart.svg"),
        [("AUROC", xs, [100 * _mean_std([a for a, _ in v])[0] for v in by_frac.values()]),
         ("AUPRC", xs, [100 * _mean_std([p for _, p in v])[0] for v in by_frac.values()])],
        title="Performance vs training-set size", xlabel="train fraction",
        ylabel="metric x100")
    return _report_failures(failures)


def sensor_importance(params: model.SlanParams, dataset: data.Dataset,
                      meta: data.DatasetMeta | None = None):
    """Attention mass per sensor over a split.

    Returns (rows, excluded): one row per measured sensor with its
    measurement count, sampling rate (measurements per hour of covered
    span), summed attention, per-measurement mean, and the normalized
    importance (normalized means sum to 1); sensors without measurements
    in the split are listed in ``excluded``.
    """
    if params.config.aggregation != "attention":
        raise ValueError(f"importance needs an attention checkpoint, "
                         f"got aggregation {params.config.aggregation!r}")
    if meta is not None:
        dataset = data.standardize(dataset, meta)
    prepared = training.prepare_dataset(dataset)
    s = dataset.sensor_count
    sums = np.zeros(s)
    counts = np.zeros(s, dtype=np.int64)
    span = 0.0
    for inst in prepared:
        roll = model.forward(params, inst.schedule, inst.statics)
        span += float(inst.schedule.timestamps[-1])
        for weights, acts in zip(roll.attention, roll.activations):
            for w, (m, _delta) in zip(weights, acts):
                sums[m] += float(w)
                counts[m] += 1

    names = dataset.sensor_names or [f"sensor_{m}" for m in range(s)]
    measured = [m for m in range(s) if counts[m] > 0]
    excluded = [(m, names[m]) for m in range(s) if counts[m] == 0]
    mean_imp = {m: sums[m] / counts[m] for m in measured}
    total = sum(mean_imp.values())
    rows = []
    for m in measured:
        rate = counts[m] / span if span > 0 else 0.0
        rows.append({"sensor": m, "name": names[m], "count": int(counts[m]),
                     "rate": rate, "sum_importance": float(sums[m]),
                     "mean_importance": float(mean_imp[m]),
                     "norm_importance": float(mean_imp[m] / total)})
    return rows, excluded


def cmd_importance(args) -> int:
    """Rank sensors by attention importance next to their sampling rate."""
    params, meta, _extra = _load_checkpoint(args.checkpoint)
    if params.config.aggregation != "attention":
        raise CliError(2, f"checkpoint {args.checkpoint} was trained with "
                          f"aggregation={params.config.aggregation!r}; "
                          f"importance needs 'attention'")
    splits = _load_splits(args.data)
    split_ds = dict(zip(("train", "val", "test"), splits))[args.split]
    if not len(split_ds):
        raise CliError(2, f"split {args.split!r} in {args.data} is empty")
    rows, excluded = sensor_importance(params, split_ds, meta)
    os.makedirs(args.out, exist_ok=True)

    header = ("sensor", "name", "count", "rate", "sum_importance",
              "mean_importance", "norm_importance")
    table = [(r["sensor"], r["name"], r["count"], f"{r['rate']:.6f}",
              f"{r['sum_importance']:.6f}", f"{r['mean_importance']:.6f}",
              f"{r['norm_importance']:.6f}") for r in rows]
    _write_csv(os.path.join(args.out, "importance.csv"), header, table)
    _print_table(header, table)
    for m, name in excluded:
        print(f"note: sensor {m} ({name}) has no measurements in "
              f"{args.split}; excluded")

    _, parsed = read_csv(os.path.join(args.out, "importance.csv"))
    xs = [float(r["sensor"]) for r in parsed]
    rates = [float(r["rate"]) for r in parsed]
    rate_total = sum(rates)
    rate_share = [r / rate_total if rate_total else 0.0 for r in rates]
    svg.line_chart(os.path.join(args.out, "chart.svg"),
                   [("sampling-rate share", xs, rate_share),
                    ("normalized importance", xs,
                     [float(r["norm_importance"]) for r in parsed])],
                   title="Sampling rate vs attention importance",
                   xlabel="sensor", ylabel="share")
    return 0


def cmd_bench(args) -> int:
    """Timing report: backend comparison plus epoch scaling in T."""
    os.makedirs(args.out, exist_ok=True)
    rows = []
    hsz, dt, s = args.hidden, args.t2v_dim, args.sensors

    mc = model.ModelConfig(sensor_count=s, hidden=hsz, t2v_dim=dt, seed=1)
    params = model.init_params(mc)
    sc = data.SyntheticConfig(n=24, sensor_count=s, max_steps=args.steps,
                              missing_rate=0.3, noise=0.3, seed=11)
    bench_ds = data.generate_synthetic(sc)
    sched = [data.build_schedule(inst) for inst in bench_ds.instances]
    labels = [inst.label for inst in bench_ds.instances]

    per_backend = {}
    initial = kernels.backend_name()
    for name in kernels.available_backends():
        kernels.set_backend(name)
        for inst_sched, label in zip(sched, labels):  # warmup
            _, loss = model.forward_loss(params, inst_sched, label)
            loss.tape.backward(loss)
        t0 = time.perf_counter()
        for _ in range(args.repeats):
            for inst_sched, label in zip(sched, labels):
                params.zero_grads()
                _, loss = model.forward_loss(params, inst_sched, label)
                loss.tape.backward(loss)
        ms = 1000.0 * (time.perf_counter() - t0) / (args.repeats * len(sched))
        per_backend[name] = ms
        rows.append(("backend", name, f"{ms:.3f}", "ms/rollout",
                     f"hidden={hsz} t2v={dt} sensors={s} steps<={args.steps}"))
    kernels.set_backend(initial)
    if "python" in per_backend and "compiled" in per_backend:
        rows.append(("backend", "python/compiled",
                     f"{per_backend['python'] / per_backend['compiled']:.2f}",
                     "x", "speedup of the compiled kernel"))

    times = {}
    for steps in (args.steps, 2 * args.steps):
        sc = data.SyntheticConfig(n=args.n, sensor_count=s, max_steps=steps,
                                  missing_rate=0.3, noise=0.3, seed=7)
        full = data.generate_synthetic(sc)
        tr, va, _te = data.split_dataset(full, seed=7, fractions=(0.8, 0.1, 0.1))
        mc2 = model.ModelConfig(sensor_count=s, hidden=hsz, t2v_dim=dt, seed=2)
        tc = training.TrainConfig(epochs=1, patience=1, lr=5e-4,
                                  batch_size=args.batch, seed=5)
        result = training.train(tr, va, mc2, tc)
        times[steps] = result.trace[0].seconds
        rows.append(("epoch_scale", f"T={steps}", f"{times[steps]:.3f}", "s/epoch",
                     f"n={len(tr)} batch={args.batch} hidden={hsz} "
                     f"backend={kernels.backend_name()}"))
    ratio = times[2 * args.steps] / times[args.steps]
    within = ratio <= 4.0
    rows.append(("epoch_scale", "ratio_2T_over_T", f"{ratio:.3f}", "x",
                 "linear=2.0, informational bound=4.0 (2x of linear)"))
    rows.append(("epoch_scale", "within_bound", "yes" if within else "no", "",
                 "wall time grows within 2x of linear when T doubles"))

    header = ("kind", "name", "value", "unit", "note")
    _write_csv(os.path.join(args.out, "bench.csv"), header, rows)
    _print_table(header, rows)
    return 0


# ---------------------------------------------------------------------------
# Parser.

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="directory with train/val/test.jsonl")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default=DEFAULT_SEEDS,
                   help=f"comma-separated seeds (default {DEFAULT_SEEDS})")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--epochs", type=int, help="training epochs (default 20)")
    p.add_argument("--patience", type=int, help="early-stop patience (default 5)")
    p.add_argument("--lr", type=float, help="learning rate (default 5e-4)")
    p.add_argument("--batch", type=int, help="batch size (default 16)")
    p.add_argument("--hidden", type=int, help="hidden size (default 64)")
    p.add_argument("--t2v-dim", dest="t2v_dim", type=int,
                   help="time-embedding size (default 16)")
    p.add_argument("--agg", choices=model.AGGREGATIONS,
                   help="summary aggregation (default mean)")
    p.add_argument("--impute", choices=IMPUTE_VARIANTS,
                   help="optional imputation before training (default none)")
    p.add_argument("--concat", choices=model.CONCATS,
                   help="head input: both, global, or local (default both)")
    p.add_argument("--init", choices=model.STATE_INITS,
                   help="initial-state scheme (default zeros)")
    p.add_argument("--clip", type=float, help="global gradient-norm clip (default off)")
    p.add_argument("--drop", type=float, help="drop this fraction of observations")
    p.add_argument("--workers", type=int, help="gradient worker threads (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slan",
        description="Switch-scheduled recurrent classification of irregular "
                    "time series: training, ablations, and reports.",
        epilog="SLAN_THREADS runs grid cells in parallel; SLAN_KERNEL picks "
               "the step-kernel backend (auto, python, compiled).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic dataset splits")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--sensors", type=int, default=5)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=50)
    p.add_argument("--missing", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--drift", type=float, default=1.0)
    p.add_argument("--statics", type=int, default=0)
    p.add_argument("--positive-rate", dest="positive_rate", type=float, default=0.5)
    p.add_argument("--plain-missingness", action="store_true",
                   help="disable informative missingness")
    p.add_argument("--informative-sensors", dest="informative_sensors", type=int,
                   help="how many sensors carry class drift (default half)")
    p.add_argument("--split", default="0.7,0.15,0.15")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model per seed")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", help="also write summary.csv here")
    p.set_defaults(func=cmd_eval)

    for kind, blurb in (("agg", "aggregation functions"),
                        ("impute", "imputation variants"),
                        ("concat", "concat-layer variants")):
        p = sub.add_parser(f"ablate-{kind}", help=f"compare {blurb}")
        _add_train_flags(p)
        p.set_defaults(func=cmd_ablate, kind=kind)

    p = sub.add_parser("drop-study", help="performance vs dropped observations")
    _add_train_flags(p)
    p.add_argument("--fractions", default=DROP_FRACTIONS,
                   help=f"comma-separated drop fractions (default {DROP_FRACTIONS})")
    p.set_defaults(func=cmd_drop_study)

    p = sub.add_parser("scale-study", help="performance vs training-set size")
    _add_train_flags(p)
    p.add_argument("--fractions", default=SCALE_FRACTIONS,
                   help=f"comma-separated train prefixes (default {SCALE_FRACTIONS})")
    p.set_defaults(func=cmd_scale_study)

    p = sub.add_parser("importance", help="sensor importance from attention weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("bench", help="timing report: backends and T-scaling")
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--t2v-dim", dest="t2v_dim", type=int, default=8)
    p.add_argument("--sensors", type=int, default=5)
    p.add_argument("--steps", type=int, default=24,
                   help="grid length T; the scaling run also times 2T")
    p.add_argument("--n", type=int, default=96)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
