"""``odformer`` command line: ingest, train, predict, periods, bench."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import bench as benchmod
from .data import (ODPair, ODSeries, RegionGraph, RegionPartition, build_od_series, clip_outliers, fill_missing,
                   load_series, log_normalize, read_edge_list, read_matrix_records, read_region_ids,
                   read_trajectories, save_series, segment_trajectory, split_sizes)
from .exceptions import (ConfigError, ContractError, DataError, IntegrityError, LengthError, NoDataError,
                         NoPeriodicityError, ODFormerError, ShapeError, VersionError)
from .model import ModelConfig, ODformer
from .temporal import WorkMeter, extract_periods
from .training import (TrainConfig, evaluate, evaluation_windows, load_checkpoint, make_batch, persistence_forecast,
                       predict_windows, save_checkpoint, train)

log = logging.getLogger("odformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3

_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- config handling -----------------------------------------------------------


def read_config(path) -> dict:
    """Flat JSON object whose keys are ModelConfig or TrainConfig field names."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - _MODEL_FIELDS - _TRAIN_FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def split_config(cfg: dict, series: ODSeries, seed: int | None):
    model_kw = {k: v for k, v in cfg.items() if k in _MODEL_FIELDS}
    train_kw = {k: v for k, v in cfg.items() if k in _TRAIN_FIELDS}
    for key, actual in (("n", series.n), ("n_prime", series.n_prime), ("f", series.f)):
        if key in model_kw and model_kw[key] != actual:
            raise ConfigError(f"config {key}={model_kw[key]} but the data has {key}={actual}")
        model_kw[key] = actual
    if seed is not None:
        model_kw["seed"] = seed
        train_kw["shuffle_seed"] = seed
    return ModelConfig.from_dict(model_kw), TrainConfig.from_dict(train_kw)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


# --- ingest --------------------------------------------------------------------


def _grid_partition(spec: str) -> RegionPartition:
    try:
        lon0, lat0, lon1, lat1, nx, ny = spec.split(",")
        return RegionPartition.grid(float(lon0), float(lat0), float(lon1), float(lat1), int(nx), int(ny))
    except ValueError:
        raise UsageError("--grid expects lon_min,lat_min,lon_max,lat_max,nx,ny") from None


def _graph(path, r: int) -> RegionGraph:
    return read_edge_list(path, r) if path else RegionGraph.edgeless(r)


def cmd_ingest(args) -> int:
    read_config(args.config)
    prov = {"source": None, "clip_percentile": args.clip_percentile}
    if args.trajectories:
        if bool(args.partition) == bool(args.grid):
            raise UsageError("trajectory input needs exactly one of --partition or --grid")
        part = RegionPartition.from_geojson(args.partition) if args.partition else _grid_partition(args.grid)
        trajs = read_trajectories(args.trajectories)
        pairs = [p for t in trajs.values() for p in segment_trajectory(t, part, args.interval)]
        prov.update(source="trajectories", trajectories=len(trajs),
                    points=sum(len(t.points) for t in trajs.values()), od_pairs=len(pairs))
        if not pairs:
            raise NoDataError("no OD pairs: every trajectory stays inside one region or outside the partition")
        n = n_prime = len(part)
        slot0 = min(p.timeslot for p in pairs)
        slots = max(p.timeslot for p in pairs) - slot0 + 1
        og, dg = _graph(args.origin_graph, n), _graph(args.destination_graph, n)
        series = build_od_series(pairs, n, n_prime, slots, args.interval, 1, og, dg, slot0)
        missing = np.zeros(series.values.shape, dtype=bool)
    else:
        index = read_region_ids(args.regions) if args.regions else None
        records = read_matrix_records(args.matrix, index)
        if not records:
            raise NoDataError(f"{args.matrix}: no matrix records")
        n = n_prime = len(index) if index is not None else 1 + max(max(r[1], r[2]) for r in records)
        slot0 = min(r[0] for r in records)
        slots = max(r[0] for r in records) - slot0 + 1
        bad = next((r for r in records if not (0 <= r[1] < n and 0 <= r[2] < n)), None)
        if bad is not None:
            raise DataError(f"{args.matrix}: region index out of range in record {bad}")
        og, dg = _graph(args.origin_graph, n), _graph(args.destination_graph, n_prime)
        present = [ODPair(o, d, t, v) for t, o, d, v in records if not math.isnan(v)]
        series = build_od_series(present, n, n_prime, slots, args.interval, 1, og, dg, slot0)
        missing = np.zeros(series.values.shape, dtype=bool)
        for t, o, d, v in records:
            if math.isnan(v):
                missing[t - slot0, o, d, 0] = True
        prov.update(source="matrix", records=len(records))

    raw = series.values.copy()
    raw[missing] = np.nan
    clipped = clip_outliers(series.with_values(raw), args.clip_percentile)
    filled = fill_missing(clipped.with_values(np.nan_to_num(clipped.values)), missing)
    normalized = log_normalize(filled)
    sizes = split_sizes(len(normalized))
    prov.update(
        slots=len(normalized), n=normalized.n, n_prime=normalized.n_prime, slot0=normalized.slot0,
        interval=normalized.interval, clip_threshold=clipped.meta["clip_threshold"],
        imputed_cells=filled.meta["imputed_cells"], normalization="log1p",
        split={"train": sizes[0], "validation": sizes[1], "test": sizes[2]},
    )
    out = Path(args.out)
    save_series(normalized, out / "series", extra={"normalization": "log1p", "split": prov["split"]})
    _write_json(out / "provenance.json", prov)
    print(json.dumps(prov, sort_keys=True))
    return EXIT_OK


# --- train -----------------------------------------------------------------------


def _peak_bytes(model: ODformer, values: np.ndarray, starts) -> int:
    c = model.config
    x, y = make_batch(values, starts[:1], c.input_length, c.output_length)
    meter = WorkMeter()
    with meter.activate():
        loss = torch.mean((model(x) - y) ** 2)
        loss.backward()
    model.zero_grad(set_to_none=True)
    return meter.peak_bytes


def cmd_train(args) -> int:
    series = load_series(args.data)
    cfg, tc = split_config(read_config(args.config), series, args.seed)
    if args.max_epochs is not None:
        tc = TrainConfig.from_dict({**asdict(tc), "max_epochs": args.max_epochs})
    n_train, n_val, n_test = split_sizes(len(series))
    v = series.values
    train_v, val_v = v[:n_train], v[n_train:n_train + n_val]
    i, o = cfg.input_length, cfg.output_length
    if n_train < i + o:
        raise LengthError(f"training split has {n_train} steps, a window needs {i + o}")

    model = ODformer(cfg, series.origin_graph, series.destination_graph)
    start = time.perf_counter()
    ck = train(model, train_v, val_v, tc, val_context=train_v)
    train_seconds = time.perf_counter() - start
    best = ck.build_model().eval()

    test_starts = evaluation_windows(n_train + n_val, len(v), i, o)
    pred, truth, periods = predict_windows(best, v, test_starts)
    report = {
        "seed": cfg.seed,
        "model_config": cfg.to_dict(),
        "train_config": asdict(tc),
        "data": {"path": str(args.data), "length": len(series), "split": [n_train, n_val, n_test]},
        "history": ck.history,
        "best_epoch": ck.epoch,
        "best_val_mse": ck.val_loss,
        "test_windows": [int(s) for s in test_starts],
        "periods": periods,
    }
    if pred is not None:
        hist = np.stack([v[s:s + i] for s in test_starts])
        base = persistence_forecast(hist, o)
        mse, mae = evaluate(pred, truth)
        pmse, pmae = evaluate(base, truth)
        report["test"] = {"mse": mse, "mae": mae, "denormalized": dict(zip(("mse", "mae"), evaluate(pred, truth, True)))}
        report["persistence"] = {"mse": pmse, "mae": pmae}
        report["beats_persistence"] = mse < pmse
    else:
        report["test"] = report["persistence"] = None
        report["beats_persistence"] = None
    report["timing"] = {"train_seconds": train_seconds, "epochs_run": len(ck.history.get("train_loss", []))}
    report["peak_attention_bytes"] = _peak_bytes(ck.build_model(), train_v, np.arange(1))

    out = Path(args.out)
    save_checkpoint(ck, out / "model.ckpt")
    _write_json(out / "report.json", report)
    summary = {k: report[k] for k in ("best_epoch", "best_val_mse", "test", "persistence", "beats_persistence")}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# --- predict ---------------------------------------------------------------------


def _history_from_csv(path, n: int, n_prime: int) -> tuple:
    records = read_matrix_records(path)
    if not records:
        raise NoDataError(f"{path}: no history records")
    slot0 = min(r[0] for r in records)
    slots = max(r[0] for r in records) - slot0 + 1
    pairs = []
    for t, o, d, val in records:
        if math.isnan(val):
            raise DataError(f"{path}: history must not contain missing values")
        pairs.append(ODPair(o, d, t, val))
    s = build_od_series(pairs, n, n_prime, slots, slot0=slot0)
    return np.log1p(s.values), slot0


def cmd_predict(args) -> int:
    read_config(args.config)
    ck = load_checkpoint(args.checkpoint)
    model = ck.build_model().eval()
    c = model.config
    if bool(args.data) == bool(args.history):
        raise UsageError("give exactly one of --data or --history")
    if args.data:
        series = load_series(args.data)
        values, slot0 = series.values, series.slot0
    else:
        values, slot0 = _history_from_csv(args.history, c.n, c.n_prime)
    end = len(values) if args.end is None else args.end
    if not 0 <= end <= len(values):
        raise LengthError(f"--end {end} outside [0, {len(values)}]")
    if end < c.input_length:
        raise LengthError(f"history has {end} steps, the model needs input_length={c.input_length}")
    window = values[end - c.input_length:end]
    with torch.no_grad():
        pred = model(torch.from_numpy(np.ascontiguousarray(window))).numpy()
    flows = np.expm1(pred)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "forecast.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["timeslot", "origin", "destination", "value"]
        if c.f > 1:
            header.append("feature")
        w.writerow(header)
        for k in range(c.output_length):
            for a in range(c.n):
                for b in range(c.n_prime):
                    for f in range(c.f):
                        row = [slot0 + end + k, a, b, repr(float(flows[k, a, b, f]))]
                        w.writerow(row + [f] if c.f > 1 else row)
    print(json.dumps({"forecast": str(path), "rows": c.output_length * c.n * c.n_prime * c.f,
                      "first_timeslot": slot0 + end}))
    return EXIT_OK


# --- periods ---------------------------------------------------------------------


def cmd_periods(args) -> int:
    cfg = read_config(args.config)
    series = load_series(args.data)
    start = args.start
    length = args.window or len(series) - start
    if start < 0 or length < 1 or start + length > len(series):
        raise LengthError(f"window [{start}, {start + length}) outside the series of length {len(series)}")
    reduced = series.values[start:start + length].mean(axis=(1, 2, 3))
    max_k = args.max_k or cfg.get("max_heads", 4)
    movavg = args.movavg or cfg.get("moving_average_window")
    report = {"start": start, "length": length, "max_k": max_k, "window": movavg}
    try:
        ps = extract_periods(reduced, max_k, movavg)
        report.update(status="ok", **ps.to_dict())
    except NoPeriodicityError as exc:
        report.update(status="no periodicity", periods=[], scores=[], detail=str(exc))
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if args.out:
        _write_json(Path(args.out) / "periods.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# --- bench -----------------------------------------------------------------------


def _parse_grid(spec: str) -> list:
    try:
        grid = [tuple(int(x) for x in item.split(":")) for item in spec.split(",")]
    except ValueError:
        raise UsageError("--grid expects I:O pairs such as 32:96,64:192") from None
    if any(len(g) != 2 or min(g) < 1 for g in grid):
        raise UsageError("--grid expects positive I:O pairs")
    return grid


def cmd_bench(args) -> int:
    cfg = read_config(args.config)
    points = benchmod.run_bench(
        _parse_grid(args.grid),
        d_model=cfg.get("d_model", 32),
        max_heads=cfg.get("max_heads", 4),
        c=cfg.get("sparsity_factor", 2.0),
        period_fraction=args.period_fraction,
        repeats=args.repeats,
        memory_cap_bytes=args.memory_cap,
        seed=args.seed if args.seed is not None else cfg.get("seed", 0),
    )
    c = cfg.get("sparsity_factor", 2.0)
    for p in points:
        length = p.sequence_length
        floor_case = len(p.periods) == 1 and length / p.periods[0] > c * math.log(length)
        if p.attention_kind == "period_sparse" and not floor_case:
            budget = benchmod.visit_budget(length, c)
            if p.key_visit_count > budget:
                raise ContractError(f"{p.key_visit_count} key visits exceed the budget {budget} at L={p.sequence_length}")
    json_path, csv_path = benchmod.write_bench(points, args.out)
    summary = {
        "points": [asdict(p) for p in points],
        "sparse_growth": benchmod.growth_ratios(points, "period_sparse"),
        "full_growth": benchmod.growth_ratios(points, "full"),
        "files": [str(json_path), str(csv_path)],
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with ModelConfig / TrainConfig field names")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="odformer", description="OD matrix forecasting with ODformer")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ing = sub.add_parser("ingest", parents=[common], help="build a normalized OD series directory")
    src = ing.add_mutually_exclusive_group(required=True)
    src.add_argument("--trajectories", help="CSV traj_id,timestamp,lon,lat")
    src.add_argument("--matrix", help="CSV timeslot,origin,destination,value")
    ing.add_argument("--partition", help="GeoJSON region polygons")
    ing.add_argument("--grid", help="regular grid lon_min,lat_min,lon_max,lat_max,nx,ny")
    ing.add_argument("--regions", help="CSV with an id column mapping region ids to indices")
    ing.add_argument("--origin-graph", help="edge list CSV u,v,weight")
    ing.add_argument("--destination-graph", help="edge list CSV u,v,weight")
    ing.add_argument("--interval", type=float, default=3600.0, help="timeslot width in seconds")
    ing.add_argument("--clip-percentile", type=float, default=98.0)
    ing.set_defaults(func=cmd_ingest)

    tr = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint and report")
    tr.add_argument("--data", required=True, help="series directory from ingest")
    tr.add_argument("--max-epochs", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="forecast output_length steps")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", help="series directory (normalized)")
    pr.add_argument("--history", help="CSV timeslot,origin,destination,value on the raw flow scale")
    pr.add_argument("--end", type=int, default=None, help="history ends before this step (default: series end)")
    pr.set_defaults(func=cmd_predict)

    pe = sub.add_parser("periods", parents=[common], help="report extracted periods of a series window")
    pe.add_argument("--data", required=True)
    pe.add_argument("--start", type=int, default=0)
    pe.add_argument("--window", type=int, default=None, help="window length (default: to the end)")
    pe.add_argument("--max-k", type=int, default=None)
    pe.add_argument("--movavg", type=int, default=None, help="odd moving-average window")
    pe.set_defaults(func=cmd_periods)

    be = sub.add_parser("bench", parents=[common], help="sparse vs full attention benchmark")
    be.add_argument("--grid", default="32:96,64:192,128:384", help="comma separated I:O pairs")
    be.add_argument("--repeats", type=int, default=5)
    be.add_argument("--memory-cap", type=int, default=None, help="bytes; larger full-attention points are OOM")
    be.add_argument("--period-fraction", type=float, default=0.125, help="planted period as a fraction of L")
    be.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"odformer: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LengthError, ShapeError, IntegrityError, VersionError, FileNotFoundError) as exc:
        print(f"odformer: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, ODFormerError) as exc:
        print(f"odformer: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
