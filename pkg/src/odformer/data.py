"""Trajectory segmentation, OD binning, preprocessing and series storage."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .exceptions import DataError, IntegrityError, LengthError, ShapeError, VersionError

SERIES_FORMAT_VERSION = 1


class ODPair(NamedTuple):
    origin: int
    destination: int
    timeslot: int
    flow: float = 1.0


@dataclass
class Trajectory:
    """Ordered ``(timestamp_seconds, (lon, lat))`` points."""

    points: list

    def __post_init__(self):
        ts = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError("trajectory timestamps must be strictly increasing")


@dataclass
class RegionGraph:
    adjacency: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"adjacency must be square, got {a.shape}")
        if (a < 0).any():
            raise DataError("adjacency weights must be nonnegative")
        if not np.allclose(a, a.T, rtol=0, atol=1e-12):
            raise DataError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise DataError("adjacency diagonal must be zero")
        self.adjacency = a

    @property
    def region_count(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, u: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[u] > 0)

    @classmethod
    def ring(cls, r: int) -> "RegionGraph":
        a = np.zeros((r, r))
        if r > 1:
            for i in range(r):
                j = (i + 1) % r
                if i != j:
                    a[i, j] = a[j, i] = 1.0
        return cls(a)

    @classmethod
    def edgeless(cls, r: int) -> "RegionGraph":
        return cls(np.zeros((r, r)))

    @classmethod
    def from_edges(cls, edges: Iterable[tuple], r: int) -> "RegionGraph":
        a = np.zeros((r, r))
        for u, v, w in edges:
            if not (0 <= u < r and 0 <= v < r):
                raise DataError(f"edge ({u}, {v}) out of range for {r} regions")
            if u != v:
                a[u, v] = a[v, u] = float(w)
        return cls(a)

    def edges(self) -> list:
        iu, iv = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(u), int(v), float(self.adjacency[u, v])) for u, v in zip(iu, iv)]


class RegionPartition:
    """Maps a (lon, lat) location to a region index, or ``None`` outside all regions.

    Regions are shapely polygons; where polygons overlap the first one wins so a
    location never resolves to more than one region.
    """

    def __init__(self, polygons: Sequence, ids: Sequence | None = None):
        from shapely.prepared import prep

        self.polygons = list(polygons)
        self.ids = list(ids) if ids is not None else list(range(len(self.polygons)))
        self._prepared = [prep(p) for p in self.polygons]

    def __len__(self):
        return len(self.polygons)

    def locate(self, lon: float, lat: float):
        from shapely.geometry import Point

        pt = Point(lon, lat)
        for idx, poly in enumerate(self._prepared):
            if poly.covers(pt):
                return idx
        return None

    @classmethod
    def grid(cls, lon_min, lat_min, lon_max, lat_max, nx: int, ny: int) -> "RegionPartition":
        from shapely.geometry import box

        # half-open cells so shared edges resolve to one region
        dx = (lon_max - lon_min) / nx
        dy = (lat_max - lat_min) / ny
        eps = 1e-12
        polys = []
        for j in range(ny):
            for i in range(nx):
                x0, y0 = lon_min + i * dx, lat_min + j * dy
                x1 = x0 + dx - (eps if i < nx - 1 else 0.0)
                y1 = y0 + dy - (eps if j < ny - 1 else 0.0)
                polys.append(box(x0, y0, x1, y1))
        return cls(polys)

    @classmethod
    def from_geojson(cls, path) -> "RegionPartition":
        from shapely.geometry import shape

        doc = json.loads(Path(path).read_text())
        feats = doc["features"] if doc.get("type") == "FeatureCollection" else [doc]
        polys, ids = [], []
        for k, feat in enumerate(feats):
            polys.append(shape(feat["geometry"]))
            props = feat.get("properties") or {}
            ids.append(props.get("id", feat.get("id", k)))
        return cls(polys, ids)


@dataclass
class ODSeries:
    """OD matrices ``values[t, i, j, f]`` on consecutive timeslots ``slot0 + t``."""

    values: np.ndarray
    interval: float = 1.0
    origin_graph: RegionGraph | None = None
    destination_graph: RegionGraph | None = None
    slot0: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 3:
            v = v[..., None]
        if v.ndim != 4:
            raise ShapeError(f"OD series values must have shape [T, N, N', F], got {v.shape}")
        self.values = v
        _, n, n_prime, _ = v.shape
        if self.origin_graph is None:
            self.origin_graph = RegionGraph.edgeless(n)
        if self.destination_graph is None:
            self.destination_graph = RegionGraph.edgeless(n_prime)
        if self.origin_graph.region_count != n or self.destination_graph.region_count != n_prime:
            raise ShapeError("region graphs do not match the matrix dimensions")

    def __len__(self):
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def n_prime(self) -> int:
        return self.values.shape[2]

    @property
    def f(self) -> int:
        return self.values.shape[3]

    def with_values(self, values, **changes) -> "ODSeries":
        return replace(self, values=values, meta=dict(self.meta), **changes)

    def slice(self, start: int, stop: int) -> "ODSeries":
        return self.with_values(self.values[start:stop].copy(), slot0=self.slot0 + start)


# --- segmentation and binning ----------------------------------------------


def segment_trajectory(t: Trajectory, partition: RegionPartition, interval: float) -> list:
    """One OD pair per consecutive region transition, stamped with the departure slot.

    Points outside every region are dropped and split the trajectory, so no
    pair ever bridges an unmapped gap.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    pairs = []
    prev = None  # (region, timestamp) of the last mapped point in the current segment
    for ts, (lon, lat) in t.points:
        region = partition.locate(lon, lat)
        if region is None:
            prev = None
            continue
        if prev is not None and region != prev[0]:
            pairs.append(ODPair(prev[0], region, int(math.floor(prev[1] / interval)), 1.0))
        prev = (region, ts)
    return pairs


def build_od_series(pairs: Iterable[ODPair], n: int, n_prime: int, slots: int, interval: float = 1.0,
                    f: int = 1, origin_graph=None, destination_graph=None, slot0: int = 0) -> ODSeries:
    """Sum flows into ``[slots, n, n_prime, f]``; ``pair.timeslot`` is relative to ``slot0``."""
    if slots < 1:
        raise ValueError("slots must be >= 1")
    values = np.zeros((slots, n, n_prime, f))
    for p in pairs:
        o, d, s, flow = p
        s -= slot0
        if not (0 <= o < n and 0 <= d < n_prime):
            raise IndexError(f"OD pair ({o}, {d}) outside {n}x{n_prime}")
        if not 0 <= s < slots:
            raise IndexError(f"timeslot {p.timeslot} outside [{slot0}, {slot0 + slots})")
        if flow < 0:
            raise DataError("flow must be nonnegative")
        values[s, o, d, 0] += flow
    return ODSeries(values, interval, origin_graph, destination_graph, slot0)


# --- preprocessing -----------------------------------------------------------


def nearest_rank_percentile(values: np.ndarray, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    if not 0 < percentile < 100:
        raise ValueError("percentile must lie strictly between 0 and 100")
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    flat = flat[~np.isnan(flat)]
    if flat.size == 0:
        raise DataError("no values to take a percentile of")
    rank = max(1, math.ceil(percentile / 100.0 * flat.size))
    return float(flat[rank - 1])


def clip_outliers(s: ODSeries, percentile: float = 98.0) -> ODSeries:
    threshold = nearest_rank_percentile(s.values, percentile)
    out = s.with_values(np.minimum(s.values, threshold))
    out.values[np.isnan(s.values)] = np.nan
    out.meta["clip_threshold"] = threshold
    return out


def fill_missing(s: ODSeries, mask) -> ODSeries:
    """Replace entries where ``mask`` is True with the mean of present neighbours.

    Neighbours of cell (u, v) are (u', v) for u' adjacent to u in the origin
    graph and (u, v') for v' adjacent to v in the destination graph, at the
    same timestep. With no present neighbour the previous timestep's value is
    used (once filled), else 0.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = np.broadcast_to(mask[..., None], s.values.shape)
    if mask.shape != s.values.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match series shape {s.values.shape}")
    values = s.values.copy()
    if not mask.any():
        out = s.with_values(values)
        out.meta["imputed_cells"] = 0
        return out
    present = ~mask
    o_nb = [s.origin_graph.neighbors(u) for u in range(s.n)]
    d_nb = [s.destination_graph.neighbors(v) for v in range(s.n_prime)]
    for t, u, v, f in zip(*np.nonzero(mask)):
        pool = [s.values[t, uu, v, f] for uu in o_nb[u] if present[t, uu, v, f]]
        pool += [s.values[t, u, vv, f] for vv in d_nb[v] if present[t, u, vv, f]]
        if pool:
            values[t, u, v, f] = float(np.mean(pool))
        elif t > 0:
            values[t, u, v, f] = values[t - 1, u, v, f]
        else:
            values[t, u, v, f] = 0.0
    out = s.with_values(values)
    out.meta["imputed_cells"] = int(mask.sum())
    return out


def log_normalize(s: ODSeries) -> ODSeries:
    if (s.values < 0).any():
        raise ValueError("log_normalize requires nonnegative entries")
    return s.with_values(np.log1p(s.values))


def log_denormalize(s: ODSeries) -> ODSeries:
    return s.with_values(np.expm1(s.values))


class Split(NamedTuple):
    train: ODSeries
    validation: ODSeries
    test: ODSeries


def split_sizes(length: int) -> tuple:
    if length < 10:
        raise LengthError(f"series of length {length} is too short to split 6:2:2")
    n_train = (6 * length) // 10
    n_val = (2 * length) // 10
    return n_train, n_val, length - n_train - n_val


def split_series(s: ODSeries) -> Split:
    """Chronological 6:2:2 split, floor rounding, remainder to test."""
    n_train, n_val, _ = split_sizes(len(s))
    return Split(s.slice(0, n_train), s.slice(n_train, n_train + n_val), s.slice(n_train + n_val, len(s)))


def generate_synthetic(n: int, n_prime: int, length: int, periods: Sequence[int], noise: float = 0.0,
                       seed: int = 0, offset: float = 3.0, amplitude: float = 1.0,
                       graph_coupling: float = 0.0, pair_coupling: float = 0.0) -> ODSeries:
    """Positive periodic OD series over ring-lattice region graphs.

    Each pair gets ``offset + sum_k amplitude * sin(2 pi t / P_k + phase)`` plus
    Gaussian noise, clipped at zero. With ``graph_coupling`` > 0 part of every
    cell is shared with its ring neighbours; ``pair_coupling`` > 0 adds a
    component common to all cells with the same origin or destination. Both
    default to 0 (independent pairs).
    """
    periods = list(periods)
    if not periods:
        raise ValueError("at least one period is required")
    for p in periods:
        if p < 2 or p > length / 2:
            raise ValueError(f"period {p} outside [2, length/2]")
    rng = np.random.default_rng(seed)
    t = np.arange(length)[:, None, None]
    own = np.zeros((length, n, n_prime))
    for p in periods:
        phase = rng.uniform(0, 2 * np.pi, size=(n, n_prime))
        own += amplitude * np.sin(2 * np.pi * t / p + phase)
    signal = own
    if graph_coupling > 0:
        # neighbouring cells on both ring lattices share a smooth latent field
        field_ = np.zeros((length, n, n_prime))
        for p in periods:
            ph_o = rng.uniform(0, 2 * np.pi, size=n)
            ph_d = rng.uniform(0, 2 * np.pi, size=n_prime)
            ang = 2 * np.pi * (np.arange(n)[:, None] / max(n, 1) + np.arange(n_prime)[None, :] / max(n_prime, 1))
            field_ += amplitude * np.sin(2 * np.pi * t / p + ang + 0.5 * (ph_o[:, None] + ph_d[None, :]))
        signal = (1 - graph_coupling) * signal + graph_coupling * field_
    if pair_coupling > 0:
        row = np.zeros((length, n, 1))
        col = np.zeros((length, 1, n_prime))
        for p in periods:
            row += amplitude * np.sin(2 * np.pi * t / p + rng.uniform(0, 2 * np.pi, size=(n, 1)))
            col += amplitude * np.sin(2 * np.pi * t / p + rng.uniform(0, 2 * np.pi, size=(1, n_prime)))
        signal = (1 - pair_coupling) * signal + pair_coupling * 0.5 * (row + col)
    values = offset + signal
    if noise > 0:
        values = values + rng.normal(0.0, noise, size=values.shape)
    values = np.maximum(values, 0.0)
    return ODSeries(values[..., None], 1.0, RegionGraph.ring(n), RegionGraph.ring(n_prime))


# --- CSV readers -------------------------------------------------------------


def _read_csv_rows(path, required: Sequence[str]):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file", line=1)
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}", line=1)
        for row in reader:
            yield reader.line_num, row


def read_trajectories(path) -> dict:
    """Columns ``traj_id,timestamp,lon,lat`` -> {traj_id: Trajectory} (points sorted by time)."""
    raw = defaultdict(list)
    for line, row in _read_csv_rows(path, ("traj_id", "timestamp", "lon", "lat")):
        try:
            raw[row["traj_id"]].append((float(row["timestamp"]), (float(row["lon"]), float(row["lat"]))))
        except (TypeError, ValueError) as exc:
            raise DataError(f"bad trajectory row: {exc}", line=line) from None
    out = {}
    for tid, pts in raw.items():
        pts.sort(key=lambda p: p[0])
        try:
            out[tid] = Trajectory(pts)
        except DataError as exc:
            raise DataError(f"trajectory {tid}: {exc}") from None
    return out


def read_matrix_records(path, region_index: dict | None = None) -> list:
    """Columns ``timeslot,origin,destination,value``.

    Returns ``(timeslot, origin, destination, value)`` tuples; empty or ``nan``
    values come back as NaN and mark missing cells. ``region_index`` maps raw
    region ids to indices, otherwise ids must already be integer indices.
    """
    out = []
    for line, row in _read_csv_rows(path, ("timeslot", "origin", "destination", "value")):
        try:
            slot = int(row["timeslot"])
            o, d = row["origin"], row["destination"]
            if region_index is not None:
                if o not in region_index or d not in region_index:
                    raise ValueError(f"unknown region id {o if o not in region_index else d!r}")
                o, d = region_index[o], region_index[d]
            else:
                o, d = int(o), int(d)
            text = (row["value"] or "").strip()
            value = float("nan") if text == "" else float(text)
        except (TypeError, ValueError) as exc:
            raise DataError(f"bad matrix row: {exc}", line=line) from None
        if value < 0:
            raise DataError("negative flow value", line=line)
        out.append((slot, o, d, value))
    return out


def read_region_ids(path) -> dict:
    """CSV with an ``id`` column; row order defines the region index."""
    return {row["id"]: k for k, (_, row) in enumerate(_read_csv_rows(path, ("id",)))}


def read_edge_list(path, r: int) -> RegionGraph:
    edges = []
    for line, row in _read_csv_rows(path, ("u", "v", "weight")):
        try:
            edges.append((int(row["u"]), int(row["v"]), float(row["weight"])))
        except (TypeError, ValueError) as exc:
            raise DataError(f"bad edge row: {exc}", line=line) from None
    try:
        return RegionGraph.from_edges(edges, r)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_edge_list(g: RegionGraph, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v", "weight"])
        for u, v, wt in g.edges():
            w.writerow([u, v, repr(wt)])


# --- series directory format -------------------------------------------------


def save_series(s: ODSeries, directory, extra: dict | None = None) -> Path:
    """Write ``metadata.json``, ``values.bin`` (float64 little-endian) and two edge lists."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob = np.ascontiguousarray(s.values, dtype="<f8").tobytes()
    meta = {
        "format_version": SERIES_FORMAT_VERSION,
        "length": len(s),
        "n": s.n,
        "n_prime": s.n_prime,
        "f": s.f,
        "interval": s.interval,
        "slot0": s.slot0,
        "payload_bytes": len(blob),
        **s.meta,
        **(extra or {}),
    }
    (d / "values.bin").write_bytes(blob)
    write_edge_list(s.origin_graph, d / "origin_graph.csv")
    write_edge_list(s.destination_graph, d / "destination_graph.csv")
    (d / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


_META_KEYS = {"format_version", "length", "n", "n_prime", "f", "interval", "slot0", "payload_bytes"}


def load_series(directory) -> ODSeries:
    d = Path(directory)
    try:
        meta = json.loads((d / "metadata.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{d} is not a series directory (metadata.json missing)") from None
    if meta.get("format_version") != SERIES_FORMAT_VERSION:
        raise VersionError(f"unsupported series format version {meta.get('format_version')}")
    blob = (d / "values.bin").read_bytes()
    if len(blob) != meta["payload_bytes"]:
        raise IntegrityError(f"{d / 'values.bin'}: expected {meta['payload_bytes']} bytes, found {len(blob)}")
    shape = (meta["length"], meta["n"], meta["n_prime"], meta["f"])
    values = np.frombuffer(blob, dtype="<f8").reshape(shape).astype(np.float64)
    og = read_edge_list(d / "origin_graph.csv", meta["n"])
    dg = read_edge_list(d / "destination_graph.csv", meta["n_prime"])
    extra = {k: v for k, v in meta.items() if k not in _META_KEYS}
    return ODSeries(values, meta["interval"], og, dg, meta["slot0"], extra)
