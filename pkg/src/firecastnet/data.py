"""Datacube container, standardisation, sliding-window samples and a synthetic cube.

The on-disk format (SFDC) is a small header-plus-payload container::

    b"SFDC0001" | uint32 header length | JSON header | float32 payloads

with one contiguous little-endian payload per variable in header order:
[T, H, W] for dynamic variables and [H, W] for static ones.
"""

from __future__ import annotations

import datetime as dt
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .coupling import GridSpec

DYNAMIC_VARIABLES = (
    "mslp",
    "tp",
    "vpd",
    "sst",
    "t2m_mean",
    "ssrd",
    "swvl1",
    "lst_day",
    "ndvi",
    "pop_dens",
)
STATIC_VARIABLES = ("lsm",)
TARGET_VARIABLE = "gwis_ba"
INPUT_VARIABLES = DYNAMIC_VARIABLES + STATIC_VARIABLES
ALL_VARIABLES = INPUT_VARIABLES + (TARGET_VARIABLE,)
POSITIONAL_CHANNELS = ("cos_lat", "sin_lon", "cos_lon")
CHANNELS = INPUT_VARIABLES + POSITIONAL_CHANNELS

# land-only variables are missing (NaN) over the ocean, sst over land
LAND_VARIABLES = ("vpd", "swvl1", "lst_day", "ndvi", "pop_dens")
OCEAN_VARIABLES = ("sst",)

PERIODS_PER_YEAR = 46
PERIOD_DAYS = 8

TRAIN_YEARS = (2002, 2017)
VAL_YEARS = (2018, 2018)
TEST_YEARS = (2019, 2019)

ALLOWED_TS = (6, 12, 24)
ALLOWED_HORIZONS = (1, 2, 4, 8, 16, 24)

CUBE_MAGIC = b"SFDC0001"
REGION_MAGIC = b"SFRM0001"


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


@dataclass
class DatacubeSlab:
    times: np.ndarray  # datetime64[D], one entry per 8-day period
    grid: GridSpec
    values: dict  # name -> float32 array, [T, H, W] or [H, W] for static
    stats: dict = field(default_factory=dict)  # name -> (mean, std)
    standardized: bool = False

    @property
    def variables(self) -> tuple:
        return tuple(self.values)

    @property
    def num_times(self) -> int:
        return len(self.times)

    def years(self) -> np.ndarray:
        return self.times.astype("datetime64[Y]").astype(int) + 1970

    def land_mask(self) -> np.ndarray:
        return np.asarray(self.values["lsm"]) > 0.5

    def target_binary(self) -> np.ndarray:
        """gwis_ba > 0 as a boolean [T, H, W] array."""
        return np.asarray(self.values[TARGET_VARIABLE]) > 0


@dataclass(frozen=True)
class RegionMask:
    name: str
    mask: np.ndarray  # bool [H, W]
    grid: Optional[GridSpec] = None

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    @property
    def num_cells(self) -> int:
        return int(self.mask.sum())


def rect_region(grid: GridSpec, name: str, lat_range, lon_range) -> RegionMask:
    """Cells whose centres fall inside a lat/lon box (bounds inclusive)."""
    lat, lon = np.meshgrid(grid.lats(), grid.lons(), indexing="ij")
    m = (lat >= lat_range[0]) & (lat <= lat_range[1]) & (lon >= lon_range[0]) & (lon <= lon_range[1])
    return RegionMask(name, m, grid)


def check_schema(names: Sequence[str]) -> None:
    unknown = [n for n in names if n not in ALL_VARIABLES]
    if unknown:
        raise SchemaError(f"unknown variable {unknown[0]!r}")
    missing = [n for n in ALL_VARIABLES if n not in names]
    if missing:
        raise SchemaError(f"missing variable {missing[0]!r}")
    if len(set(names)) != len(names):
        raise SchemaError("duplicate variable names")


# ---------------------------------------------------------------------------
# SFDC I/O


def _iso(times) -> list[str]:
    return [str(t) for t in np.asarray(times, dtype="datetime64[D]")]


def save_cube(slab: DatacubeSlab, path, metadata: Optional[dict] = None) -> None:
    check_schema(list(slab.values))
    t, h, w = slab.num_times, slab.grid.height, slab.grid.width
    entries = []
    for name in ALL_VARIABLES:
        mean, std = slab.stats.get(name, (None, None))
        entries.append(
            {
                "name": name,
                "static": name in STATIC_VARIABLES,
                "mean": None if mean is None else float(mean),
                "std": None if std is None else float(std),
            }
        )
    header = {
        "version": 1,
        "dims": [t, h, w],
        "grid": slab.grid.to_dict(),
        "times": _iso(slab.times),
        "variables": entries,
        "standardized": bool(slab.standardized),
        "endianness": "LE",
        "dtype": "f32",
    }
    if metadata:
        header["metadata"] = metadata
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for e in entries:
            arr = np.asarray(slab.values[e["name"]])
            expect = (h, w) if e["static"] else (t, h, w)
            if arr.shape != expect:
                raise SchemaError(f"{e['name']}: shape {arr.shape} != {expect}")
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_cube_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    magic = fh.read(8)
    if magic != CUBE_MAGIC:
        raise SchemaError(f"bad magic {magic!r}, expected {CUBE_MAGIC!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise SchemaError("truncated header")
    (n,) = struct.unpack("<I", raw)
    header = json.loads(fh.read(n).decode("utf-8"))
    if header.get("version") != 1:
        raise SchemaError(f"unsupported version {header.get('version')}")
    return header


def load_cube(path) -> DatacubeSlab:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        names = [v["name"] for v in header["variables"]]
        check_schema(names)
        t, h, w = header["dims"]
        values, stats = {}, {}
        for v in header["variables"]:
            shape = (h, w) if v["static"] else (t, h, w)
            count = int(np.prod(shape))
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise SchemaError(f"truncated payload for {v['name']!r}")
            values[v["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
            if v["mean"] is not None:
                stats[v["name"]] = (v["mean"], v["std"])
    times = np.array(header["times"], dtype="datetime64[D]")
    if len(times) != t:
        raise SchemaError("time coordinate length does not match dims")
    return DatacubeSlab(
        times, GridSpec.from_dict(header["grid"]), values, stats, header.get("standardized", False)
    )


def save_region(region: RegionMask, path) -> None:
    h, w = region.mask.shape
    blob = json.dumps({"name": region.name, "dims": [h, w]}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(REGION_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.packbits(region.mask, axis=1).tobytes())


def load_region(path, grid: Optional[GridSpec] = None) -> RegionMask:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != REGION_MAGIC:
            raise SchemaError(f"bad region magic {magic!r}")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        h, w = header["dims"]
        row_bytes = (w + 7) // 8
        raw = np.frombuffer(fh.read(h * row_bytes), dtype=np.uint8)
    if raw.size != h * row_bytes:
        raise SchemaError("truncated region mask")
    mask = np.unpackbits(raw.reshape(h, row_bytes), axis=1, count=w).astype(bool)
    return RegionMask(header["name"], mask, grid)


# ---------------------------------------------------------------------------
# splits, statistics, standardisation


def year_mask(times, years) -> np.ndarray:
    y = np.asarray(times, dtype="datetime64[D]").astype("datetime64[Y]").astype(int) + 1970
    return (y >= years[0]) & (y <= years[1])


def split_by_years(slab_or_times, train=TRAIN_YEARS, val=VAL_YEARS, test=TEST_YEARS):
    """Time indices whose year falls in each split (used as target times)."""
    times = slab_or_times.times if isinstance(slab_or_times, DatacubeSlab) else slab_or_times
    out = []
    for name, years in (("train", train), ("val", val), ("test", test)):
        idx = np.nonzero(year_mask(times, years))[0]
        if len(idx) == 0:
            raise DataError(f"{name} split ({years[0]}-{years[1]}) is empty")
        out.append(idx)
    return tuple(out)


def compute_stats(slab: DatacubeSlab, years=TRAIN_YEARS) -> dict:
    """Mean/std of each input variable over training-year times, ignoring NaN."""
    sel = year_mask(slab.times, years)
    if not sel.any():
        raise DataError("no times in the statistics year range")
    stats = {}
    for name in DYNAMIC_VARIABLES:
        v = slab.values[name][sel]
        mean = float(np.nanmean(v, dtype=np.float64))
        std = float(np.nanstd(v, dtype=np.float64))
        stats[name] = (mean, std)
    return stats


def standardize(slab: DatacubeSlab, years=TRAIN_YEARS) -> DatacubeSlab:
    """(v - mean) / std per input variable, missing values -> 0, lsm -> {0, 1}.

    Statistics stored on the slab are reused; otherwise they are computed on
    the training years.  The target is left untouched.
    """
    if slab.standardized:
        return slab
    stats = dict(slab.stats)
    if any(name not in stats for name in DYNAMIC_VARIABLES):
        stats.update(compute_stats(slab, years))
    values = {}
    for name in DYNAMIC_VARIABLES:
        mean, std = stats[name]
        if not std > 0:
            raise DataError(f"variable {name!r} has zero standard deviation")
        z = (slab.values[name].astype(np.float64) - mean) / std
        values[name] = np.nan_to_num(z, nan=0.0, posinf=0.0, neginf=0.0).astype(np.float32)
    values["lsm"] = (np.nan_to_num(slab.values["lsm"]) > 0.5).astype(np.float32)
    values[TARGET_VARIABLE] = slab.values[TARGET_VARIABLE]
    return DatacubeSlab(slab.times, slab.grid, values, stats, standardized=True)


def positional_channels(grid: GridSpec) -> np.ndarray:
    """[3, H, W]: cos(lat), sin(lon), cos(lon)."""
    lat, lon = np.meshgrid(np.deg2rad(grid.lats()), np.deg2rad(grid.lons()), indexing="ij")
    return np.stack([np.cos(lat), np.sin(lon), np.cos(lon)]).astype(np.float32)


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class Sample:
    input: np.ndarray  # [ts, 14, H, W]
    target: np.ndarray  # bool [H, W]
    target_time: np.datetime64
    target_index: int
    horizon: int


def window_starts(num_times: int, ts: int, horizon: int, stride: int) -> np.ndarray:
    if stride < 1:
        raise DataError("stride must be >= 1")
    last = num_times - ts - horizon
    if last < 0:
        raise DataError(f"ts={ts} + h={horizon} exceeds the {num_times} available times")
    return np.arange(0, last + 1, stride)


class SampleSet:
    """Indexable sliding-window samples over a standardised slab.

    Window ``k`` covers times [s, s + ts) with s = k * stride and targets
    time s + ts - 1 + h.  Only windows whose target index is in
    ``target_indices`` (if given) are kept.  Input windows may reach back
    into earlier years than the target's split.
    """

    def __init__(
        self,
        slab: DatacubeSlab,
        ts: int,
        horizon: int,
        stride: int = 1,
        target_indices: Optional[np.ndarray] = None,
        dynamic: Optional[np.ndarray] = None,
    ):
        if not slab.standardized:
            raise DataError("samples need a standardized slab")
        self.slab = slab
        self.ts = ts
        self.horizon = horizon
        self.stride = stride
        starts = window_starts(slab.num_times, ts, horizon, stride)
        targets = starts + ts - 1 + horizon
        if target_indices is not None:
            keep = np.isin(targets, target_indices)
            starts, targets = starts[keep], targets[keep]
        self.starts = starts
        self.targets = targets
        self.dynamic = (
            dynamic
            if dynamic is not None
            else np.stack([slab.values[n] for n in DYNAMIC_VARIABLES], axis=1)
        )
        g = slab.grid
        self.static = np.concatenate(
            [slab.values["lsm"][None].astype(np.float32), positional_channels(g)]
        )
        self.binary_target = slab.target_binary()

    def subset(self, target_indices) -> "SampleSet":
        """Same windows restricted to other target indices, sharing arrays."""
        out = SampleSet.__new__(SampleSet)
        out.__dict__.update(self.__dict__)
        keep = np.isin(self.targets, target_indices)
        out.starts, out.targets = self.starts[keep], self.targets[keep]
        return out

    def __len__(self) -> int:
        return len(self.starts)

    def input_at(self, k: int) -> np.ndarray:
        s = int(self.starts[k])
        dyn = self.dynamic[s : s + self.ts]
        static = np.broadcast_to(self.static, (self.ts,) + self.static.shape)
        return np.concatenate([dyn, static], axis=1)

    def __getitem__(self, k: int) -> Sample:
        if not -len(self) <= k < len(self):
            raise IndexError(k)
        k = k % len(self)
        t = int(self.targets[k])
        return Sample(
            self.input_at(k),
            self.binary_target[t],
            self.slab.times[t],
            t,
            self.horizon,
        )

    def __iter__(self) -> Iterator[Sample]:
        for k in range(len(self)):
            yield self[k]


def make_samples(
    slab: DatacubeSlab,
    ts: int,
    h: int,
    stride: int = 1,
    years: Optional[tuple] = None,
) -> SampleSet:
    target_idx = None if years is None else np.nonzero(year_mask(slab.times, years))[0]
    return SampleSet(standardize(slab), ts, h, stride, target_idx)


def overlap_to_stride(ts: int, overlap: int) -> int:
    stride = ts - overlap
    if stride < 1 or overlap < 0:
        raise DataError(f"overlap must be in [0, {ts - 1}] for ts={ts}")
    return stride


# ---------------------------------------------------------------------------
# synthetic cube


def period_times(years: Sequence[int]) -> np.ndarray:
    out = []
    for y in years:
        start = np.datetime64(dt.date(y, 1, 1), "D")
        out.extend(start + np.arange(PERIODS_PER_YEAR) * PERIOD_DAYS)
    return np.array(out, dtype="datetime64[D]")


def _smooth_field(rng, shape, h, w, coarse=(8, 16)) -> np.ndarray:
    """Smooth random field(s) by bilinear upsampling of coarse noise, periodic in longitude."""
    ch, cw = coarse
    noise = rng.standard_normal(tuple(shape) + (ch + 1, cw))
    ys = np.linspace(0, ch, h, endpoint=False) + 0.5 * ch / h
    xs = (np.arange(w) + 0.5) * cw / w
    y0 = np.floor(ys).astype(int)
    fy = (ys - y0)[:, None]
    x0 = np.floor(xs).astype(int) % cw
    x1 = (x0 + 1) % cw
    fx = (xs - np.floor(xs))[None, :]
    a = noise[..., y0, :][..., x0]
    b = noise[..., y0, :][..., x1]
    c = noise[..., np.minimum(y0 + 1, ch), :][..., x0]
    d = noise[..., np.minimum(y0 + 1, ch), :][..., x1]
    top = a * (1 - fx) + b * fx
    bot = c * (1 - fx) + d * fx
    out = top * (1 - fy) + bot * fy
    return out / out.std()


def synth_cube(
    seed: int = 0,
    years: Sequence[int] = tuple(range(2002, 2020)),
    height: int = 64,
    width: int = 128,
    fire_rate: float = 0.02,
) -> DatacubeSlab:
    """Seeded procedural cube with a learnable, partly predictable fire signal.

    A latitude-dependent seasonal cycle drives most variables.  A persistent
    anomaly field (AR(1) in time, smooth in space) shifts dryness from year to
    year; fires ignite where seasonal dryness, ignition pressure (seen as
    population density), the previous period's anomaly, recent vegetation
    state and greening 8 to 20 periods earlier (cured fuel) line up, plus local
    noise.  The seasonal part gives the climatology baselines real skill while the anomaly is only
    visible through the input variables.
    """
    years = list(years)
    rng = np.random.default_rng(seed)
    grid = GridSpec.global_grid(height, width)
    t_total = len(years) * PERIODS_PER_YEAR
    lat = np.deg2rad(grid.lats())[:, None] * np.ones((1, width))
    lon = np.deg2rad(grid.lons())[None, :] * np.ones((height, 1))

    land_field = _smooth_field(rng, (), height, width, (6, 12)) - 0.35 * (np.abs(lat) > 1.2)
    lsm = (land_field > 0.35).astype(np.float32)
    land = lsm > 0.5

    # fire season peaks around mid-year in the north, late in the year in the south
    peak = 23.0 - 14.0 * np.tanh(np.rad2deg(lat) / 12.0) + 3.0 * _smooth_field(rng, (), height, width)
    period = np.arange(t_total) % PERIODS_PER_YEAR
    season = np.cos(2 * np.pi * (period[:, None, None] - peak[None]) / PERIODS_PER_YEAR)
    season = season.astype(np.float32)

    anomaly = np.empty((t_total, height, width), dtype=np.float32)
    shocks = _smooth_field(rng, (t_total,), height, width, (6, 12)).astype(np.float32)
    a = shocks[0]
    for t in range(t_total):
        a = 0.85 * a + np.sqrt(1 - 0.85**2) * shocks[t] if t else a
        anomaly[t] = a

    def lagged(arr, k):
        out = np.empty_like(arr)
        out[k:] = arr[: t_total - k]
        out[:k] = arr[:1]
        return out

    def noise(s=1.0):
        return (s * rng.standard_normal((t_total, height, width))).astype(np.float32)

    climate = np.cos(lat).astype(np.float32)
    vegetation_base = (0.4 + 0.15 * _smooth_field(rng, (), height, width)).astype(np.float32)
    values = {}
    values["mslp"] = 101325.0 + 150.0 * season - 400.0 * anomaly + noise(60.0)
    values["tp"] = np.maximum(0.0, 2.0 - 1.4 * season - 0.8 * anomaly + noise(0.4))
    values["vpd"] = 1.2 + 0.7 * season + 0.6 * anomaly + noise(0.15)
    values["sst"] = 14.0 + 12.0 * climate + 1.5 * season + noise(0.3)
    values["t2m_mean"] = 2.0 + 24.0 * climate + 6.0 * season + 1.5 * anomaly + noise(0.8)
    values["ssrd"] = 120.0 + 160.0 * climate + 40.0 * season + noise(10.0)
    values["swvl1"] = 0.3 - 0.08 * lagged(season, 1) - 0.04 * anomaly + noise(0.02)
    values["lst_day"] = values["t2m_mean"] + 4.0 + 3.0 * season + noise(0.8)
    # slow greening anomaly: wet spells build fuel that burns months later
    greening = np.empty((t_total, height, width), dtype=np.float32)
    g_shocks = _smooth_field(rng, (t_total,), height, width, (6, 12)).astype(np.float32)
    g = g_shocks[0]
    for t in range(t_total):
        g = 0.7 * g + np.sqrt(1 - 0.7**2) * g_shocks[t] if t else g
        greening[t] = g
    values["ndvi"] = (
        vegetation_base
        - 0.15 * lagged(season, 2)
        - 0.08 * lagged(anomaly, 2)
        + 0.1 * greening
        + noise(0.03)
    )
    # human ignition pressure, visible to models through population density
    ignition = _smooth_field(rng, (), height, width).astype(np.float32)
    pop = np.exp(1.0 + ignition).astype(np.float32)
    values["pop_dens"] = np.broadcast_to(pop, (t_total, height, width)) * (1.0 + noise(0.01))

    fuel = lagged(values["ndvi"], 3) - vegetation_base
    # cured fuel: mean greening 8..20 periods back
    csum = np.concatenate([np.zeros((1, height, width)), np.cumsum(greening, axis=0, dtype=np.float64)])
    t_idx = np.arange(t_total)
    lo, hi = np.maximum(t_idx - 20, 0), np.maximum(t_idx - 7, 1)
    cured = (csum[hi] - csum[lo]) / (hi - lo)[:, None, None]
    cured = ((cured - cured.mean()) / cured.std()).astype(np.float32)
    propensity = (
        2.0 * season
        + 2.0 * ignition
        + 0.8 * lagged(anomaly, 1)
        - 2.0 * fuel
        + 1.5 * cured
        + noise(0.3)
    )
    thr = np.quantile(propensity[:, land], 1.0 - fire_rate)
    burned = np.where(land[None], np.maximum(0.0, propensity - thr) * 2500.0, 0.0)

    for name in LAND_VARIABLES:
        values[name] = np.where(land[None], values[name], np.nan)
    for name in OCEAN_VARIABLES:
        values[name] = np.where(land[None], np.nan, values[name])
    values = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in values.items()}
    values["lsm"] = lsm
    values[TARGET_VARIABLE] = burned.astype(np.float32)
    ordered = {name: values[name] for name in ALL_VARIABLES}
    slab = DatacubeSlab(period_times(years), grid, ordered)
    if any(y in years for y in range(TRAIN_YEARS[0], TRAIN_YEARS[1] + 1)):
        slab.stats = compute_stats(slab)
    return slab
