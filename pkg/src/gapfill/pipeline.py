"""Retrieval ingestion, gridding, moving-window gap filling, and validation.

The production path: filter raw retrievals by quality policy, aggregate them
onto a 1 deg x 1 deg x 1 day grid, run a 16-day moving-window low-rank fit
per target day, and emit per-day gridded products.  Reference-network
colocation and validation reporting live here as well.
"""

import csv
import dataclasses
import datetime
import io
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diagnostics import DiagnosticsReport, report_table, score, z_for_level
from .frk import FRKParams, build_basis_sphere_time, fit_em, frk_predict
from .geometry import sphere_points
from .kriging import Dataset

_EPOCH = datetime.datetime(1970, 1, 1, tzinfo=datetime.timezone.utc)

RETRIEVAL_COLUMNS = (
    "time_utc",
    "lon",
    "lat",
    "xco2",
    "xco2_se",
    "quality_flag",
    "warn_level",
    "mode",
)

MODES = ("land-nadir", "land-glint", "ocean-glint", "target")

SKIP_NO_DATA = "no_data"
SKIP_GAP_RULE = "gap_rule"
SKIP_FIT_FAILURE = "fit_failure"


class PipelineError(Exception):
    pass


class MalformedRecordError(PipelineError):
    pass


def parse_time_utc(text: str) -> float:
    """Time as fractional days since 1970-01-01 UTC.

    Accepts either a plain float (already in fractional days) or an ISO-8601
    timestamp such as 2015-06-01T13:30:00.
    """
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    dt = datetime.datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=datetime.timezone.utc)
    return (dt - _EPOCH).total_seconds() / 86400.0


def day_index(time_days: float) -> int:
    return int(np.floor(time_days))


@dataclass(frozen=True)
class RetrievalRecord:
    """One retrieval: location, time, value, reported SE, quality fields."""

    lon: float
    lat: float
    time: float
    xco2: float
    xco2_se: float
    quality_flag: int
    warn_level: int
    mode: str

    def __post_init__(self):
        if not (-180.0 <= self.lon < 180.0 and -90.0 <= self.lat <= 90.0):
            raise ValueError(f"coordinates out of range: {self.lon}, {self.lat}")
        if self.xco2_se < 0:
            raise ValueError("xco2_se must be >= 0")


@dataclass(frozen=True)
class AggregatedCell:
    """One non-empty grid cell: mean value, mean SE, member count."""

    lon_idx: int
    lat_idx: int
    day: int
    z: float
    sigma_eps: float
    count: int

    @property
    def lon_center(self) -> float:
        return self.lon_idx - 180.0 + 0.5

    @property
    def lat_center(self) -> float:
        return self.lat_idx - 90.0 + 0.5


@dataclass(frozen=True)
class ReferenceRecord:
    """Ground-station measurement used for validation."""

    station: str
    lon: float
    lat: float
    time: float
    xco2: float
    xco2_se: float


@dataclass
class Level3Product:
    """Gridded per-day prediction: values, SEs, and fit provenance."""

    target_day: int
    lon_centers: np.ndarray
    lat_centers: np.ndarray
    pred: np.ndarray
    se: np.ndarray
    n_obs_cell: np.ndarray
    lat_bounds: Tuple[float, float]
    window: Tuple[int, int]
    fit_metadata: dict
    n_cells_window: int
    n_cells_target: int
    seed: int

    def __post_init__(self):
        if np.any(self.se <= 0):
            raise ValueError("product SEs must be > 0")
        lo, hi = self.lat_bounds
        if np.any((self.lat_centers < lo - 0.5) | (self.lat_centers > hi + 0.5)):
            raise ValueError("predictions outside latitude bounds")


@dataclass
class PipelineConfig:
    policy: str = "v8"
    se_floor: float = 2.0
    spatial_counts: Tuple[int, ...] = (42, 114, 240)
    n_temporal: int = 8
    em_mode: str = "free"
    em_tol: float = 1e-4
    em_max_iter: int = 50
    seed: int = 0
    warm_start: bool = True
    threads: int = 1
    strict: bool = False
    day_start: Optional[int] = None
    day_end: Optional[int] = None

    def __post_init__(self):
        if self.policy not in ("v7", "v8"):
            raise PipelineError("policy must be 'v7' or 'v8'")
        if self.se_floor < 0:
            raise PipelineError("se_floor must be >= 0")
        if self.em_mode not in ("free", "structured"):
            raise PipelineError("em_mode must be 'free' or 'structured'")
        if self.n_temporal < 1 or any(c < 1 for c in self.spatial_counts):
            raise PipelineError("basis counts must be positive")
        if self.threads < 1:
            raise PipelineError("threads must be >= 1")
        if self.warm_start and self.threads > 1:
            raise PipelineError(
                "warm_start and day-parallelism are mutually exclusive"
            )


def read_retrievals(path, strict: bool = False) -> List[RetrievalRecord]:
    """Read delimited retrieval records, validating the header.

    Malformed rows raise (strict) or are reported to the returned list's
    side-channel via PipelineError message aggregation (non-strict: skipped).
    """
    records = []
    problems = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        got = tuple(reader.fieldnames or ())
        if got != RETRIEVAL_COLUMNS:
            raise PipelineError(
                f"bad header in {path}: expected {RETRIEVAL_COLUMNS}, got {got}"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(
                    RetrievalRecord(
                        lon=float(row["lon"]),
                        lat=float(row["lat"]),
                        time=parse_time_utc(row["time_utc"]),
                        xco2=float(row["xco2"]),
                        xco2_se=float(row["xco2_se"]),
                        quality_flag=int(row["quality_flag"]),
                        warn_level=int(row["warn_level"]),
                        mode=row["mode"].strip(),
                    )
                )
            except (ValueError, TypeError, KeyError) as exc:
                msg = f"{path}:{lineno}: {exc}"
                if strict:
                    raise MalformedRecordError(msg) from exc
                problems.append(msg)
    if problems:
        import warnings

        warnings.warn(f"skipped {len(problems)} malformed rows; first: {problems[0]}")
    return records


def _is_missing(rec: RetrievalRecord) -> bool:
    vals = (rec.lon, rec.lat, rec.time, rec.xco2, rec.xco2_se)
    return any(not np.isfinite(v) for v in vals)


def filter_records(
    records: Sequence[RetrievalRecord], policy: str, se_floor: float = 2.0
) -> List[RetrievalRecord]:
    """Quality screening plus SE flooring.

    Policy "v7" removes records with warn_level >= 15 and quality_flag == 1,
    or with reported SE above 3 ppm.  Policy "v8" keeps quality_flag == 0
    only, irrespective of the warn level.  Both remove target-mode records
    and rows with missing values.  Surviving SEs are floored at se_floor.
    """
    if policy not in ("v7", "v8"):
        raise PipelineError("policy must be 'v7' or 'v8'")
    if se_floor < 0:
        raise PipelineError("se_floor must be >= 0")
    out = []
    for rec in records:
        if _is_missing(rec) or rec.mode == "target":
            continue
        if policy == "v7":
            if rec.warn_level >= 15 and rec.quality_flag == 1:
                continue
            if rec.xco2_se > 3.0:
                continue
        else:
            if rec.quality_flag != 0:
                continue
        if rec.xco2_se < se_floor:
            rec = dataclasses.replace(rec, xco2_se=se_floor)
        out.append(rec)
    return out


def cell_index(lon: float, lat: float) -> Tuple[int, int]:
    """1-degree cell indices; the lat = 90 edge folds into the top band."""
    i = int(np.floor(lon + 180.0))
    j = min(int(np.floor(lat + 90.0)), 179)
    return i, j


def aggregate_to_grid(records: Sequence[RetrievalRecord]) -> List[AggregatedCell]:
    """Average retrievals within each 1 deg x 1 deg x 1 day cell.

    Both the value and the SE are arithmetic means: averaging the reported
    SEs (rather than error propagation under independence) treats retrieval
    errors within a cell as perfectly correlated.
    """
    groups: Dict[Tuple[int, int, int], list] = {}
    for rec in records:
        i, j = cell_index(rec.lon, rec.lat)
        groups.setdefault((i, j, day_index(rec.time)), []).append(rec)
    cells = []
    for (i, j, d), members in sorted(groups.items()):
        z = float(np.mean([r.xco2 for r in members]))
        se = float(np.mean([r.xco2_se for r in members]))
        cells.append(AggregatedCell(i, j, d, z, se, len(members)))
    return cells


WINDOW_BEFORE = 7
WINDOW_AFTER = 8


def window_select(
    cells: Sequence[AggregatedCell], target_day: int
) -> List[AggregatedCell]:
    """Cells with day in [target - 7, target + 8]: 16 days, target the 8th."""
    lo, hi = target_day - WINDOW_BEFORE, target_day + WINDOW_AFTER
    return [c for c in cells if lo <= c.day <= hi]


def should_predict(window_cells: Sequence[AggregatedCell], target_day: int) -> bool:
    """True iff data on the target day, or both strictly before and after."""
    has_target = any(c.day == target_day for c in window_cells)
    if has_target:
        return True
    before = any(c.day < target_day for c in window_cells)
    after = any(c.day > target_day for c in window_cells)
    return before and after


def latitude_bounds(
    target_cells: Sequence[AggregatedCell],
    window_cells: Sequence[AggregatedCell],
) -> Tuple[float, float]:
    """Lat range of target-day cells; window-wide range when the day is empty."""
    source = target_cells if target_cells else window_cells
    if not source:
        raise PipelineError("latitude_bounds needs at least one cell")
    lats = [c.lat_center for c in source]
    return (min(lats), max(lats))


def _cells_to_dataset(cells: Sequence[AggregatedCell], t_origin: int) -> Dataset:
    lonlat = np.array([[c.lon_center, c.lat_center] for c in cells])
    times = np.array([c.day - t_origin + 0.5 for c in cells])
    z = np.array([c.z for c in cells])
    se = np.array([c.sigma_eps for c in cells])
    return Dataset(points=sphere_points(lonlat, times), z=z, sigma_eps=se)


def _atomic_write(path: str, text: str):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def product_csv(product: Level3Product) -> str:
    buf = io.StringIO()
    buf.write("lon_center,lat_center,pred_ppm,se_ppm,n_obs_cell\n")
    for lon, lat, p, s, n in zip(
        product.lon_centers,
        product.lat_centers,
        product.pred,
        product.se,
        product.n_obs_cell,
    ):
        buf.write(f"{lon:.1f},{lat:.1f},{p:.6f},{s:.6f},{int(n)}\n")
    return buf.getvalue()


def product_metadata(product: Level3Product, version: str) -> str:
    md = product.fit_metadata
    lines = [
        f"target_day: {product.target_day}",
        f"window_start: {product.window[0]}",
        f"window_end: {product.window[1]}",
        f"lat_min: {product.lat_bounds[0]:.1f}",
        f"lat_max: {product.lat_bounds[1]:.1f}",
        f"n_cells_window: {product.n_cells_window}",
        f"n_cells_target: {product.n_cells_target}",
        f"seed: {product.seed}",
        f"tool_version: {version}",
        f"em_mode: {md['em_mode']}",
        f"em_iterations: {md['em_iterations']}",
        f"sigma2_zeta: {md['sigma2_zeta']!r}",
        f"window_mean_ppm: {md['window_mean']!r}",
    ]
    for key in ("theta1", "theta2", "theta3"):
        if md.get(key) is not None:
            vals = ",".join(repr(v) for v in md[key])
            lines.append(f"{key}: [{vals}]")
    return "\n".join(lines) + "\n"


def fit_day(
    cells: Sequence[AggregatedCell],
    target_day: int,
    config: PipelineConfig,
    init: Optional[FRKParams] = None,
    basis=None,
):
    """Fit the window ending-to-end and predict the target day's cells.

    Returns (Level3Product, fitted) or raises PipelineError flavors for the
    gating conditions.
    """
    window_cells = window_select(cells, target_day)
    if not window_cells:
        raise _SkipDay(SKIP_NO_DATA)
    if not should_predict(window_cells, target_day):
        raise _SkipDay(SKIP_GAP_RULE)
    target_cells = [c for c in window_cells if c.day == target_day]
    lat_lo, lat_hi = latitude_bounds(target_cells, window_cells)

    t_origin = target_day - WINDOW_BEFORE
    data = _cells_to_dataset(window_cells, t_origin)
    window_mean = float(np.mean(data.z))
    data = Dataset(points=data.points, z=data.z - window_mean, sigma_eps=data.sigma_eps)

    if basis is None:
        basis = build_basis_sphere_time(
            spatial_counts=config.spatial_counts,
            window=float(WINDOW_BEFORE + WINDOW_AFTER + 1),
            n_temporal=config.n_temporal,
        )
    try:
        fitted = fit_em(
            data,
            basis,
            mode=config.em_mode,
            tol=config.em_tol,
            max_iter=config.em_max_iter,
            init=init,
        )
    except Exception as exc:
        raise _SkipDay(SKIP_FIT_FAILURE, detail=str(exc)) from exc

    lat_centers_all = np.arange(-89.5, 90.0, 1.0)
    lat_centers = lat_centers_all[
        (lat_centers_all >= lat_lo) & (lat_centers_all <= lat_hi)
    ]
    lon_centers = np.arange(-179.5, 180.0, 1.0)
    glon, glat = np.meshgrid(lon_centers, lat_centers, indexing="ij")
    lonlat = np.column_stack([glon.ravel(order="F"), glat.ravel(order="F")])
    times = np.full(len(lonlat), target_day - t_origin + 0.5)
    pred_points = sphere_points(lonlat, times)
    res = frk_predict(fitted, pred_points, space="process")

    count_by_cell = {(c.lon_idx, c.lat_idx): c.count for c in target_cells}
    n_obs = np.array(
        [
            count_by_cell.get(cell_index(lon, lat), 0)
            for lon, lat in lonlat
        ]
    )
    params = fitted.params
    metadata = {
        "em_mode": config.em_mode,
        "em_iterations": fitted.n_iterations,
        "sigma2_zeta": float(fitted.sigma2_zeta),
        "window_mean": window_mean,
        "theta1": None if params is None else [float(v) for v in params.theta1],
        "theta2": None if params is None else [float(v) for v in params.theta2],
        "theta3": None
        if params is None or params.theta3 is None
        else [float(v) for v in params.theta3],
    }
    product = Level3Product(
        target_day=target_day,
        lon_centers=lonlat[:, 0],
        lat_centers=lonlat[:, 1],
        pred=res.pred + window_mean,
        se=res.se_process,
        n_obs_cell=n_obs,
        lat_bounds=(lat_lo, lat_hi),
        window=(t_origin, target_day + WINDOW_AFTER),
        fit_metadata=metadata,
        n_cells_window=len(window_cells),
        n_cells_target=len(target_cells),
        seed=config.seed,
    )
    return product, fitted


class _SkipDay(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(reason)
        self.reason = reason
        self.detail = detail


@dataclass
class PipelineResult:
    products: Dict[int, Level3Product] = field(default_factory=dict)
    skipped: Dict[int, str] = field(default_factory=dict)


def run_pipeline(
    input_paths: Sequence[str],
    config: PipelineConfig,
    out_dir: Optional[str] = None,
) -> PipelineResult:
    """Filter, aggregate, and produce one gridded product per eligible day.

    Each target day in the configured (or observed) day range is gated by the
    window rule; eligible days are fitted and predicted on the 1-degree grid
    between that day's latitude bounds.  Outputs, when out_dir is given, are
    a CSV per day plus a sidecar metadata file, written atomically.
    """
    from . import __version__

    records = []
    for path in input_paths:
        records.extend(read_retrievals(path, strict=config.strict))
    records = filter_records(records, config.policy, config.se_floor)
    cells = aggregate_to_grid(records)

    result = PipelineResult()
    if not cells:
        return result
    days = sorted({c.day for c in cells})
    day_lo = config.day_start if config.day_start is not None else days[0]
    day_hi = config.day_end if config.day_end is not None else days[-1]
    targets = list(range(day_lo, day_hi + 1))

    basis = build_basis_sphere_time(
        spatial_counts=config.spatial_counts,
        window=float(WINDOW_BEFORE + WINDOW_AFTER + 1),
        n_temporal=config.n_temporal,
    )

    def one_day(day: int, init: Optional[FRKParams]):
        try:
            return day, fit_day(cells, day, config, init=init, basis=basis), None
        except _SkipDay as skip:
            return day, None, skip.reason

    outcomes = []
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(lambda d: one_day(d, None), targets))
    else:
        init = None
        for day in targets:
            outcome = one_day(day, init if config.warm_start else None)
            outcomes.append(outcome)
            if config.warm_start and outcome[1] is not None:
                fitted = outcome[1][1]
                if fitted.params is not None:
                    init = fitted.params
    for day, fit_out, reason in outcomes:
        if fit_out is None:
            result.skipped[day] = reason
        else:
            result.products[day] = fit_out[0]

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for day, product in sorted(result.products.items()):
            _atomic_write(
                os.path.join(out_dir, f"product_day{day:05d}.csv"),
                product_csv(product),
            )
            _atomic_write(
                os.path.join(out_dir, f"product_day{day:05d}.meta"),
                product_metadata(product, __version__),
            )
        log_lines = [f"{day},{reason}" for day, reason in sorted(result.skipped.items())]
        _atomic_write(
            os.path.join(out_dir, "skipped_days.csv"),
            "day,reason\n" + "\n".join(log_lines) + ("\n" if log_lines else ""),
        )
    return result


def reference_colocate(
    records: Sequence[ReferenceRecord],
    crossing_time_local: Dict[str, float],
    half_window_minutes: float = 30.0,
) -> List[ReferenceRecord]:
    """Per station-day mean of records within the overpass time window.

    crossing_time_local maps station id to the mean local solar crossing time
    in hours (0-24).  Local time is UTC + lon/15 hours.  Records within
    half_window_minutes of the crossing time (closed interval) are averaged
    by station and UTC day with the same mean-value/mean-SE rule used for
    retrieval gridding.
    """
    missing = sorted(
        {r.station for r in records} - set(crossing_time_local)
    )
    if missing:
        raise PipelineError(f"stations without overpass metadata: {missing}")
    half_days = half_window_minutes / (24.0 * 60.0)
    groups: Dict[Tuple[str, int], list] = {}
    for rec in records:
        local = rec.time + rec.lon / 360.0
        cross = crossing_time_local[rec.station] / 24.0
        frac = local - np.floor(local)
        diff = frac - cross
        diff -= np.round(diff)
        if abs(diff) <= half_days + 1e-12:
            groups.setdefault((rec.station, day_index(rec.time)), []).append(rec)
    out = []
    for (station, day), members in sorted(groups.items()):
        out.append(
            ReferenceRecord(
                station=station,
                lon=members[0].lon,
                lat=members[0].lat,
                time=day + 0.5,
                xco2=float(np.mean([m.xco2 for m in members])),
                xco2_se=float(np.mean([m.xco2_se for m in members])),
            )
        )
    return out


def validate_products(
    products: Dict[int, Level3Product],
    reference: Sequence[ReferenceRecord],
    level: float = 0.95,
    exclude: Optional[str] = None,
) -> List[Tuple[str, DiagnosticsReport]]:
    """Per-station and pooled scores of products against reference data.

    Each reference record is matched to the product cell containing the
    station on that record's day.  Interval coverage uses the combined SD
    sqrt(se_product^2 + se_reference^2).  Returns (label, report) rows: one
    per station, a pooled "Total", and optionally "Total (w/o X)".
    """
    matches: Dict[str, list] = {}
    for rec in reference:
        product = products.get(day_index(rec.time))
        if product is None:
            continue
        i, j = cell_index(rec.lon, rec.lat)
        lon_c, lat_c = i - 180.0 + 0.5, j - 90.0 + 0.5
        hit = np.flatnonzero(
            (product.lon_centers == lon_c) & (product.lat_centers == lat_c)
        )
        if len(hit) == 0:
            continue
        k = int(hit[0])
        sigma_delta = float(np.hypot(product.se[k], rec.xco2_se))
        matches.setdefault(rec.station, []).append(
            (float(product.pred[k]), sigma_delta, rec.xco2)
        )
    if not matches:
        raise PipelineError("no product cells overlap the reference records")

    rows = []
    pooled: Dict[str, list] = {"all": [], "excl": []}
    for station in sorted(matches):
        triples = matches[station]
        pred, sd, truth = (np.array(v) for v in zip(*triples))
        rows.append((station, score(pred, sd, truth, nominal_level=level)))
        pooled["all"].extend(triples)
        if station != exclude:
            pooled["excl"].extend(triples)
    pred, sd, truth = (np.array(v) for v in zip(*pooled["all"]))
    rows.append(("Total", score(pred, sd, truth, nominal_level=level)))
    if exclude is not None and pooled["excl"]:
        pred, sd, truth = (np.array(v) for v in zip(*pooled["excl"]))
        rows.append(
            (f"Total (w/o {exclude})", score(pred, sd, truth, nominal_level=level))
        )
    return rows


def validation_report(rows, delimiter: str = ",") -> str:
    return report_table(rows, delimiter=delimiter)
