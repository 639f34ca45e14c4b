"""Presence-only observation handling and environmental raster features.

An observation corpus is a list of ``(species_id, lon, lat)`` records; the
species catalog is the distinct ids in order of first appearance, and records
refer to species by dense catalog index. All subset operations (count
filtering, per-species caps, species selection) preserve record order and
keep the catalog dense.

Environmental features come from a stack of single-layer plain-text rasters
sharing one grid; layers are z-score normalized on load with missing cells
excluded from the statistics and then set to zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .geo import (
    LAT_MAX,
    LAT_MIN,
    LON_MAX,
    LON_MIN,
    InputLayout,
    encode_locations,
)
from .losses import BatchTargets

#: Streams drawn from a user seed are domain-separated with these salts.
_SALT_SUBSAMPLE = 1
_SALT_SELECT = 2

ENV_MAGIC = "ENVGRID"
_ENV_MISSING_TOKEN = "NA"


def _seed_u64(seed: int) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class ObservationSet:
    """Presence-only records plus the species catalog they index into."""

    species_ids: tuple[str, ...]
    species_index: np.ndarray
    lons: np.ndarray
    lats: np.ndarray

    def __post_init__(self) -> None:
        ids = tuple(str(s) for s in self.species_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("species catalog contains duplicate ids")
        idx = np.asarray(self.species_index)
        if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
            raise ValueError("species_index must be a 1-D integer array")
        lons = np.asarray(self.lons, dtype=np.float64)
        lats = np.asarray(self.lats, dtype=np.float64)
        if lons.shape != idx.shape or lats.shape != idx.shape:
            raise ValueError("species_index, lons and lats must have equal length")
        if idx.size and (idx.min() < 0 or idx.max() >= len(ids)):
            raise ValueError("species_index entries must lie in [0, n_species)")
        ok = (
            np.isfinite(lons) & np.isfinite(lats)
            & (lons >= LON_MIN) & (lons <= LON_MAX)
            & (lats >= LAT_MIN) & (lats <= LAT_MAX)
        )
        if not np.all(ok):
            i = int(np.flatnonzero(~ok)[0])
            raise ValueError(f"record {i} has invalid coordinates ({lons[i]}, {lats[i]})")
        object.__setattr__(self, "species_ids", ids)
        object.__setattr__(self, "species_index", idx.astype(np.int64))
        object.__setattr__(self, "lons", lons)
        object.__setattr__(self, "lats", lats)

    @property
    def n_records(self) -> int:
        return int(self.species_index.shape[0])

    @property
    def n_species(self) -> int:
        return len(self.species_ids)

    def counts(self) -> np.ndarray:
        """Number of records per catalog index."""
        return np.bincount(self.species_index, minlength=self.n_species)


@dataclass(frozen=True)
class RowRejection:
    """A skipped input row: 1-based line number plus the reason."""

    line: int
    reason: str


def load_observations(path) -> tuple[ObservationSet, tuple[RowRejection, ...]]:
    """Read a CSV of observations, reporting malformed rows instead of failing.

    The file must have a header naming at least ``species_id``, ``lon`` and
    ``lat`` (extra columns are ignored). Rows with unparseable or
    out-of-range coordinates, or the wrong field count, are returned as
    :class:`RowRejection` entries; everything else becomes the corpus.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty observations file") from None
        cols = {}
        for name in ("species_id", "lon", "lat"):
            if name not in header:
                raise ValueError(f"{path}: missing required column {name!r}")
            cols[name] = header.index(name)
        need = max(cols.values()) + 1

        catalog: dict[str, int] = {}
        sp, lons, lats = [], [], []
        rejected: list[RowRejection] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < need:
                rejected.append(RowRejection(line_no, "too few fields"))
                continue
            sid = row[cols["species_id"]].strip()
            if not sid:
                rejected.append(RowRejection(line_no, "empty species_id"))
                continue
            try:
                lon = float(row[cols["lon"]])
                lat = float(row[cols["lat"]])
            except ValueError:
                rejected.append(RowRejection(line_no, "unparseable coordinate"))
                continue
            if not (np.isfinite(lon) and np.isfinite(lat)):
                rejected.append(RowRejection(line_no, "non-finite coordinate"))
                continue
            if not (LON_MIN <= lon <= LON_MAX and LAT_MIN <= lat <= LAT_MAX):
                rejected.append(RowRejection(line_no, "coordinate out of range"))
                continue
            if sid not in catalog:
                catalog[sid] = len(catalog)
            sp.append(catalog[sid])
            lons.append(lon)
            lats.append(lat)

    obs = ObservationSet(
        species_ids=tuple(catalog),
        species_index=np.asarray(sp, dtype=np.int64),
        lons=np.asarray(lons, dtype=np.float64),
        lats=np.asarray(lats, dtype=np.float64),
    )
    return obs, tuple(rejected)


def save_observations(obs: ObservationSet, path) -> None:
    """Write a corpus back to CSV; floats use ``repr`` so reloads are lossless."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["species_id", "lon", "lat"])
        for i in range(obs.n_records):
            writer.writerow(
                [
                    obs.species_ids[obs.species_index[i]],
                    repr(float(obs.lons[i])),
                    repr(float(obs.lats[i])),
                ]
            )


def _take_records(obs: ObservationSet, keep_species: np.ndarray) -> ObservationSet:
    """Restrict to a boolean species mask, preserving orders and re-densifying."""
    new_ids = tuple(s for s, k in zip(obs.species_ids, keep_species) if k)
    remap = np.full(obs.n_species, -1, dtype=np.int64)
    remap[keep_species] = np.arange(len(new_ids))
    rec_keep = keep_species[obs.species_index]
    return ObservationSet(
        species_ids=new_ids,
        species_index=remap[obs.species_index[rec_keep]],
        lons=obs.lons[rec_keep],
        lats=obs.lats[rec_keep],
    )


def filter_min_count(obs: ObservationSet, min_count: int) -> ObservationSet:
    """Drop species with fewer than ``min_count`` records (and their records)."""
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    return _take_records(obs, obs.counts() >= min_count)


def subsample_cap(obs: ObservationSet, cap: int, seed: int) -> ObservationSet:
    """Cap each species at ``cap`` records, chosen uniformly without replacement.

    Species with at most ``cap`` records keep everything. Selection draws a
    seeded permutation per species and keeps its first ``cap`` entries, so
    for a fixed seed the cap-``k`` subsample is contained in the
    cap-``k+1`` subsample. Record order is preserved.
    """
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    order = np.argsort(obs.species_index, kind="stable")
    boundaries = np.searchsorted(obs.species_index[order], np.arange(obs.n_species + 1))
    chosen: list[np.ndarray] = []
    for s in range(obs.n_species):
        group = order[boundaries[s] : boundaries[s + 1]]
        if group.size <= cap:
            chosen.append(group)
            continue
        rng = np.random.default_rng(np.random.SeedSequence([_seed_u64(seed), _SALT_SUBSAMPLE, s]))
        perm = rng.permutation(group.size)
        chosen.append(group[perm[:cap]])
    keep = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)
    return ObservationSet(
        species_ids=obs.species_ids,
        species_index=obs.species_index[keep],
        lons=obs.lons[keep],
        lats=obs.lats[keep],
    )


def select_species(
    obs: ObservationSet, keep_ids, n_extra: int = 0, seed: int = 0
) -> ObservationSet:
    """Restrict the corpus to ``keep_ids`` plus ``n_extra`` random other species.

    The extra species are drawn uniformly without replacement from the rest
    of the catalog; for a fixed seed the extra set grows by inclusion as
    ``n_extra`` grows. Unknown ids in ``keep_ids`` are an error.
    """
    keep_ids = list(keep_ids)
    index = {s: i for i, s in enumerate(obs.species_ids)}
    missing = [s for s in keep_ids if s not in index]
    if missing:
        raise ValueError(f"unknown species ids: {missing}")
    if n_extra < 0:
        raise ValueError(f"n_extra must be >= 0, got {n_extra}")
    keep = np.zeros(obs.n_species, dtype=bool)
    keep[[index[s] for s in keep_ids]] = True
    candidates = np.flatnonzero(~keep)
    if n_extra > candidates.size:
        raise ValueError(
            f"n_extra={n_extra} exceeds the {candidates.size} species outside keep_ids"
        )
    if n_extra:
        rng = np.random.default_rng(np.random.SeedSequence([_seed_u64(seed), _SALT_SELECT]))
        keep[candidates[rng.permutation(candidates.size)[:n_extra]]] = True
    return _take_records(obs, keep)


# ---------------------------------------------------------------------------
# Environmental rasters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvRasterStack:
    """Normalized environmental layers on a shared regular lon/lat grid.

    ``values`` has shape ``(n_layers, n_rows, n_cols)`` with row 0 the
    northernmost band (file order). Normalization statistics are kept so the
    transform is auditable: ``means``/``stds`` hold the per-layer mean and
    population standard deviation of the non-missing raw cells. Missing
    cells carry value 0 and are flagged in ``missing``; a constant layer
    (zero deviation) normalizes to all zeros.
    """

    values: np.ndarray
    missing: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    @property
    def n_layers(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[1])

    @property
    def n_cols(self) -> int:
        return int(self.values.shape[2])

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def cell_width(self) -> float:
        return (self.lon_max - self.lon_min) / self.n_cols

    @property
    def cell_height(self) -> float:
        return (self.lat_max - self.lat_min) / self.n_rows

    def lookup_batch(self, lons: np.ndarray, lats: np.ndarray) -> np.ndarray:
        """Feature rows ``(n, n_layers)`` for the cells containing each point.

        Points must lie inside the raster bounds (inclusive); the maximum
        edge in each axis maps into the last row/column.
        """
        lons = np.asarray(lons, dtype=np.float64)
        lats = np.asarray(lats, dtype=np.float64)
        ok = (
            (lons >= self.lon_min) & (lons <= self.lon_max)
            & (lats >= self.lat_min) & (lats <= self.lat_max)
        )
        if not np.all(ok):
            i = int(np.flatnonzero(~ok)[0])
            raise ValueError(
                f"point ({lons[i]}, {lats[i]}) outside raster bounds "
                f"[{self.lon_min}, {self.lon_max}] x [{self.lat_min}, {self.lat_max}]"
            )
        cols = np.minimum(
            ((lons - self.lon_min) // self.cell_width).astype(np.int64), self.n_cols - 1
        )
        rows = np.minimum(
            ((self.lat_max - lats) // self.cell_height).astype(np.int64), self.n_rows - 1
        )
        return self.values[:, rows, cols].T

    def cell_centroids(self, cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Centroid ``(lons, lats)`` of flat row-major cell indices."""
        cells = np.asarray(cells, dtype=np.int64)
        if cells.size and (cells.min() < 0 or cells.max() >= self.n_cells):
            raise ValueError(f"cell index outside [0, {self.n_cells})")
        rows, cols = np.divmod(cells, self.n_cols)
        lons = self.lon_min + (cols + 0.5) * self.cell_width
        lats = self.lat_max - (rows + 0.5) * self.cell_height
        return lons, lats

    def layer_at_cells(self, layer: int, cells: np.ndarray) -> np.ndarray:
        """Normalized values of one layer at flat row-major cell indices."""
        cells = np.asarray(cells, dtype=np.int64)
        return self.values[layer].reshape(-1)[cells]

    def fully_observed_cells(self) -> np.ndarray:
        """Flat indices of cells where no layer is missing."""
        return np.flatnonzero(~self.missing.any(axis=0))


def _parse_env_raster(path) -> tuple[np.ndarray, tuple[float, float, float, float]]:
    with open(path) as fh:
        tokens = fh.read().split()
    if not tokens or tokens[0] != ENV_MAGIC:
        raise ValueError(f"{path}: not an {ENV_MAGIC} file")
    if len(tokens) < 7:
        raise ValueError(f"{path}: truncated header")
    try:
        n_rows, n_cols = int(tokens[1]), int(tokens[2])
        bounds = tuple(float(t) for t in tokens[3:7])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed header: {exc}") from None
    lon_min, lon_max, lat_min, lat_max = bounds
    if n_rows < 1 or n_cols < 1:
        raise ValueError(f"{path}: grid must have at least one row and column")
    if not (LON_MIN <= lon_min < lon_max <= LON_MAX and LAT_MIN <= lat_min < lat_max <= LAT_MAX):
        raise ValueError(f"{path}: invalid bounds {bounds}")
    body = tokens[7:]
    if len(body) != n_rows * n_cols:
        raise ValueError(
            f"{path}: expected {n_rows * n_cols} cell values, found {len(body)}"
        )
    grid = np.empty(n_rows * n_cols, dtype=np.float64)
    for i, tok in enumerate(body):
        if tok == _ENV_MISSING_TOKEN:
            grid[i] = np.nan
        else:
            try:
                grid[i] = float(tok)
            except ValueError:
                raise ValueError(f"{path}: unparseable cell value {tok!r}") from None
            if not np.isfinite(grid[i]):
                raise ValueError(f"{path}: non-finite cell value {tok!r}")
    return grid.reshape(n_rows, n_cols), bounds


def load_env_rasters(paths) -> EnvRasterStack:
    """Load one or more raster files into a normalized feature stack.

    All files must agree on grid shape and bounds. Each layer is z-scored
    using the mean and population standard deviation of its non-missing
    cells; missing cells (and entire constant layers) become zero.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one raster file")
    grids, bounds_list = zip(*(_parse_env_raster(p) for p in paths))
    shapes = {g.shape for g in grids}
    if len(shapes) != 1 or len(set(bounds_list)) != 1:
        raise ValueError("raster layers disagree on grid shape or bounds")
    raw = np.stack(grids)
    missing = np.isnan(raw)
    e = raw.shape[0]
    means = np.zeros(e)
    stds = np.zeros(e)
    values = np.zeros_like(raw)
    for i in range(e):
        good = raw[i][~missing[i]]
        if good.size == 0:
            raise ValueError(f"{paths[i]}: raster layer has no observed cells")
        means[i] = good.mean()
        stds[i] = good.std()
        if stds[i] > 0:
            values[i] = np.where(missing[i], 0.0, (raw[i] - means[i]) / stds[i])
    lon_min, lon_max, lat_min, lat_max = bounds_list[0]
    return EnvRasterStack(
        values=values,
        missing=missing,
        means=means,
        stds=stds,
        lon_min=lon_min,
        lon_max=lon_max,
        lat_min=lat_min,
        lat_max=lat_max,
    )


def write_env_raster(path, grid: np.ndarray, bounds: tuple[float, float, float, float]) -> None:
    """Write one raw raster layer (NaN marks missing cells) in the text format."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"grid must be 2-D, got shape {grid.shape}")
    lon_min, lon_max, lat_min, lat_max = bounds
    with open(path, "w") as fh:
        fh.write(
            f"{ENV_MAGIC} {grid.shape[0]} {grid.shape[1]} "
            f"{repr(float(lon_min))} {repr(float(lon_max))} "
            f"{repr(float(lat_min))} {repr(float(lat_max))}\n"
        )
        for row in grid:
            fh.write(
                " ".join(
                    _ENV_MISSING_TOKEN if np.isnan(v) else repr(float(v)) for v in row
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    """How training examples are selected and batches are assembled.

    ``cap_per_species`` (when set) subsamples each species down to at most
    that many records before training, using ``subsample_seed`` so that the
    retained subset is reproducible and nested across cap values.
    """

    batch_size: int
    input_layout: InputLayout = InputLayout.COORDS
    cap_per_species: int | None = None
    subsample_seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.cap_per_species is not None and self.cap_per_species < 1:
            raise ValueError(
                f"cap_per_species must be >= 1 when set, got {self.cap_per_species}"
            )
        if not (-(2**63) <= int(self.subsample_seed) < 2**64):
            raise ValueError("subsample_seed must fit in 64 bits")
        object.__setattr__(self, "input_layout", InputLayout(self.input_layout))


def assemble_inputs(
    lons: np.ndarray,
    lats: np.ndarray,
    layout: InputLayout,
    env: EnvRasterStack | None = None,
) -> np.ndarray:
    """Build the float32 model-input matrix for a batch of locations.

    The environmental block (when present) comes first, the coordinate
    encoding last. Layouts with environmental features require ``env``.
    """
    layout = InputLayout(layout)
    if layout is InputLayout.COORDS:
        return encode_locations(lons, lats).astype(np.float32)
    if env is None:
        raise ValueError(f"input layout {layout.value!r} requires environmental rasters")
    feats = env.lookup_batch(lons, lats)
    if layout is InputLayout.ENV:
        return feats.astype(np.float32)
    return np.concatenate([feats, encode_locations(lons, lats)], axis=1).astype(np.float32)


def sample_batch(
    obs: ObservationSet,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    env: EnvRasterStack | None = None,
) -> tuple[np.ndarray, BatchTargets, np.ndarray]:
    """Draw a training batch of records uniformly with replacement.

    Returns the input matrix, the positive-species targets, and the raw
    ``(batch, 2)`` lon/lat coordinates of the drawn records.
    """
    if obs.n_records == 0:
        raise ValueError("cannot sample from an empty observation set")
    idx = rng.integers(0, obs.n_records, size=cfg.batch_size)
    lons = obs.lons[idx]
    lats = obs.lats[idx]
    x = assemble_inputs(lons, lats, cfg.input_layout, env)
    targets = BatchTargets(obs.species_index[idx], obs.n_species)
    return x, targets, np.column_stack([lons, lats])


def sample_uniform_locations(
    n: int,
    rng: np.random.Generator,
    bounds: tuple[float, float, float, float] = (LON_MIN, LON_MAX, LAT_MIN, LAT_MAX),
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` locations uniformly over a lon/lat rectangle (default: globe).

    Longitudes are drawn first, then latitudes, each as one vectorized call,
    so the stream consumed from ``rng`` is well defined.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    lon_min, lon_max, lat_min, lat_max = bounds
    lons = rng.uniform(lon_min, lon_max, size=n)
    lats = rng.uniform(lat_min, lat_max, size=n)
    return lons, lats
