"""Covariate engineering: distance downstream, log transforms, centring, interactions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError


@dataclass(frozen=True)
class SiteGeometry:
    site_id: int
    easting: float
    northing: float


def compute_dd(geometry: Sequence[SiteGeometry], west_anchor: int, east_anchor: int) -> dict[int, float]:
    """Distance downstream of every site.

    The signed scalar projection of ``site - west`` on the unit vector from the
    west anchor to the east anchor.  Sites projecting west of the west anchor
    get negative values.
    """
    coords = {g.site_id: np.array([g.easting, g.northing], dtype=float) for g in geometry}
    for anchor in (west_anchor, east_anchor):
        if anchor not in coords:
            raise InvalidArgumentError(f"anchor site {anchor} not in geometry")
    if not all(np.all(np.isfinite(c)) for c in coords.values()):
        raise InvalidArgumentError("site coordinates must be finite")
    axis = coords[east_anchor] - coords[west_anchor]
    length = float(np.hypot(*axis))
    if west_anchor == east_anchor or length == 0.0:
        raise InvalidArgumentError("west and east anchors must be distinct points")
    unit = axis / length
    origin = coords[west_anchor]
    return {s: float((c - origin) @ unit) for s, c in coords.items()}


def default_anchors(geometry: Sequence[SiteGeometry]) -> tuple[int, int]:
    """Western-most and eastern-most sites (ties broken by site id)."""
    west = min(geometry, key=lambda g: (g.easting, g.site_id))
    east = max(geometry, key=lambda g: (g.easting, -g.site_id))
    return west.site_id, east.site_id


@dataclass(frozen=True)
class CentredColumn:
    values: np.ndarray
    constant: float


def center(column, constant: float | None = None) -> CentredColumn:
    """Subtract ``constant`` (default: the exact sample mean) and record it."""
    column = np.asarray(column, dtype=float)
    if column.size == 0:
        raise InvalidArgumentError("cannot centre an empty column")
    if constant is None:
        constant = float(column.mean())
    return CentredColumn(column - constant, float(constant))


def interaction(col_a: CentredColumn, col_b: CentredColumn) -> np.ndarray:
    """Product of two centred covariates; deliberately not re-centred."""
    if not isinstance(col_a, CentredColumn) or not isinstance(col_b, CentredColumn):
        raise InvalidArgumentError("interactions are defined only between centred columns")
    if col_a.values.shape != col_b.values.shape:
        raise InvalidArgumentError("interaction columns differ in length")
    return col_a.values * col_b.values


def correlation_matrix(columns: Mapping[str, Sequence[float]]) -> tuple[list[str], np.ndarray]:
    """Pearson correlations among named columns."""
    names = list(columns)
    X = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
    if X.shape[0] < 2:
        raise InvalidArgumentError("correlation needs at least two observations")
    for j, n in enumerate(names):
        if np.ptp(X[:, j]) == 0:
            raise DegenerateInputError(f"column {n!r} has zero variance")
    R = np.corrcoef(X, rowvar=False)
    R = np.clip(0.5 * (R + R.T), -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return names, R


@dataclass
class CovariateTable:
    """Per-site covariates, raw and engineered, aligned with ``site_ids``.

    ``centring`` records the constant subtracted from each centred column so
    the same transformation can be replayed for prediction.
    """

    site_ids: tuple[int, ...]
    columns: dict[str, np.ndarray] = field(default_factory=dict)
    centring: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.site_ids = tuple(self.site_ids)
        for name, col in list(self.columns.items()):
            self.add(name, col)

    def add(self, name: str, values) -> None:
        arr = np.asarray(values, dtype=float)
        if arr.shape != (len(self.site_ids),):
            raise InvalidArgumentError(f"column {name!r} has {arr.size} values for {len(self.site_ids)} sites")
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError(f"column {name!r} has missing or non-finite values")
        self.columns[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __contains__(self, name: str) -> bool:
        return name in self.columns


RAW_LOG_COLUMNS = {"depth": "log_depth", "sc": "log_sc"}
INTERACTION_SEP = "_x_"


def engineer(
    table: CovariateTable,
    dd: Mapping[int, float] | None = None,
    interactions: Sequence[tuple[str, str]] = (),
    constants: Mapping[str, float] | None = None,
) -> CovariateTable:
    """Build the model-ready covariate table.

    Adds ``dd`` (when given), natural logs of depth and silt-clay fraction,
    centres every non-interaction column, then forms centred interactions
    named ``a_x_b``.  The returned table holds centred columns under the
    plain names; raw values are kept as ``raw_<name>``.
    """
    constants = dict(constants or {})
    raw: dict[str, np.ndarray] = {name: col for name, col in table.columns.items()}
    if dd is not None:
        missing = [s for s in table.site_ids if s not in dd]
        if missing:
            raise InvalidArgumentError(f"no geometry for sites {missing}")
        raw["dd"] = np.array([dd[s] for s in table.site_ids])
    if "sc" in raw and np.any((raw["sc"] <= 0) | (raw["sc"] > 1)):
        raise InvalidArgumentError("silt-clay fraction must lie in (0, 1]")
    if "depth" in raw and np.any(raw["depth"] <= 0):
        raise InvalidArgumentError("depth must be positive")
    for src, dst in RAW_LOG_COLUMNS.items():
        if src in raw:
            raw[dst] = np.log(raw[src])
    out = CovariateTable(table.site_ids)
    centred: dict[str, CentredColumn] = {}
    for name, col in raw.items():
        c = center(col, constants.get(name))
        centred[name] = c
        out.add(name, c.values)
        out.add(f"raw_{name}", col)
        out.centring[name] = c.constant
    for a, b in interactions:
        for n in (a, b):
            if n not in centred:
                raise InvalidArgumentError(f"interaction term {n!r} is not a covariate")
        out.add(f"{a}{INTERACTION_SEP}{b}", interaction(centred[a], centred[b]))
    return out


def parse_interaction(name: str) -> tuple[str, str] | None:
    if INTERACTION_SEP not in name:
        return None
    a, b = name.split(INTERACTION_SEP, 1)
    return a, b
