"""Per-bin uncertainty models fitted to observation sets, and their serialization."""

from __future__ import annotations

import cmath
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from anckit import geometry
from anckit.errors import ConfigurationError, DataFormatError, FitError, SchemaError
from anckit.geometry import ConvexHull2D, Disk, Ellipse, MultiDisk
from anckit.sigproc import FrequencyGrid

log = logging.getLogger(__name__)

MODEL_VERSION = "1"
KINDS = ("norm_bounded", "multi_disk", "elliptic", "convex_hull")
_MIN_OBSERVATIONS = {"norm_bounded": 1, "multi_disk": 1, "elliptic": 2, "convex_hull": 3}
GUARD_DIRECTIONS = 8
DEFAULT_GUARD_BAND = 0.1
_KIND_TYPES = {"norm_bounded": Disk, "multi_disk": MultiDisk, "elliptic": Ellipse,
               "convex_hull": ConvexHull2D}


@dataclass(frozen=True)
class UncertaintyModel:
    kind: str
    grid: FrequencyGrid
    bins: tuple
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        bins = tuple(self.bins)
        if len(bins) != self.grid.num_bins:
            raise ConfigurationError(
                f"{len(bins)} bin models for a grid of {self.grid.num_bins} bins")
        object.__setattr__(self, "bins", bins)

    def __len__(self):
        return len(self.bins)

    def areas(self) -> np.ndarray:
        return np.array([geometry.area(m) for m in self.bins])

    def check_enclosure(self, responses: np.ndarray, rel_tol: float = 1e-9) -> None:
        """Raise :class:`FitError` at the first bin whose model misses an observation."""
        responses = np.atleast_2d(responses)
        for k, m in enumerate(self.bins):
            pts = responses[:, k]
            tol = rel_tol * max(geometry.spread(pts), float(np.max(np.abs(pts))), 1e-300)
            inside = geometry.contains(m, pts, tol=tol)
            if not np.all(inside):
                i = int(np.argmin(inside))
                raise FitError(f"bin {k}: observation {i} lies outside the "
                               f"{self.kind} model", bin_index=k)


def _fit_bin(kind: str, pts: np.ndarray, num_disks: int):
    if kind == "norm_bounded":
        return geometry.smallest_circle(pts)
    if kind == "multi_disk":
        return geometry.fit_multi_disk(pts, num_disks)
    if kind == "convex_hull":
        return geometry.convex_hull(pts)
    raise AssertionError(kind)


def _hull_vertices_padded(points: np.ndarray) -> np.ndarray:
    """Keep only each row's hull vertices (the enclosing ellipse depends on no others).

    Rows are padded by repeating their first vertex so they stay batchable;
    the per-row vertex counts are returned alongside.
    """
    rows = [np.asarray(geometry.convex_hull(pts).vertices) for pts in points]
    width = max(r.size for r in rows)
    padded = np.array([np.concatenate([r, np.full(width - r.size, r[0])]) for r in rows])
    return padded, np.array([r.size for r in rows])


def fit_models(obs, kind: str, num_disks: int = 6, ellipse_tol: float = 1e-7,
               seed: int = 0, guard_band: float = DEFAULT_GUARD_BAND) -> UncertaintyModel:
    """Fit one ``kind`` geometry per bin to the observed responses.

    ``guard_band`` surrounds every observation by a regular octagon of radius
    ``guard_band`` times the bin's observation radius (largest distance from the
    mean response) before fitting.  All kinds see the same augmented cloud, so
    nesting and area ordering are preserved, and the constraints keep a margin
    that covers the responses between grid bins.
    """
    if guard_band < 0:
        raise ConfigurationError("guard_band must be non-negative")
    if kind not in KINDS:
        raise ConfigurationError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    m = obs.responses.shape[0]
    if m < _MIN_OBSERVATIONS[kind]:
        raise ConfigurationError(
            f"{kind} needs at least {_MIN_OBSERVATIONS[kind]} observations, got {m}")
    points = obs.responses.T  # (K, M)
    if guard_band > 0:
        radius = np.max(np.abs(points - points.mean(axis=1, keepdims=True)), axis=1)
        ring = np.exp(2j * np.pi * np.arange(GUARD_DIRECTIONS) / GUARD_DIRECTIONS)
        points = (points[:, :, None] + (guard_band * radius)[:, None, None] * ring
                  ).reshape(points.shape[0], -1)
    if kind == "elliptic":
        counts = None
        if guard_band > 0:
            points, counts = _hull_vertices_padded(points)
        try:
            bins = geometry.min_area_ellipses(points, tol=ellipse_tol, counts=counts)
        except (np.linalg.LinAlgError, ConfigurationError) as exc:
            raise FitError(f"ellipse fitting failed: {exc}") from exc
    else:
        bins = []
        for k, pts in enumerate(points):
            try:
                bins.append(_fit_bin(kind, pts, num_disks))
            except (ConfigurationError, ValueError, ZeroDivisionError) as exc:
                raise FitError(f"bin {k}: {exc}", bin_index=k) from exc
    provenance = {"num_observations": m, "ellipse_tol": ellipse_tol,
                  "num_disks": num_disks, "seed": seed, "guard_band": guard_band}
    model = UncertaintyModel(kind, obs.grid, bins, provenance)
    model.check_enclosure(obs.responses)
    return model


def transform_model(bin_model, C: complex):
    """Image of a bin model under multiplication by the complex gain ``C``."""
    C = complex(C)
    if not cmath.isfinite(C):
        raise ConfigurationError("transform gain must be finite")
    if C == 0:
        log.warning("zero gain collapses the model to the origin (degenerate)")
        if isinstance(bin_model, MultiDisk):
            return MultiDisk(tuple(Disk(0, 0) for _ in bin_model.disks), 0)
        return Disk(0, 0)
    mag, ang = abs(C), cmath.phase(C)
    if isinstance(bin_model, Disk):
        return Disk(C * bin_model.center, mag * bin_model.radius)
    if isinstance(bin_model, MultiDisk):
        return MultiDisk(tuple(transform_model(d, C) for d in bin_model.disks),
                         C * bin_model.anchor)
    if isinstance(bin_model, Ellipse):
        return Ellipse(C * bin_model.center, mag * bin_model.a, mag * bin_model.b,
                       bin_model.theta + ang)
    if isinstance(bin_model, ConvexHull2D):
        angles = np.angle(np.exp(1j * (bin_model.angles + ang)))
        return ConvexHull2D(angles, mag * bin_model.offsets, C * bin_model.vertices)
    raise TypeError(f"unsupported model {type(bin_model).__name__}")


# -- serialization -----------------------------------------------------------

def _c(z) -> list:
    return [float(z.real), float(z.imag)]


def _z(pair) -> complex:
    return complex(float(pair[0]), float(pair[1]))


def bin_to_dict(m) -> dict:
    if isinstance(m, Disk):
        return {"c": _c(m.center), "r": m.radius}
    if isinstance(m, Ellipse):
        return {"c": _c(m.center), "a": m.a, "b": m.b, "theta": m.theta}
    if isinstance(m, ConvexHull2D):
        return {"vertices": [_c(v) for v in m.vertices],
                "angles": [float(x) for x in m.angles],
                "offsets": [float(x) for x in m.offsets]}
    if isinstance(m, MultiDisk):
        return {"anchor": _c(m.anchor), "disks": [bin_to_dict(d) for d in m.disks]}
    raise TypeError(type(m).__name__)


def bin_from_dict(kind: str, d: dict):
    if kind == "norm_bounded":
        return Disk(_z(d["c"]), d["r"])
    if kind == "elliptic":
        return Ellipse(_z(d["c"]), d["a"], d["b"], d["theta"])
    if kind == "convex_hull":
        return ConvexHull2D(d["angles"], d["offsets"], [_z(v) for v in d["vertices"]])
    if kind == "multi_disk":
        return MultiDisk(tuple(Disk(_z(x["c"]), x["r"]) for x in d["disks"]), _z(d["anchor"]))
    raise ConfigurationError(kind)


def model_to_dict(model: UncertaintyModel) -> dict:
    return {"version": MODEL_VERSION, "kind": model.kind, "grid": model.grid.to_dict(),
            "bins": [dict(k=k, **bin_to_dict(m)) for k, m in enumerate(model.bins)],
            "provenance": model.provenance}


def save_model(model: UncertaintyModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> UncertaintyModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    found = str(doc.get("version"))
    if found != MODEL_VERSION:
        raise SchemaError(f"{path}: expected model version {MODEL_VERSION}, found {found}")
    kind = doc.get("kind")
    if kind not in KINDS:
        raise SchemaError(f"{path}: unknown model kind {kind!r}")
    grid = FrequencyGrid.from_dict(doc["grid"])
    records = {}
    for rec in doc["bins"]:
        records[int(rec["k"])] = rec
    missing = [k for k in range(grid.num_bins) if k not in records]
    if missing:
        raise DataFormatError(f"{path}: missing model for bin {missing[0]}"
                              + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    bins = [bin_from_dict(kind, records[k]) for k in range(grid.num_bins)]
    return UncertaintyModel(kind, grid, bins, doc.get("provenance", {}))
