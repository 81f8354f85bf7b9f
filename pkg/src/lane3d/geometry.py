"""3D lane representation, fixed anchor family, decoding, and resampling.

Frame convention: ego-vehicle frame with y forward (the longitudinal
stations), x lateral, z up, every coordinate in meters.  Anchors are
straight axis-parallel rays on the ground plane: constant base lateral
per anchor, base height 0; all curvature lives in the predicted offsets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

DEFAULT_LATERAL_SPAN = (-10.0, 10.0)
DEFAULT_NUM_ANCHORS = 40
DEFAULT_STATIONS = np.linspace(3.0, 103.0, 20)
VISIBILITY_THRESHOLD = 0.5


@dataclass(frozen=True)
class Lane3D:
    """One lane sampled at longitudinal stations.

    visibility is a soft score in [0,1] per station; thresholding is the
    consumer's job (see ``visible_mask``).
    """

    stations: np.ndarray
    x: np.ndarray
    z: np.ndarray
    visibility: np.ndarray
    category: int

    def __post_init__(self):
        object.__setattr__(self, "stations", np.asarray(self.stations, dtype=np.float64))
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "z", np.asarray(self.z, dtype=np.float64))
        object.__setattr__(self, "visibility", np.asarray(self.visibility, dtype=np.float64))
        n = self.stations.shape[0]
        if self.x.shape != (n,) or self.z.shape != (n,) or self.visibility.shape != (n,):
            raise ValueError("Lane3D: stations, x, z, visibility must share one length")
        if n >= 2 and not np.all(np.diff(self.stations) > 0):
            raise ValueError("Lane3D: stations must be strictly increasing")
        if np.any(self.visibility < 0.0) or np.any(self.visibility > 1.0):
            raise ValueError("Lane3D: visibility must lie in [0, 1]")

    def visible_mask(self, threshold: float = VISIBILITY_THRESHOLD) -> np.ndarray:
        return self.visibility >= threshold

    def points(self) -> np.ndarray:
        """All stations as (n, 3) points in (x, y, z) order."""
        return np.stack([self.x, self.stations, self.z], axis=1)

    def to_dict(self) -> dict:
        return {
            "stations": self.stations.tolist(),
            "x": self.x.tolist(),
            "z": self.z.tolist(),
            "visibility": self.visibility.tolist(),
            "category": int(self.category),
        }

    @staticmethod
    def from_dict(d: dict) -> "Lane3D":
        return Lane3D(
            stations=d["stations"],
            x=d["x"],
            z=d["z"],
            visibility=d["visibility"],
            category=int(d["category"]),
        )


@dataclass(frozen=True)
class AnchorSet:
    """Fixed straight anchors sharing one station list.

    base_x is (K, S): constant along stations for each anchor; base_z is
    (K, S) and zero for the default ground-plane layout.
    """

    stations: np.ndarray
    base_x: np.ndarray
    base_z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "stations", np.asarray(self.stations, dtype=np.float64))
        object.__setattr__(self, "base_x", np.asarray(self.base_x, dtype=np.float64))
        object.__setattr__(self, "base_z", np.asarray(self.base_z, dtype=np.float64))
        if self.base_x.ndim != 2 or self.base_x.shape != self.base_z.shape:
            raise ValueError("AnchorSet: base_x and base_z must be (K, S) and equal shape")
        if self.base_x.shape[1] != self.stations.shape[0]:
            raise ValueError("AnchorSet: base geometry must match station count")
        if self.base_x.shape[0] < 1:
            raise ValueError("AnchorSet: need K >= 1 anchors")
        if not np.all(np.isfinite(self.base_x)) or not np.all(np.isfinite(self.base_z)):
            raise ValueError("AnchorSet: base geometry must be finite")
        if self.stations.shape[0] >= 2 and not np.all(np.diff(self.stations) > 0):
            raise ValueError("AnchorSet: stations must be strictly increasing")

    @property
    def num_anchors(self) -> int:
        return self.base_x.shape[0]

    @property
    def num_stations(self) -> int:
        return self.stations.shape[0]


@dataclass(frozen=True)
class AnchorPrediction:
    """Raw per-anchor network outputs before decoding."""

    anchor_index: int
    delta_x: np.ndarray
    delta_z: np.ndarray
    visibility_logits: np.ndarray
    class_logits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "delta_x", np.asarray(self.delta_x, dtype=np.float64))
        object.__setattr__(self, "delta_z", np.asarray(self.delta_z, dtype=np.float64))
        object.__setattr__(
            self, "visibility_logits", np.asarray(self.visibility_logits, dtype=np.float64)
        )
        object.__setattr__(self, "class_logits", np.asarray(self.class_logits, dtype=np.float64))
        n = self.delta_x.shape[0]
        if self.delta_z.shape != (n,) or self.visibility_logits.shape != (n,):
            raise ValueError("AnchorPrediction: offset and logit lists must share one length")


def build_default_anchors(
    num_anchors: int = DEFAULT_NUM_ANCHORS,
    lateral_span: tuple[float, float] = DEFAULT_LATERAL_SPAN,
    stations=None,
) -> AnchorSet:
    """Straight anchors evenly spaced across the lateral span, height 0.

    A single anchor sits at the span midpoint; K >= 2 includes both span
    endpoints, so the spacing is (hi - lo) / (K - 1).
    """
    if num_anchors < 1:
        raise ValueError("build_default_anchors: need at least one anchor")
    lo, hi = float(lateral_span[0]), float(lateral_span[1])
    if not hi > lo:
        raise ValueError("build_default_anchors: lateral span must be increasing")
    stations = np.asarray(
        DEFAULT_STATIONS if stations is None else stations, dtype=np.float64
    )
    if stations.ndim != 1 or stations.shape[0] < 1:
        raise ValueError("build_default_anchors: stations must be a non-empty 1-d list")
    if stations.shape[0] >= 2 and not np.all(np.diff(stations) > 0):
        raise ValueError("build_default_anchors: stations must be strictly increasing")
    if num_anchors == 1:
        laterals = np.array([0.5 * (lo + hi)])
    else:
        laterals = np.linspace(lo, hi, num_anchors)
    base_x = np.repeat(laterals[:, None], stations.shape[0], axis=1)
    return AnchorSet(stations=stations, base_x=base_x, base_z=np.zeros_like(base_x))


def decode_anchor(
    anchors: AnchorSet,
    pred: AnchorPrediction,
    visibility_threshold: float = VISIBILITY_THRESHOLD,
) -> Lane3D:
    """Additive decode: x = base_x + dx, z = base_z + dz, v = sigmoid(logit).

    Stations below the visibility threshold stay in the record; callers
    filter with ``visible_mask(visibility_threshold)``.
    """
    if not 0.0 <= visibility_threshold <= 1.0:
        raise ValueError("decode_anchor: threshold must lie in [0, 1]")
    k = pred.anchor_index
    if not 0 <= k < anchors.num_anchors:
        raise IndexError(f"decode_anchor: anchor index {k} out of range")
    if pred.delta_x.shape[0] != anchors.num_stations:
        raise ValueError("decode_anchor: prediction does not match anchor stations")
    visibility = 1.0 / (1.0 + np.exp(-pred.visibility_logits))
    return Lane3D(
        stations=anchors.stations,
        x=anchors.base_x[k] + pred.delta_x,
        z=anchors.base_z[k] + pred.delta_z,
        visibility=visibility,
        category=int(np.argmax(pred.class_logits)),
    )


def encode_lane(anchors: AnchorSet, anchor_index: int, lane: Lane3D):
    """Offsets that decode back to ``lane`` on the anchor's stations."""
    if lane.stations.shape != anchors.stations.shape or not np.allclose(
        lane.stations, anchors.stations
    ):
        raise ValueError("encode_lane: lane must be sampled on the anchor stations")
    return (
        lane.x - anchors.base_x[anchor_index],
        lane.z - anchors.base_z[anchor_index],
    )


def resample_lane(lane: Lane3D, target_stations) -> Lane3D:
    """Linear interpolation of x, z, v onto new stations; category kept.

    Extrapolation is refused: every target must fall inside the lane's
    station range.
    """
    target = np.asarray(target_stations, dtype=np.float64)
    if lane.stations.shape[0] < 2:
        raise ValueError("resample_lane: lane needs at least 2 stations")
    if target.ndim != 1 or target.shape[0] < 1:
        raise ValueError("resample_lane: target stations must be a non-empty 1-d list")
    lo, hi = lane.stations[0], lane.stations[-1]
    outside = (target < lo) | (target > hi)
    if np.any(outside):
        bad = target[outside][0]
        raise ValueError(
            f"resample_lane: target station {bad} outside lane range [{lo}, {hi}]"
        )
    return Lane3D(
        stations=target,
        x=np.interp(target, lane.stations, lane.x),
        z=np.interp(target, lane.stations, lane.z),
        visibility=np.interp(target, lane.stations, lane.visibility),
        category=lane.category,
    )


def lane_points_var(x: "ad.Var", stations: np.ndarray, z: "ad.Var") -> "ad.Var":
    """Differentiable (n, 3) point matrix (x, y, z) from lane coordinates."""
    y = ad.Var(np.asarray(stations, dtype=np.float64))
    return ad.stack([x, y, z], axis=1)


def write_lane_file(path, lanes, config_hash: str | None = None) -> None:
    """Write lanes as a JSON document: {"lanes": [...]} plus provenance.

    Each lane object carries the normative fields stations, x, z,
    visibility (equal-length arrays) and integer category.
    """
    document = {"lanes": [lane.to_dict() for lane in lanes]}
    if config_hash is not None:
        document["config_hash"] = config_hash
    with open(path, "w") as fh:
        json.dump(document, fh, sort_keys=True)
        fh.write("\n")


def read_lane_file(path):
    """Read a lane file; accepts the wrapped form or a bare lane list."""
    with open(path) as fh:
        try:
            document = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"lane file {path}: invalid JSON ({exc})")
    entries = document.get("lanes") if isinstance(document, dict) else document
    if not isinstance(entries, list):
        raise ValueError(f"lane file {path}: expected a list of lanes")
    try:
        return [Lane3D.from_dict(entry) for entry in entries]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"lane file {path}: malformed lane entry ({exc})")
