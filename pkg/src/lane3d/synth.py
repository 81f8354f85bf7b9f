"""Seeded synthetic driving scenes for training and evaluation.

World lanes are quadratic in plan view, x(u) = c0 + c1*u + c2*u^2, with
linear height z(u) = h0 + h1*u, defined over a longitudinal extent
[u_min, u_max] (outside it the lane is invisible).  The ego vehicle
advances through the world over T frames; each frame's ground truth is
the same world lanes re-expressed exactly (closed form, no polyline
approximation) in that frame's ego coordinates at the anchor stations.

Per-anchor features are a documented linear embedding of each anchor's
true offsets, visibility, and class, plus Gaussian noise that is drawn
independently per frame — the one condition under which temporal fusion
has signal to exploit.  All geometry is drawn before any noise, so a
noise-free twin with the same seed carries identical lanes and poses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import AnchorSet, Lane3D, build_default_anchors
from .heads import assign_targets

# feature layout scales: lateral offsets are compressed so that feature
# noise of sigma decodes to ~sigma/X_SCALE meters of lateral error.
# At the default sigma=0.25 one frame decodes to ~2 m of error, beyond
# the matching threshold; averaging frames is what buys reliability.
X_SCALE = 0.125
Z_SCALE = 1.0

BACKGROUND_CLASS = 0


@dataclass(frozen=True)
class SceneConfig:
    """Everything that parameterizes scene generation (seed lives apart)."""

    num_lanes_range: tuple = (2, 4)
    lateral_offset_range: tuple = (-8.0, 8.0)
    slope_range: tuple = (-0.02, 0.02)
    curvature_range: tuple = (-0.004, 0.004)
    height_range: tuple = (-0.2, 0.2)
    height_slope_range: tuple = (-0.005, 0.005)
    extent_start_range: tuple = (-5.0, 25.0)
    extent_length_range: tuple = (50.0, 110.0)
    min_lane_separation: float = 2.5
    noise_sigma: float = 0.25
    ego_speed_range: tuple = (8.0, 15.0)
    yaw_rate_range: tuple = (-0.02, 0.02)
    frame_gap: float = 0.1
    num_frames: int = 3
    num_anchors: int = 40
    channels: int = 128
    num_classes: int = 5  # background + 4 lane categories
    lateral_span: tuple = (-10.0, 10.0)
    stations: tuple = tuple(np.linspace(3.0, 103.0, 20))

    def __post_init__(self):
        for name in (
            "num_lanes_range",
            "lateral_offset_range",
            "slope_range",
            "curvature_range",
            "height_range",
            "height_slope_range",
            "extent_start_range",
            "extent_length_range",
            "ego_speed_range",
            "yaw_rate_range",
            "lateral_span",
        ):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"SceneConfig: {name} must be (lo, hi) with lo <= hi")
        if self.num_lanes_range[0] < 1:
            raise ValueError("SceneConfig: need at least one lane")
        if self.num_frames < 1 or self.num_anchors < 1:
            raise ValueError("SceneConfig: num_frames and num_anchors must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("SceneConfig: noise sigma must be non-negative")
        if self.frame_gap <= 0:
            raise ValueError("SceneConfig: frame gap must be positive")
        if self.num_classes < 2:
            raise ValueError("SceneConfig: need background plus >= 1 lane class")
        st = np.asarray(self.stations, dtype=np.float64)
        if st.ndim != 1 or st.shape[0] < 1 or (st.shape[0] > 1 and not np.all(np.diff(st) > 0)):
            raise ValueError("SceneConfig: stations must be strictly increasing")
        object.__setattr__(self, "stations", tuple(float(s) for s in st))
        needed = 3 * st.shape[0] + self.num_classes
        if self.channels < needed:
            raise ValueError(
                f"SceneConfig: channels {self.channels} below the {needed} needed by the encoding"
            )

    @property
    def num_stations(self) -> int:
        return len(self.stations)

    def anchors(self) -> AnchorSet:
        return build_default_anchors(
            self.num_anchors, self.lateral_span, np.asarray(self.stations)
        )

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            out[name] = list(value) if isinstance(value, tuple) else value
        return out

    @staticmethod
    def from_dict(d: dict) -> "SceneConfig":
        kwargs = {}
        for name, f in SceneConfig.__dataclass_fields__.items():
            if name in d:
                value = d[name]
                kwargs[name] = tuple(value) if isinstance(value, list) else value
        return SceneConfig(**kwargs)


@dataclass(frozen=True)
class WorldLane:
    """One lane in world coordinates, quadratic plan + linear height."""

    c0: float
    c1: float
    c2: float
    h0: float
    h1: float
    u_min: float
    u_max: float
    category: int

    def plan_x(self, u):
        return self.c0 + self.c1 * u + self.c2 * u * u

    def height(self, u):
        return self.h0 + self.h1 * u


@dataclass(frozen=True)
class Pose:
    """Ego pose in world coordinates; yaw rotates the heading."""

    x: float
    y: float
    yaw: float


@dataclass(frozen=True)
class FrameRecord:
    lanes: tuple
    features: np.ndarray  # (K, C)


@dataclass(frozen=True)
class SceneSequence:
    """T frames of ground truth + features under known ego motion.

    ego_motion[t] = (forward displacement, yaw change) moving from frame
    t-1 to frame t; row 0 is (0, 0).
    """

    frames: tuple
    ego_motion: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(
            self, "ego_motion", np.asarray(self.ego_motion, dtype=np.float64)
        )
        if self.ego_motion.shape != (len(self.frames), 2):
            raise ValueError("SceneSequence: ego_motion must be (T, 2)")

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def sample_lane_in_frame(lane: WorldLane, pose: Pose, stations) -> Lane3D:
    """Exact closed-form sampling of a world lane at ego-frame stations.

    For station s, the world parameter u solves the quadratic
    -sin(yaw)*c2*u^2 + (cos(yaw) - sin(yaw)*c1)*u
        - sin(yaw)*(c0 - px) - cos(yaw)*py - s = 0,
    taking the root nearest the straight-motion estimate py + s.
    Visibility is 1 where u lies inside the lane extent.
    """
    stations = np.asarray(stations, dtype=np.float64)
    sin, cos = np.sin(pose.yaw), np.cos(pose.yaw)
    a = -sin * lane.c2
    b = cos - sin * lane.c1
    c = -sin * (lane.c0 - pose.x) - cos * pose.y - stations
    guess = pose.y + stations
    if abs(a) < 1e-14:
        u = -c / b
        solved = np.ones_like(u, dtype=bool)
    else:
        disc = b * b - 4.0 * a * c
        solved = disc >= 0.0
        root = np.sqrt(np.maximum(disc, 0.0))
        u1 = (-b + root) / (2.0 * a)
        u2 = (-b - root) / (2.0 * a)
        u = np.where(np.abs(u1 - guess) <= np.abs(u2 - guess), u1, u2)
        u = np.where(solved, u, -c / b)  # linear fallback keeps values finite
    xw = lane.plan_x(u)
    lateral = cos * (xw - pose.x) + sin * (u - pose.y)
    visible = solved & (u >= lane.u_min) & (u <= lane.u_max)
    return Lane3D(
        stations=stations,
        x=lateral,
        z=lane.height(u),
        visibility=visible.astype(np.float64),
        category=lane.category,
    )


def transform_points(points: np.ndarray, forward: float, yaw_change: float) -> np.ndarray:
    """Re-express (x, y, z) ego points of frame t in frame t+1.

    The ego advances ``forward`` meters along its own heading and then
    yaws by ``yaw_change``: p' = R(-yaw_change) @ (p - (0, forward)).
    """
    pts = np.asarray(points, dtype=np.float64).copy()
    pts[:, 1] -= forward
    sin, cos = np.sin(-yaw_change), np.cos(-yaw_change)
    x = cos * pts[:, 0] - sin * pts[:, 1]
    y = sin * pts[:, 0] + cos * pts[:, 1]
    out = pts.copy()
    out[:, 0] = x
    out[:, 1] = y
    return out


def feature_encode(
    delta_x, delta_z, visibility, category: int, num_classes: int, channels: int
) -> np.ndarray:
    """Documented linear embedding of one anchor's truth into C channels.

    Layout: [delta_x * X_SCALE | delta_z * Z_SCALE | visibility |
    one-hot category | zero padding].
    """
    delta_x = np.asarray(delta_x, dtype=np.float64)
    delta_z = np.asarray(delta_z, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=np.float64)
    s = delta_x.shape[0]
    if delta_z.shape != (s,) or visibility.shape != (s,):
        raise ValueError("feature_encode: per-station arrays must share one length")
    needed = 3 * s + num_classes
    if channels < needed:
        raise ValueError(f"feature_encode: need C >= {needed}, got {channels}")
    if not 0 <= category < num_classes:
        raise ValueError("feature_encode: category out of range")
    out = np.zeros(channels)
    out[0:s] = delta_x * X_SCALE
    out[s : 2 * s] = delta_z * Z_SCALE
    out[2 * s : 3 * s] = visibility
    out[3 * s + category] = 1.0
    return out


def feature_decode(feature, num_stations: int, num_classes: int):
    """Inverse of feature_encode (exact at zero noise)."""
    feature = np.asarray(feature, dtype=np.float64)
    s = num_stations
    return (
        feature[0:s] / X_SCALE,
        feature[s : 2 * s] / Z_SCALE,
        feature[2 * s : 3 * s],
        int(np.argmax(feature[3 * s : 3 * s + num_classes])),
    )


def _draw_world_lanes(rng, config: SceneConfig):
    lo, hi = config.num_lanes_range
    count = int(rng.integers(lo, hi + 1))
    span_lo, span_hi = config.lateral_offset_range
    for _ in range(100):
        offsets = np.sort(rng.uniform(span_lo, span_hi, size=count))
        if count == 1 or np.all(np.diff(offsets) >= config.min_lane_separation):
            break
    lanes = []
    for c0 in offsets:
        start = rng.uniform(*config.extent_start_range)
        length = rng.uniform(*config.extent_length_range)
        lanes.append(
            WorldLane(
                c0=float(c0),
                c1=float(rng.uniform(*config.slope_range)),
                c2=float(rng.uniform(*config.curvature_range)),
                h0=float(rng.uniform(*config.height_range)),
                h1=float(rng.uniform(*config.height_slope_range)),
                u_min=float(start),
                u_max=float(start + length),
                category=int(rng.integers(1, config.num_classes)),
            )
        )
    return lanes


def _draw_poses(rng, config: SceneConfig):
    pose = Pose(
        x=float(rng.uniform(-0.5, 0.5)),
        y=float(rng.uniform(-1.0, 1.0)),
        yaw=float(rng.uniform(-0.05, 0.05)),
    )
    speed = float(rng.uniform(*config.ego_speed_range))
    poses = [pose]
    motion = [(0.0, 0.0)]
    for _ in range(config.num_frames - 1):
        forward = speed * config.frame_gap
        yaw_change = float(rng.uniform(*config.yaw_rate_range))
        sin, cos = np.sin(pose.yaw), np.cos(pose.yaw)
        pose = Pose(
            x=pose.x - sin * forward,
            y=pose.y + cos * forward,
            yaw=pose.yaw + yaw_change,
        )
        poses.append(pose)
        motion.append((forward, yaw_change))
    return poses, np.array(motion)


def _lateral_noise_basis(num_stations: int) -> np.ndarray:
    """Orthonormal quadratic basis over the stations, variance-calibrated.

    Columns span {1, y, y^2} on a normalized grid; the sqrt(S/3) factor
    makes the station-averaged variance of basis @ N(0, I_3) exactly 1,
    so sigma keeps its usual meaning on the lateral block.
    """
    y = np.linspace(-1.0, 1.0, num_stations)
    vander = np.stack([np.ones_like(y), y, y * y], axis=1)
    q, _ = np.linalg.qr(vander)
    return q * np.sqrt(num_stations / 3.0)


def generate_scene(seed: int, config: SceneConfig | None = None) -> SceneSequence:
    """Deterministic scene: same seed, same config, bitwise-same output.

    World lanes that lose all visible stations in any frame are dropped
    up front so every frame lists the same world lanes.  Noise is drawn
    after all geometry, so sigma only affects the feature arrays.

    Noise on the lateral-offset block is a random quadratic per anchor
    per frame (fresh coefficients every frame) rather than independent
    per station.  True lanes are quadratics too, so within one frame
    this noise is indistinguishable from lane shape and no amount of
    cross-station pooling removes it; averaging frames does.  Remaining
    channels get independent Gaussian noise of the same sigma.
    """
    config = SceneConfig() if config is None else config
    rng = np.random.default_rng(int(seed))
    anchors = config.anchors()
    stations = np.asarray(config.stations)

    world_lanes = _draw_world_lanes(rng, config)
    poses, ego_motion = _draw_poses(rng, config)

    per_frame = []
    keep = []
    for lane in world_lanes:
        sampled = [sample_lane_in_frame(lane, pose, stations) for pose in poses]
        if all(s.visibility.sum() >= 1.0 for s in sampled):
            keep.append(sampled)
    for t in range(config.num_frames):
        per_frame.append(tuple(column[t] for column in keep))

    # one anchor-to-lane assignment for the whole sequence, taken on the
    # newest frame: an anchor's feature then tracks the same world lane
    # through every frame (each frame in its own coordinates), the way a
    # backbone would pool the same anchor region with ego compensation
    assignment = assign_targets(anchors, list(per_frame[-1]))

    frames = []
    for t in range(config.num_frames):
        lanes_t = per_frame[t]
        features = np.zeros((config.num_anchors, config.channels))
        for k in range(config.num_anchors):
            lane_idx = assignment.lane_for_anchor[k]
            if lane_idx >= 0:
                lane = lanes_t[lane_idx]
                # offsets are encoded over the full analytic curve; the
                # visibility block alone says which stations count
                features[k] = feature_encode(
                    lane.x - anchors.base_x[k],
                    lane.z - anchors.base_z[k],
                    lane.visibility,
                    lane.category,
                    config.num_classes,
                    config.channels,
                )
            else:
                features[k] = feature_encode(
                    np.zeros_like(stations),
                    np.zeros_like(stations),
                    np.zeros_like(stations),
                    BACKGROUND_CLASS,
                    config.num_classes,
                    config.channels,
                )
        frames.append(FrameRecord(lanes=lanes_t, features=features))

    # noise last: the sigma=0 twin of a seed shares every lane and pose
    s = len(stations)
    basis = _lateral_noise_basis(s)
    noisy_frames = []
    for record in frames:
        coeff = rng.normal(size=(config.num_anchors, 3))
        rest = rng.normal(size=(config.num_anchors, config.channels - s))
        noise = np.concatenate([coeff @ basis.T, rest], axis=1) * config.noise_sigma
        noisy_frames.append(FrameRecord(lanes=record.lanes, features=record.features + noise))
    return SceneSequence(frames=tuple(noisy_frames), ego_motion=ego_motion, seed=int(seed))


def generate_dataset(base_seed: int, count: int, config: SceneConfig | None = None):
    """Scenes for seeds base_seed .. base_seed + count - 1."""
    return [generate_scene(base_seed + i, config) for i in range(count)]


def write_scene(scene: SceneSequence, directory, scene_id: int) -> Path:
    """One directory per scene: per-frame lane files plus a feature sidecar."""
    root = Path(directory) / f"scene_{scene_id:04d}"
    root.mkdir(parents=True, exist_ok=True)
    for t, record in enumerate(scene.frames):
        lanes_doc = [lane.to_dict() for lane in record.lanes]
        (root / f"frame_{t:02d}_lanes.json").write_text(
            json.dumps(lanes_doc, indent=1, sort_keys=True) + "\n"
        )
    sidecar = {
        "seed": scene.seed,
        "ego_motion": scene.ego_motion.tolist(),
        "features": [record.features.tolist() for record in scene.frames],
    }
    (root / "features.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
    return root


def read_scene(directory) -> SceneSequence:
    root = Path(directory)
    sidecar = json.loads((root / "features.json").read_text())
    frames = []
    for t, feats in enumerate(sidecar["features"]):
        lanes_doc = json.loads((root / f"frame_{t:02d}_lanes.json").read_text())
        frames.append(
            FrameRecord(
                lanes=tuple(Lane3D.from_dict(d) for d in lanes_doc),
                features=np.asarray(feats, dtype=np.float64),
            )
        )
    return SceneSequence(
        frames=tuple(frames),
        ego_motion=np.asarray(sidecar["ego_motion"], dtype=np.float64),
        seed=int(sidecar["seed"]),
    )
