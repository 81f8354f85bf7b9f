"""Training loop, optimizers, checkpoints, evaluation, ablation ladder.

Supervision attaches to the last frame of each scene: fused (or raw
last-frame) features pass through the heads, ground-truth lanes are
assigned to anchors, and the enabled task losses are combined either by
learned uncertainty weights or plain summation.  The curve (Chamfer)
task is multiplied by the progressive ramp weight before combination,
and its ground-truth side is resampled onto equidistant stations across
the visible extent.

Everything is deterministic given (config, seed): parameter init comes
from one seeded generator, batches follow a fixed order, and gradient
reduction order is fixed, so two runs produce bitwise-identical
checkpoints and metric tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import Lane3D, build_default_anchors, resample_lane
from .heads import HeadParameters, head_forward, assign_targets
from .losses import LossConfig, balanced_l1_vector, chamfer, combine_uncertainty, dice, focal
from .metrics import aggregate_reports, match_lanes, temporal_smoothness
from .synth import BACKGROUND_CLASS, SceneConfig
from .temporal import LstmParameters, fuse_all_anchors

TASKS = ("regression", "curve", "classification", "visibility")

PARAM_ORDER = (
    "lstm.w_ih",
    "lstm.w_hh",
    "lstm.bias",
    "lstm.proj_w",
    "lstm.proj_b",
    "head.hidden_w",
    "head.hidden_b",
    "head.offset_w",
    "head.offset_b",
    "head.vis_w",
    "head.vis_b",
    "head.cls_w",
    "head.cls_b",
    "uncertainty.s",
)

EPOCH_LOG_COLUMNS = (
    "epoch",
    "curve_ramp_weight",
    "total",
    "regression",
    "curve",
    "classification",
    "visibility",
)


class TrainingDiverged(RuntimeError):
    """Raised when the total loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # "adam" or "sgd"
    seed: int = 0
    curve_ramp_start: int = 10
    curve_ramp_end: int = 50
    use_balanced_l1: bool = True
    use_chamfer: bool = True
    use_uncertainty: bool = True
    use_lstm_fusion: bool = True
    use_consistency: bool = False  # optional inter-frame penalty, off by default

    def __post_init__(self):
        if not 0 <= self.curve_ramp_start <= self.curve_ramp_end:
            raise ValueError("TrainConfig: need 0 <= ramp-start <= ramp-end")
        if self.learning_rate < 0:
            raise ValueError("TrainConfig: learning rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("TrainConfig: batch size and epochs out of range")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("TrainConfig: optimizer must be 'adam' or 'sgd'")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in TrainConfig.__dataclass_fields__}
        return TrainConfig(**known)


def curve_ramp_weight(epoch: int, config: TrainConfig) -> float:
    """0 before the ramp, linear up to 1 across it, 1 after; non-decreasing."""
    if epoch < 0:
        raise ValueError("curve_ramp_weight: epoch must be non-negative")
    start, end = config.curve_ramp_start, config.curve_ramp_end
    if epoch <= start:
        return 0.0 if epoch < end else 1.0
    if epoch >= end:
        return 1.0
    return (epoch - start) / float(end - start)


def init_parameters(scene_config: SceneConfig, train_config: TrainConfig) -> dict:
    """All learnable arrays in checkpoint order, from the config seed."""
    rng = np.random.default_rng(train_config.seed)
    c = scene_config.channels
    s = scene_config.num_stations
    lstm = LstmParameters.initialize(c, rng=rng)
    heads = HeadParameters.initialize(c, s, scene_config.num_classes, rng=rng)
    params = {
        "lstm.w_ih": lstm.w_ih,
        "lstm.w_hh": lstm.w_hh,
        "lstm.bias": lstm.bias,
        "lstm.proj_w": lstm.proj_w,
        "lstm.proj_b": lstm.proj_b,
        "head.hidden_w": heads.hidden_w,
        "head.hidden_b": heads.hidden_b,
        "head.offset_w": heads.offset_w,
        "head.offset_b": heads.offset_b,
        "head.vis_w": heads.vis_w,
        "head.vis_b": heads.vis_b,
        "head.cls_w": heads.cls_w,
        "head.cls_b": heads.cls_b,
        "uncertainty.s": np.zeros(len(TASKS)),
    }
    return {name: np.array(params[name], dtype=np.float64) for name in PARAM_ORDER}


def _lstm_vars(pvars):
    return {key.split(".", 1)[1]: pvars[key] for key in PARAM_ORDER if key.startswith("lstm.")}


def _head_vars(pvars):
    return {key.split(".", 1)[1]: pvars[key] for key in PARAM_ORDER if key.startswith("head.")}


def _equidistant_gt(lane: Lane3D) -> Lane3D:
    """Ground truth resampled to equidistant stations across its visible span."""
    visible = np.flatnonzero(lane.visible_mask())
    lo, hi = lane.stations[visible[0]], lane.stations[visible[-1]]
    if hi <= lo:
        return lane
    targets = np.linspace(lo, hi, lane.stations.shape[0])
    return resample_lane(lane, targets)


def _interp_matrix(targets: np.ndarray, stations: np.ndarray) -> np.ndarray:
    """Constant weights W with W @ values = linear interpolation at targets."""
    w = np.zeros((targets.shape[0], stations.shape[0]))
    idx = np.clip(np.searchsorted(stations, targets) - 1, 0, stations.shape[0] - 2)
    span = stations[idx + 1] - stations[idx]
    frac = np.clip((targets - stations[idx]) / span, 0.0, 1.0)
    w[np.arange(targets.shape[0]), idx] = 1.0 - frac
    w[np.arange(targets.shape[0]), idx + 1] = frac
    return w


def scene_loss(pvars, scene, anchors, loss_config: LossConfig,
               train_config: TrainConfig, epoch: int):
    """Differentiable total loss of one scene plus per-task values.

    Only the last frame is supervised; earlier frames matter through the
    fused features (and the optional consistency penalty).
    """
    cfg = train_config
    stations = anchors.stations
    s = anchors.num_stations

    feats = np.stack([f.features for f in scene.frames], axis=1)  # (K, T, C)
    if cfg.use_lstm_fusion:
        fused = fuse_all_anchors(feats, _lstm_vars(pvars))
    else:
        fused = ad.Var(feats[:, -1, :])
    dx, dz, vis_logits, cls_logits = head_forward(fused, _head_vars(pvars))

    gt_lanes = list(scene.frames[-1].lanes)
    assignment = assign_targets(anchors, gt_lanes)
    positives = assignment.positive_pairs

    task_losses = {}

    # classification: focal on positives and background, ignores skipped
    cls_terms = []
    for k, lane_idx in enumerate(assignment.lane_for_anchor):
        if lane_idx >= 0:
            cls_terms.append(focal(cls_logits[k], gt_lanes[lane_idx].category, loss_config))
        elif lane_idx == -1:
            cls_terms.append(focal(cls_logits[k], BACKGROUND_CLASS, loss_config))
    task_losses["classification"] = (
        ad.stack(cls_terms).mean() if cls_terms else ad.Var(0.0)
    )

    if positives:
        pos_anchor = np.array([k for k, _ in positives])
        pos_lane = [gt_lanes[j] for _, j in positives]
        target_dx = np.stack([lane.x - anchors.base_x[k] for (k, _), lane in zip(positives, pos_lane)])
        target_dz = np.stack([lane.z - anchors.base_z[k] for (k, _), lane in zip(positives, pos_lane)])
        weights = np.stack([lane.visibility for lane in pos_lane])

        pred_dx = dx[pos_anchor]
        pred_dz = dz[pos_anchor]
        n = len(positives) * s
        flat_pred = ad.stack([pred_dx.reshape((n,)), pred_dz.reshape((n,))]).reshape((2 * n,))
        flat_target = np.concatenate([target_dx.reshape(-1), target_dz.reshape(-1)])
        flat_weights = np.concatenate([weights.reshape(-1), weights.reshape(-1)])
        if flat_weights.sum() > 0:
            if cfg.use_balanced_l1:
                task_losses["regression"] = balanced_l1_vector(
                    flat_pred, flat_target, flat_weights, loss_config
                )
            else:
                residual = ad.absolute(flat_pred - flat_target)
                task_losses["regression"] = (residual * flat_weights).sum() / flat_weights.sum()
        else:
            task_losses["regression"] = ad.Var(0.0)

        if cfg.use_chamfer:
            ramp = curve_ramp_weight(epoch, cfg)
            chamfer_terms = []
            for (k, _), lane in zip(positives, pos_lane):
                pred_x = dx[k] + anchors.base_x[k]
                pred_z = dz[k] + anchors.base_z[k]
                pred_points = ad.stack([pred_x, ad.Var(stations), pred_z], axis=1)
                gt_eq = _equidistant_gt(lane)
                gt_points = gt_eq.points()[gt_eq.visible_mask()]
                chamfer_terms.append(chamfer(pred_points, gt_points))
            task_losses["curve"] = ad.stack(chamfer_terms).mean() * ramp

        vis_terms = []
        for (k, _), lane in zip(positives, pos_lane):
            vis_terms.append(dice(ad.sigmoid(vis_logits[k]), lane.visibility, loss_config))
        task_losses["visibility"] = ad.stack(vis_terms).mean()
    else:
        task_losses["regression"] = ad.Var(0.0)
        task_losses["visibility"] = ad.Var(0.0)
        if cfg.use_chamfer:
            task_losses["curve"] = ad.Var(0.0)

    if cfg.use_uncertainty:
        s_var = pvars["uncertainty.s"]
        s_map = {name: s_var[i] for i, name in enumerate(TASKS) if name in task_losses}
        total = combine_uncertainty(task_losses, s_map)
    else:
        total = None
        for name in sorted(task_losses):
            total = task_losses[name] if total is None else total + task_losses[name]

    if cfg.use_consistency and scene.num_frames >= 2 and positives:
        total = total + _consistency_penalty(pvars, scene, anchors, positives)

    values = {name: float(task_losses[name].value) for name in task_losses}
    return total, values


def _consistency_penalty(pvars, scene, anchors, positives):
    """Mean squared lateral gap between ego-aligned consecutive predictions.

    Uses raw per-frame features through the heads (no fusion) for the
    last two frames; frame T-2's lateral prediction is rigidly carried
    into frame T-1 and compared against an interpolation of frame T-1's
    prediction at the transported stations.
    """
    hv = _head_vars(pvars)
    prev_feats = ad.Var(scene.frames[-2].features)
    cur_feats = ad.Var(scene.frames[-1].features)
    dx_prev, _, _, _ = head_forward(prev_feats, hv)
    dx_cur, _, _, _ = head_forward(cur_feats, hv)
    forward, yaw_change = scene.ego_motion[-1]
    stations = anchors.stations
    sin, cos = np.sin(yaw_change), np.cos(yaw_change)
    terms = []
    for k, _ in positives:
        x_prev = dx_prev[k] + anchors.base_x[k]
        # transported coordinates; station drift uses current values only
        y_moved = -sin * (anchors.base_x[k] + dx_prev[k].value) + cos * (stations - forward)
        inside = (y_moved >= stations[0]) & (y_moved <= stations[-1])
        if not np.any(inside):
            continue
        x_moved = (x_prev * cos + sin * (stations - forward))[np.flatnonzero(inside)]
        w = _interp_matrix(y_moved[inside], stations)
        x_cur = ad.matmul(ad.Var(w), dx_cur[k] + anchors.base_x[k])
        terms.append(ad.square(x_moved - x_cur).mean())
    if not terms:
        return ad.Var(0.0)
    return ad.stack(terms).mean()


class SgdOptimizer:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: dict, grads: dict) -> None:
        for name in PARAM_ORDER:
            params[name] -= self.learning_rate * grads[name]


class AdamOptimizer:
    def __init__(self, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in PARAM_ORDER:
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / (1.0 - b1**self.t)
            v_hat = self.v[name] / (1.0 - b2**self.t)
            params[name] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SgdOptimizer(config.learning_rate)
    return AdamOptimizer(config.learning_rate)


def batch_gradients(params: dict, scenes, anchors, loss_config, train_config, epoch):
    """Mean loss over scenes and its gradients for every parameter."""
    pvars = {name: ad.Var(params[name]) for name in PARAM_ORDER}
    totals = []
    task_sums = {}
    for scene in scenes:
        total, values = scene_loss(pvars, scene, anchors, loss_config, train_config, epoch)
        totals.append(total)
        for name, value in values.items():
            task_sums[name] = task_sums.get(name, 0.0) + value
    batch_total = ad.stack(totals).mean() if len(totals) > 1 else totals[0]
    value = float(batch_total.value)
    if not np.isfinite(value):
        raise TrainingDiverged(f"total loss became non-finite ({value}) at epoch {epoch}")
    batch_total.backward()
    grads = {
        name: (np.zeros_like(params[name]) if pvars[name].grad is None else pvars[name].grad)
        for name in PARAM_ORDER
    }
    task_means = {name: task_sums[name] / len(scenes) for name in task_sums}
    return value, grads, task_means


@dataclass
class TrainResult:
    params: dict
    epochs_run: int
    epoch_rows: list
    final_losses: dict


def train(
    train_config: TrainConfig,
    scenes,
    scene_config: SceneConfig,
    loss_config: LossConfig | None = None,
    log_path=None,
) -> TrainResult:
    """Full-batch-order deterministic training over the given scenes."""
    if not scenes:
        raise ValueError("train: need a non-empty dataset")
    loss_config = LossConfig() if loss_config is None else loss_config
    anchors = scene_config.anchors()
    params = init_parameters(scene_config, train_config)
    optimizer = make_optimizer(train_config)
    rows = []
    final_losses = {}
    for epoch in range(train_config.epochs):
        epoch_total = 0.0
        epoch_tasks = {}
        steps = 0
        for start in range(0, len(scenes), train_config.batch_size):
            batch = scenes[start : start + train_config.batch_size]
            value, grads, task_means = batch_gradients(
                params, batch, anchors, loss_config, train_config, epoch
            )
            optimizer.step(params, grads)
            epoch_total += value
            for name, v in task_means.items():
                epoch_tasks[name] = epoch_tasks.get(name, 0.0) + v
            steps += 1
        means = {name: epoch_tasks.get(name, 0.0) / steps for name in TASKS}
        final_losses = dict(means)
        final_losses["total"] = epoch_total / steps
        rows.append(
            ",".join(
                [
                    str(epoch),
                    f"{curve_ramp_weight(epoch, train_config):.6f}",
                    f"{epoch_total / steps:.9f}",
                ]
                + [f"{means[name]:.9f}" for name in TASKS]
            )
        )
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write(",".join(EPOCH_LOG_COLUMNS) + "\n")
            fh.write("\n".join(rows) + ("\n" if rows else ""))
    return TrainResult(
        params=params,
        epochs_run=train_config.epochs,
        epoch_rows=rows,
        final_losses=final_losses,
    )


def save_checkpoint(path, params: dict, epoch: int, config_hash: str, metrics=None) -> None:
    """Single file: one JSON header line, then raw little-endian float64."""
    manifest = [[name, list(params[name].shape)] for name in PARAM_ORDER]
    header = {
        "config_hash": config_hash,
        "epoch": int(epoch),
        "manifest": manifest,
        "metrics": metrics or {},
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for name in PARAM_ORDER:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        params = {}
        for name, shape in header["manifest"]:
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
            params[name] = data.reshape(shape).copy()
    return params, header


def predict_frames(params: dict, scene, scene_config: SceneConfig,
                   use_lstm_fusion: bool, visibility_threshold: float = 0.5):
    """Decoded lane predictions for every frame of a scene.

    Frame t sees frames 0..t; histories shorter than the full sequence
    are left-padded by repeating the oldest frame so the fuser always
    runs the window length it was trained on.  Anchors whose class
    output is background or that claim no visible station yield no lane.
    """
    anchors = scene_config.anchors()
    feats = np.stack([f.features for f in scene.frames], axis=0)  # (T, K, C)
    total = feats.shape[0]
    hv = {k.split(".", 1)[1]: ad.Var(v) for k, v in params.items() if k.startswith("head.")}
    lv = {k.split(".", 1)[1]: ad.Var(v) for k, v in params.items() if k.startswith("lstm.")}
    per_frame = []
    for t in range(total):
        if use_lstm_fusion:
            window = feats[: t + 1]
            if t + 1 < total:
                pad = np.repeat(feats[:1], total - (t + 1), axis=0)
                window = np.concatenate([pad, window], axis=0)
            fused = fuse_all_anchors(window.transpose(1, 0, 2), lv).value
        else:
            fused = feats[t]
        dx, dz, vis_logits, cls_logits = head_forward(fused, hv)
        lanes = []
        for k in range(anchors.num_anchors):
            category = int(np.argmax(cls_logits.value[k]))
            if category == BACKGROUND_CLASS:
                continue
            visibility = 1.0 / (1.0 + np.exp(-vis_logits.value[k]))
            if not np.any(visibility >= visibility_threshold):
                continue
            lanes.append(
                Lane3D(
                    stations=anchors.stations,
                    x=anchors.base_x[k] + dx.value[k],
                    z=anchors.base_z[k] + dz.value[k],
                    visibility=visibility,
                    category=category,
                )
            )
        per_frame.append(lanes)
    return per_frame


def evaluate_model(
    params: dict,
    scenes,
    scene_config: SceneConfig,
    use_lstm_fusion: bool,
    distance_threshold: float = 1.5,
    coverage_fraction: float = 0.75,
):
    """Per-scene match reports and jitters, plus the aggregate report.

    Jitter is NaN for scenes where no lanes match across any frame pair;
    the aggregate jitter averages the finite entries.
    """
    reports = []
    jitters = []
    for scene in scenes:
        per_frame = predict_frames(params, scene, scene_config, use_lstm_fusion)
        gt = list(scene.frames[-1].lanes)
        reports.append(
            match_lanes(per_frame[-1], gt, distance_threshold, coverage_fraction)
        )
        if scene.num_frames >= 2:
            try:
                jitters.append(
                    temporal_smoothness(
                        per_frame, scene.ego_motion, distance_threshold, coverage_fraction
                    )
                )
            except ValueError:
                jitters.append(np.nan)
        else:
            jitters.append(np.nan)
    aggregate = aggregate_reports(reports)
    finite = [j for j in jitters if np.isfinite(j)]
    mean_jitter = float(np.mean(finite)) if finite else float("nan")
    return reports, jitters, aggregate, mean_jitter


ABLATION_ROWS = (
    ("baseline", {"use_balanced_l1": False, "use_chamfer": False,
                  "use_uncertainty": False, "use_lstm_fusion": False}),
    ("+balanced_l1", {"use_balanced_l1": True, "use_chamfer": False,
                      "use_uncertainty": False, "use_lstm_fusion": False}),
    ("+chamfer", {"use_balanced_l1": True, "use_chamfer": True,
                  "use_uncertainty": False, "use_lstm_fusion": False}),
    ("+uncertainty", {"use_balanced_l1": True, "use_chamfer": True,
                      "use_uncertainty": True, "use_lstm_fusion": False}),
    ("+lstm_fusion", {"use_balanced_l1": True, "use_chamfer": True,
                      "use_uncertainty": True, "use_lstm_fusion": True}),
)


def run_ablation(
    base_config: TrainConfig,
    train_scenes,
    eval_scenes,
    scene_config: SceneConfig,
    loss_config: LossConfig | None = None,
    distance_threshold: float = 1.5,
    coverage_fraction: float = 0.75,
):
    """Five configurations, each adding one component; shared seed/budget."""
    results = []
    for name, flags in ABLATION_ROWS:
        config = replace(base_config, **flags)
        outcome = train(config, train_scenes, scene_config, loss_config)
        _, _, aggregate, jitter = evaluate_model(
            outcome.params,
            eval_scenes,
            scene_config,
            config.use_lstm_fusion,
            distance_threshold,
            coverage_fraction,
        )
        results.append(
            {
                "configuration": name,
                "f1": aggregate.f1,
                "acc": aggregate.acc,
                "jitter": jitter,
                "params": outcome.params,
            }
        )
    return results


def ablation_table(results, config_hash: str) -> str:
    """Comparison table; each row adds one component to the previous."""
    lines = [
        f"# config_hash={config_hash}",
        "# rows nest: each configuration adds one component to the row above",
        "configuration,f1,acc,jitter",
    ]
    for row in results:
        jitter = f"{row['jitter']:.6f}" if np.isfinite(row["jitter"]) else "nan"
        lines.append(
            f"{row['configuration']},{row['f1']:.6f},{row['acc']:.6f},{jitter}"
        )
    return "\n".join(lines) + "\n"
