"""Losses, synthetic epipolar data, and end-to-end training of the state networks.

The loss per estimation batch combines the mean binary cross-entropy of the
decoded inlier probabilities against ground-truth labels with a clamped pose
error of that batch's refined model; batch losses are aggregated with
exponential weights favoring the last batch. Cross-entropy gradients flow
through the decoder, state transformer, and state initializer (the attention
operator is a constant). The refinement power alpha is trained by a central
finite difference on the final refinement only; the probabilities entering
the refinement carry no gradient.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .engine import EngineConfig, ForwardRecord, ca_ransac, essential_threshold, pixel_threshold
from .geometry import (
    ESSENTIAL,
    FUNDAMENTAL,
    CameraIntrinsics,
    Correspondence,
    ModelHypothesis,
    PoseUndecidable,
    RelativePose,
    correspondence_arrays,
    decompose_essential_arrays,
    f_to_e_upgrade,
    fundamental_from_pose,
    homogenize,
    normalize_points_by_intrinsics,
    pose_error,
    rodrigues,
    sampson_sq_arrays,
)
from .neural import BundleGrads, MlpBundle, backward
from .refinement import RefineUnderdetermined, refine_alpha_arrays
from .sampling import SamplerConfig


@dataclass(frozen=True)
class TrainConfig:
    epsilon: float = 0.1                 # exponential batch-weight decay
    pose_weight: float = 1.0 / 60.0      # scales pose degrees against cross-entropy
    pose_clamp_deg: float = 30.0
    inlier_label_px: float = 1.0
    epochs: int = 1
    learning_rate: float = 1e-3
    momentum: float = 0.9
    grad_clip: float = 1.0
    pairs_per_update: int = 4
    seed: int = 0
    model_kind: str = ESSENTIAL
    threshold_px: float = 1.5
    batches: int = 4
    batch_size: int = 256
    val_fraction: float = 0.1
    freeze_mlps: bool = False
    consensus_update: bool = True
    alpha_fd_step: float = 1e-2

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError("epsilon must be in (0, 1)")
        if self.pose_weight <= 0:
            raise ValueError("pose_weight must be positive")


@dataclass(frozen=True)
class PairSpec:
    """Parameters of one synthetic image pair."""

    n: int = 500
    inlier_rate: float = 0.5
    noise_sigma_px: float = 0.5
    side_info_overlap: float = 0.8
    seed: int = 0
    width: int = 640
    height: int = 480
    inlier_label_px: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.inlier_rate <= 1.0):
            raise ValueError("inlier_rate must be in (0, 1]")
        if self.noise_sigma_px < 0:
            raise ValueError("noise must be nonnegative")
        if self.n < 8:
            raise ValueError("need at least 8 correspondences")


@dataclass
class SyntheticPair:
    """Correspondences with ground truth: pose, intrinsics, labels."""

    correspondences: list[Correspondence]
    pose: RelativePose
    k1: CameraIntrinsics
    k2: CameraIntrinsics
    inlier_rate: float
    noise_sigma_px: float
    name: str = "pair"


# ---------------------------------------------------------------------------
# losses


def loss_inlier(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy of predicted inlier probabilities."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    l = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(l * np.log(p) + (1.0 - l) * np.log(1.0 - p))))


def loss_inlier_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(loss_inlier)/d(probs)."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    l = np.asarray(labels, dtype=np.float64)
    return (p - l) / (p * (1.0 - p)) / p.shape[0]


def model_pose_error(
    model: ModelHypothesis, pair: SyntheticPair, threshold_px: float = 1.5
) -> float:
    """Pose error in degrees of a two-view model against a pair's ground truth.

    Fundamental estimates are upgraded with the ground-truth calibration
    first. Cheirality voting runs over the model's own inliers in normalized
    coordinates (all points if the inlier set is empty). Raises
    PoseUndecidable when no candidate pose is geometrically viable.
    """
    if model.is_zero:
        raise PoseUndecidable("zero model carries no pose")
    e = f_to_e_upgrade(model, pair.k1, pair.k2) if model.kind == FUNDAMENTAL else model
    p1, p2 = correspondence_arrays(pair.correspondences)
    p1n = normalize_points_by_intrinsics(p1, pair.k1)
    p2n = normalize_points_by_intrinsics(p2, pair.k2)
    thr = essential_threshold(threshold_px, pair.k1, pair.k2)
    residuals = sampson_sq_arrays(e.m, homogenize(p1n), homogenize(p2n))
    mask = residuals < thr
    if not mask.any():
        mask = np.ones(len(residuals), dtype=bool)
    est = decompose_essential_arrays(e.m, p1n[mask], p2n[mask])
    return pose_error(est, pair.pose)


def loss_pose(
    model: ModelHypothesis, pair: SyntheticPair, clamp_deg: float = 30.0
) -> float:
    """Clamped pose error of a model estimate; undecidable poses clamp."""
    try:
        return min(model_pose_error(model, pair), clamp_deg)
    except PoseUndecidable:
        return clamp_deg


def aggregate_loss(per_batch_losses: Sequence[tuple[float, float]], cfg: TrainConfig) -> float:
    """Exponentially weighted sum over batches of (cross-entropy, pose) losses."""
    q_total = len(per_batch_losses)
    if q_total < 1:
        raise ValueError("need at least one batch loss")
    total = 0.0
    for q, (l_inl, l_pose) in enumerate(per_batch_losses, start=1):
        total += (1.0 - cfg.epsilon) ** (q_total - q) * (l_inl + cfg.pose_weight * l_pose)
    return total


def batch_weights(q_total: int, epsilon: float) -> np.ndarray:
    return np.array([(1.0 - epsilon) ** (q_total - q) for q in range(1, q_total + 1)])


# ---------------------------------------------------------------------------
# synthetic data


def _random_pose(rng: np.random.Generator, mean_depth: float) -> RelativePose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(5.0, 45.0))
    rotation = rodrigues(axis * angle)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    # generous baselines keep translation direction well conditioned
    baseline = rng.uniform(0.15, 0.45) * mean_depth
    return RelativePose(rotation, direction), baseline * direction


def _side_info(rng: np.random.Generator, labels: np.ndarray, overlap: float) -> np.ndarray:
    """Matcher-quality scalars: inliers skew low, outliers high.

    ``overlap`` in [0, 1] widens the two supports: at 0 they are disjoint
    (linearly separable at 0.5), at 1 both span [0, 1].
    """
    n = labels.shape[0]
    out = np.empty(n)
    n_in = int(labels.sum())
    hi = 0.5 * (1.0 + overlap)
    lo = 0.5 * (1.0 - overlap)
    out[labels] = rng.beta(2.0, 3.0, size=n_in) * hi
    out[~labels] = lo + rng.beta(3.0, 2.0, size=n - n_in) * (1.0 - lo)
    return np.clip(out, 0.0, 1.0)


def generate_synthetic(spec: PairSpec) -> SyntheticPair:
    """Random two-view scene: frustum-consistent 3D points, noisy inlier
    projections, uniform outliers, beta-distributed side information, and
    labels recomputed from the squared-Sampson rule against the true model
    (so near-threshold points may be relabeled)."""
    rng = np.random.default_rng(spec.seed)
    fx1 = rng.uniform(520.0, 680.0)
    fx2 = rng.uniform(520.0, 680.0)
    k1 = CameraIntrinsics(fx1, fx1 * rng.uniform(0.97, 1.03), spec.width / 2.0, spec.height / 2.0)
    k2 = CameraIntrinsics(fx2, fx2 * rng.uniform(0.97, 1.03), spec.width / 2.0, spec.height / 2.0)

    depth_lo, depth_hi = 4.0, 8.0
    n_inl = int(round(spec.n * spec.inlier_rate))
    n_out = spec.n - n_inl

    pose = None
    pts1 = pts2 = None
    for _ in range(50):  # resample the pose if the view overlap is too small
        cand, t_vec = _random_pose(rng, 0.5 * (depth_lo + depth_hi))
        collected1, collected2 = [], []
        attempts = 0
        while len(collected1) < n_inl and attempts < 40 * max(n_inl, 1):
            attempts += 1
            px = rng.uniform(0.0, spec.width)
            py = rng.uniform(0.0, spec.height)
            z = rng.uniform(depth_lo, depth_hi)
            x1 = np.array([(px - k1.cx) / k1.fx * z, (py - k1.cy) / k1.fy * z, z])
            x2 = cand.rotation @ x1 + t_vec
            if x2[2] <= 0.1:
                continue
            u2 = x2[0] / x2[2] * k2.fx + k2.cx
            v2 = x2[1] / x2[2] * k2.fy + k2.cy
            if not (0.0 <= u2 <= spec.width and 0.0 <= v2 <= spec.height):
                continue
            collected1.append([px, py])
            collected2.append([u2, v2])
        if len(collected1) >= n_inl:
            pose = cand
            pts1 = np.array(collected1) if n_inl else np.zeros((0, 2))
            pts2 = np.array(collected2) if n_inl else np.zeros((0, 2))
            break
    if pose is None:
        raise ValueError("could not realize the requested pair geometry")

    noise1 = rng.normal(scale=spec.noise_sigma_px, size=(n_inl, 2)) if spec.noise_sigma_px else 0.0
    noise2 = rng.normal(scale=spec.noise_sigma_px, size=(n_inl, 2)) if spec.noise_sigma_px else 0.0
    p1 = np.vstack(
        [
            pts1 + noise1,
            np.column_stack(
                [rng.uniform(0, spec.width, n_out), rng.uniform(0, spec.height, n_out)]
            ),
        ]
    )
    p2 = np.vstack(
        [
            pts2 + noise2,
            np.column_stack(
                [rng.uniform(0, spec.width, n_out), rng.uniform(0, spec.height, n_out)]
            ),
        ]
    )
    planted = np.zeros(spec.n, dtype=bool)
    planted[:n_inl] = True
    side = _side_info(rng, planted, spec.side_info_overlap)

    perm = rng.permutation(spec.n)
    p1, p2, side = p1[perm], p2[perm], side[perm]

    f_gt = fundamental_from_pose(pose, k1, k2)
    labels = sampson_sq_arrays(f_gt.m, homogenize(p1), homogenize(p2)) < spec.inlier_label_px**2

    correspondences = [
        Correspondence(p1[i], p2[i], float(side[i]), bool(labels[i])) for i in range(spec.n)
    ]
    return SyntheticPair(
        correspondences, pose, k1, k2, spec.inlier_rate, spec.noise_sigma_px,
        name=f"pair_{spec.seed:06d}",
    )


def relabel(pair: SyntheticPair, label_px: float = 1.0) -> SyntheticPair:
    """Recompute ground-truth labels from the squared-Sampson rule (idempotent)."""
    p1, p2 = correspondence_arrays(pair.correspondences)
    f_gt = fundamental_from_pose(pair.pose, pair.k1, pair.k2)
    labels = sampson_sq_arrays(f_gt.m, homogenize(p1), homogenize(p2)) < label_px**2
    new = [replace(c, gt_inlier=bool(labels[i])) for i, c in enumerate(pair.correspondences)]
    return replace_pair(pair, new)


def replace_pair(pair: SyntheticPair, correspondences: list[Correspondence]) -> SyntheticPair:
    return SyntheticPair(
        correspondences, pair.pose, pair.k1, pair.k2, pair.inlier_rate,
        pair.noise_sigma_px, pair.name,
    )


def normalized_pair_data(pair: SyntheticPair) -> list[Correspondence]:
    """Correspondences in intrinsics-normalized coordinates."""
    p1, p2 = correspondence_arrays(pair.correspondences)
    p1n = normalize_points_by_intrinsics(p1, pair.k1)
    p2n = normalize_points_by_intrinsics(p2, pair.k2)
    return [
        replace(c, p1=p1n[i], p2=p2n[i]) for i, c in enumerate(pair.correspondences)
    ]


def engine_inputs(
    pair: SyntheticPair, model_kind: str, threshold_px: float
) -> tuple[list[Correspondence], float]:
    """Per-kind engine inputs: (possibly normalized) data and native threshold."""
    if model_kind == ESSENTIAL:
        return normalized_pair_data(pair), essential_threshold(threshold_px, pair.k1, pair.k2)
    return list(pair.correspondences), pixel_threshold(threshold_px)


def pair_labels(pair: SyntheticPair) -> np.ndarray:
    return np.array([bool(c.gt_inlier) for c in pair.correspondences])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    bundle: MlpBundle
    history: list[dict]


def _engine_config(cfg: TrainConfig, pair: SyntheticPair, seed: int) -> EngineConfig:
    if cfg.model_kind == ESSENTIAL:
        threshold = essential_threshold(cfg.threshold_px, pair.k1, pair.k2)
    else:
        threshold = pixel_threshold(cfg.threshold_px)
    return EngineConfig(
        batches=cfg.batches,
        batch_size=cfg.batch_size,
        model_kind=cfg.model_kind,
        msac_threshold=threshold,
        sampler=SamplerConfig(rng_seed=seed),
        consensus_update=cfg.consensus_update,
    )


def _pair_seed(base: int, epoch: int, index: int) -> int:
    return (base * 1_000_003 + epoch * 10_007 + index * 101) % (2**63 - 1)


def pair_forward(
    bundle: MlpBundle, pair: SyntheticPair, cfg: TrainConfig, seed: int
) -> tuple[float, list[tuple[float, float]], ForwardRecord, list[Correspondence]]:
    """Run the consensus engine on one pair and compute its per-batch losses."""
    data, _ = engine_inputs(pair, cfg.model_kind, cfg.threshold_px)
    engine_cfg = _engine_config(cfg, pair, seed)
    record = ForwardRecord()
    ca_ransac(data, None, bundle, engine_cfg, record=record)
    labels = pair_labels(pair)
    per_batch = [
        (loss_inlier(probs, labels), loss_pose(model, pair, cfg.pose_clamp_deg))
        for probs, model in zip(record.probs_per_batch, record.model_per_batch)
    ]
    return aggregate_loss(per_batch, cfg), per_batch, record, data


def _alpha_gradient(
    bundle: MlpBundle,
    record: ForwardRecord,
    data: list[Correspondence],
    pair: SyntheticPair,
    cfg: TrainConfig,
    engine_cfg: EngineConfig,
) -> float:
    """Central finite difference of the final pose loss w.r.t. alpha.

    Only the last refinement is re-run; the probabilities are constants.
    """
    model = record.last_prerefine_model
    if model is None or model.is_zero or record.last_probs is None:
        return 0.0
    h = cfg.alpha_fd_step
    refine_cfg = engine_cfg.resolved_refine()
    p1, p2 = correspondence_arrays(data)
    p1h, p2h = homogenize(p1), homogenize(p2)
    losses = []
    for a in (bundle.alpha + h, bundle.alpha - h):
        try:
            refined = refine_alpha_arrays(model, p1h, p2h, record.last_probs, a, refine_cfg)
            losses.append(loss_pose(refined, pair, cfg.pose_clamp_deg))
        except RefineUnderdetermined:
            losses.append(cfg.pose_clamp_deg)
    return cfg.pose_weight * (losses[0] - losses[1]) / (2.0 * h)


def pair_gradients(
    bundle: MlpBundle, pair: SyntheticPair, cfg: TrainConfig, seed: int
) -> tuple[float, BundleGrads]:
    """Loss and parameter gradients for one pair (cross-entropy path + alpha)."""
    total, per_batch, record, data = pair_forward(bundle, pair, cfg, seed)
    labels = pair_labels(pair)
    weights = batch_weights(len(per_batch), cfg.epsilon)
    prob_grads = [
        w * loss_inlier_grad(probs, labels)
        for w, probs in zip(weights, record.probs_per_batch)
    ]
    grads = backward(bundle, record.tape, prob_grads)
    grads.alpha = _alpha_gradient(
        bundle, record, data, pair, cfg, _engine_config(cfg, pair, seed)
    )
    return total, grads


class _Momentum:
    """Plain first-order updates with momentum and gradient-norm clipping."""

    def __init__(self, bundle: MlpBundle):
        self.vel = BundleGrads.zeros(bundle)
        self.vel_alpha = 0.0

    def step(self, bundle: MlpBundle, grads: BundleGrads, cfg: TrainConfig) -> None:
        # clip the network gradient vector and alpha separately, so a large
        # cross-entropy gradient cannot drown the scalar's update
        alpha_grad = grads.alpha
        grads.alpha = 0.0
        norm = float(np.linalg.norm(grads.flat()))
        if norm > cfg.grad_clip:
            grads.scale(cfg.grad_clip / norm)
        alpha_grad = float(np.clip(alpha_grad, -cfg.grad_clip, cfg.grad_clip))
        if not cfg.freeze_mlps:
            for name, net in bundle.nets().items():
                for layer, (dw, db), vel in zip(net.layers, grads.nets[name], self.vel.nets[name]):
                    vel[0][...] = cfg.momentum * vel[0] - cfg.learning_rate * dw
                    vel[1][...] = cfg.momentum * vel[1] - cfg.learning_rate * db
                    layer.w += vel[0]
                    layer.b += vel[1]
        self.vel_alpha = cfg.momentum * self.vel_alpha - cfg.learning_rate * alpha_grad
        bundle.alpha = max(bundle.alpha + self.vel_alpha, 1e-3)


def evaluate_loss(bundle: MlpBundle, pairs: Sequence[SyntheticPair], cfg: TrainConfig) -> float:
    """Mean aggregate loss under fixed per-pair seeds (comparable across epochs)."""
    total = 0.0
    for i, pair in enumerate(pairs):
        loss, _, _, _ = pair_forward(bundle, pair, cfg, _pair_seed(cfg.seed + 7, 0, i))
        total += loss
    return total / max(len(pairs), 1)


def train(
    dataset: Sequence[SyntheticPair],
    cfg: TrainConfig,
    val: Sequence[SyntheticPair] | None = None,
    log: Callable[[str], None] | None = None,
    initial: MlpBundle | None = None,
) -> TrainResult:
    """End-to-end training over the estimation engine.

    Returns the bundle with the best validation loss seen at any epoch end.
    ``initial`` warm-starts from an existing bundle (fine-tuning); otherwise
    parameters are freshly initialized from the config seed. Aborts with a
    diagnostic if the loss diverges to NaN.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    dataset = list(dataset)
    if val is None:
        n_val = max(1, int(round(len(dataset) * cfg.val_fraction))) if len(dataset) > 1 else 0
        val = dataset[len(dataset) - n_val :]
        dataset = dataset[: len(dataset) - n_val] or list(val)
    rng = np.random.default_rng(cfg.seed)
    bundle = initial.copy() if initial is not None else MlpBundle.initialize(cfg.seed)
    optimizer = _Momentum(bundle)
    history: list[dict] = []
    best_val = math.inf
    best_bundle = bundle.copy()

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.pairs_per_update):
            chunk = order[start : start + cfg.pairs_per_update]
            grads = BundleGrads.zeros(bundle)
            chunk_loss = 0.0
            for idx in chunk:
                loss, pair_grads = pair_gradients(
                    bundle, dataset[int(idx)], cfg, _pair_seed(cfg.seed, epoch, int(idx))
                )
                if not math.isfinite(loss):
                    raise RuntimeError(
                        f"training diverged: non-finite loss on pair {dataset[int(idx)].name}"
                    )
                chunk_loss += loss
                for name in grads.nets:
                    for (dw, db), (gw, gb) in zip(grads.nets[name], pair_grads.nets[name]):
                        dw += gw
                        db += gb
                grads.alpha += pair_grads.alpha
            grads.scale(1.0 / len(chunk))
            optimizer.step(bundle, grads, cfg)
            epoch_loss += chunk_loss
        epoch_loss /= len(dataset)
        val_loss = evaluate_loss(bundle, val, cfg) if val else epoch_loss
        history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss,
                "val_loss": val_loss,
                "alpha": bundle.alpha,
                "seconds": time.perf_counter() - t0,
            }
        )
        if log is not None:
            log(
                f"epoch {epoch} train_loss {epoch_loss:.6f} val_loss {val_loss:.6f} "
                f"alpha {bundle.alpha:.6f}"
            )
        if val_loss <= best_val:
            best_val = val_loss
            best_bundle = bundle.copy()
    return TrainResult(best_bundle, history)
