"""Two-view epipolar geometry: model types, minimal solver, residuals, pose errors.

All matrices are 64-bit floats. Two model kinds are supported: fundamental
matrices (pixel coordinates) and essential matrices (intrinsics-normalized
coordinates). Minimal samples have 8 points for both kinds; essential
estimates are obtained by projecting the 8-point solution onto the
equal-singular-value manifold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

FUNDAMENTAL = "fundamental"
ESSENTIAL = "essential"
MODEL_KINDS = (FUNDAMENTAL, ESSENTIAL)

#: Minimal sample size for the linear solver (both model kinds).
MIN_SAMPLE_SIZE = 8

# Relative singular-value cutoff below which a design matrix counts as
# rank-deficient and the sample as degenerate.
_RANK_TOL = 1e-9


class PoseUndecidable(Exception):
    """No candidate pose places any point in front of both cameras."""


@dataclass(frozen=True)
class Correspondence:
    """A tentative match between a point in image 1 and a point in image 2.

    ``side_info`` is a matcher-provided quality scalar in [0, 1] (e.g. an SNN
    ratio or a matching score). ``gt_inlier`` is an optional ground-truth
    label used only by synthetic data and training.
    """

    p1: np.ndarray
    p2: np.ndarray
    side_info: float
    gt_inlier: bool | None = None

    def __post_init__(self):
        p1 = np.asarray(self.p1, dtype=np.float64).reshape(2)
        p2 = np.asarray(self.p2, dtype=np.float64).reshape(2)
        if not (np.isfinite(p1).all() and np.isfinite(p2).all()):
            raise ValueError("correspondence coordinates must be finite")
        if not (0.0 <= self.side_info <= 1.0):
            raise ValueError(f"side_info must be in [0, 1], got {self.side_info}")
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "p2", p2)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics (zero skew)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class ModelHypothesis:
    """A 3x3 two-view model with provenance.

    Non-zero models carry unit Frobenius norm. Fundamental models are rank 2;
    essential models additionally have two equal singular values.
    Provenance is one of ``"minimal"`` (solved from a minimal sample, with
    ``sample_indices`` set), ``"refined"``, or ``"zero"`` (the null model a
    consensus loop starts from).
    """

    m: np.ndarray
    kind: str
    provenance: str
    sample_indices: tuple[int, ...] | None = None

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "m", m)
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.provenance not in ("minimal", "refined", "zero"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def is_zero(self) -> bool:
        return self.provenance == "zero"

    @staticmethod
    def zero(kind: str) -> "ModelHypothesis":
        return ModelHypothesis(np.zeros((3, 3)), kind, "zero")


@dataclass(frozen=True)
class RelativePose:
    """Rotation plus unit translation direction (scale-free)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation must be proper (det +1)")
        norm = np.linalg.norm(t)
        if norm == 0:
            raise ValueError("translation must be nonzero")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t / norm)


# ---------------------------------------------------------------------------
# array packing helpers


def correspondence_arrays(data: Sequence[Correspondence]) -> tuple[np.ndarray, np.ndarray]:
    """Pack correspondences into (n,2) point arrays for vectorized work."""
    p1 = np.array([c.p1 for c in data], dtype=np.float64).reshape(-1, 2)
    p2 = np.array([c.p2 for c in data], dtype=np.float64).reshape(-1, 2)
    return p1, p2


def side_info_array(data: Sequence[Correspondence]) -> np.ndarray:
    return np.array([c.side_info for c in data], dtype=np.float64)


def homogenize(p: np.ndarray) -> np.ndarray:
    """(n,2) points -> (n,3) homogeneous points."""
    p = np.asarray(p, dtype=np.float64)
    return np.concatenate([p, np.ones((p.shape[0], 1))], axis=1)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Rotation matrix from an axis-angle 3-vector."""
    w = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        k = skew(w)
        return np.eye(3) + k + 0.5 * (k @ k)
    k = skew(w / theta)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def rotation_angle_deg(r: np.ndarray) -> float:
    """Rotation angle of an orthonormal matrix, in degrees."""
    c = (np.trace(r) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


# ---------------------------------------------------------------------------
# residuals


def sampson_sq_arrays(m: np.ndarray, p1h: np.ndarray, p2h: np.ndarray) -> np.ndarray:
    """Squared Sampson distance of every correspondence to one model.

    Degenerate points (all four epipolar line gradients zero) map to +inf,
    never NaN.
    """
    mx1 = p1h @ m.T            # rows are (m @ x1)^T
    mtx2 = p2h @ m             # rows are (m^T @ x2)^T
    r = np.einsum("ni,ni->n", p2h, mx1)
    g = mx1[:, 0] ** 2 + mx1[:, 1] ** 2 + mtx2[:, 0] ** 2 + mtx2[:, 1] ** 2
    out = np.full(p1h.shape[0], np.inf)
    ok = g > 0.0
    out[ok] = (r[ok] ** 2) / g[ok]
    return out


def sampson_sq(model: ModelHypothesis, c: Correspondence) -> float:
    """Squared Sampson distance of one correspondence to a non-zero model."""
    if model.is_zero:
        raise ValueError("sampson_sq is undefined for the zero model")
    p1h = homogenize(c.p1.reshape(1, 2))
    p2h = homogenize(c.p2.reshape(1, 2))
    return float(sampson_sq_arrays(model.m, p1h, p2h)[0])


# ---------------------------------------------------------------------------
# manifold projections


def enforce_rank2(m: np.ndarray) -> np.ndarray:
    u, s, vt = np.linalg.svd(m)
    s = s.copy()
    s[2] = 0.0
    return (u * s) @ vt


def project_to_essential(m: np.ndarray) -> np.ndarray:
    """Nearest matrix with singular values (s, s, 0), unit Frobenius norm."""
    u, s, vt = np.linalg.svd(m)
    sigma = 0.5 * (s[0] + s[1])
    e = (u * np.array([sigma, sigma, 0.0])) @ vt
    return e / np.linalg.norm(e)


def unit_norm(m: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(m)
    if n == 0:
        raise ValueError("cannot normalize a zero matrix")
    return m / n


# ---------------------------------------------------------------------------
# 8-point solver


def _hartley_batch(p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize (B,s,2) point sets: centroid to origin, mean distance sqrt(2).

    Returns (normalized points, transforms (B,3,3), valid mask). Point sets
    with zero spread are flagged invalid.
    """
    centroid = p.mean(axis=1, keepdims=True)
    centered = p - centroid
    mean_dist = np.linalg.norm(centered, axis=2).mean(axis=1)
    valid = mean_dist > 0.0
    scale = np.zeros_like(mean_dist)
    scale[valid] = math.sqrt(2.0) / mean_dist[valid]
    pn = centered * scale[:, None, None]
    b = p.shape[0]
    t = np.zeros((b, 3, 3))
    t[:, 0, 0] = scale
    t[:, 1, 1] = scale
    t[:, 2, 2] = 1.0
    t[:, 0, 2] = -scale * centroid[:, 0, 0]
    t[:, 1, 2] = -scale * centroid[:, 0, 1]
    return pn, t, valid


def eight_point_batch(
    p1: np.ndarray, p2: np.ndarray, kind: str
) -> tuple[np.ndarray, np.ndarray]:
    """Solve a batch of >=8-point samples with the normalized linear algorithm.

    ``p1``/``p2`` have shape (B, s, 2) with s >= 8. Returns (models (B,3,3),
    valid (B,)). Invalid entries come from rank-deficient design matrices or
    degenerate normalizations; their model slot content is unspecified.
    """
    if p1.ndim != 3 or p1.shape != p2.shape or p1.shape[1] < MIN_SAMPLE_SIZE:
        raise ValueError("expected matching (B, s>=8, 2) point arrays")
    p1n, t1, ok1 = _hartley_batch(p1)
    p2n, t2, ok2 = _hartley_batch(p2)
    valid = ok1 & ok2

    x1, y1 = p1n[..., 0], p1n[..., 1]
    x2, y2 = p2n[..., 0], p2n[..., 1]
    ones = np.ones_like(x1)
    # Row for x2^T M x1 = 0, M flattened row-major.
    design = np.stack(
        [x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, ones], axis=2
    )
    _, s, vt = np.linalg.svd(design)
    valid &= s[:, MIN_SAMPLE_SIZE - 1] > _RANK_TOL * s[:, 0]
    m = vt[:, -1, :].reshape(-1, 3, 3)

    if kind == FUNDAMENTAL:
        # Rank-2 enforcement in the normalized frame (rank survives the
        # denormalization; equal singular values would not).
        u, s3, vt3 = np.linalg.svd(m)
        s3[:, 2] = 0.0
        m = (u * s3[:, None, :]) @ vt3
        m = np.transpose(t2, (0, 2, 1)) @ m @ t1
    elif kind == ESSENTIAL:
        m = np.transpose(t2, (0, 2, 1)) @ m @ t1
        u, s3, vt3 = np.linalg.svd(m)
        sigma = 0.5 * (s3[:, 0] + s3[:, 1])
        sv = np.zeros_like(s3)
        sv[:, 0] = sigma
        sv[:, 1] = sigma
        m = (u * sv[:, None, :]) @ vt3
    else:
        raise ValueError(f"unknown model kind {kind!r}")

    norms = np.linalg.norm(m, axis=(1, 2))
    valid &= norms > 0.0
    safe = np.where(norms > 0.0, norms, 1.0)
    m = m / safe[:, None, None]
    return m, valid


def eight_point(
    samples: Sequence[Correspondence],
    kind: str,
    sample_indices: tuple[int, ...] | None = None,
) -> ModelHypothesis | None:
    """Fit one model to >=8 correspondences; None if the sample is degenerate."""
    if len(samples) < MIN_SAMPLE_SIZE:
        raise ValueError(f"need at least {MIN_SAMPLE_SIZE} correspondences")
    p1, p2 = correspondence_arrays(samples)
    models, valid = eight_point_batch(p1[None], p2[None], kind)
    if not valid[0]:
        return None
    return ModelHypothesis(models[0], kind, "minimal", sample_indices)


# ---------------------------------------------------------------------------
# calibration


def normalize_points_by_intrinsics(p: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.stack([(p[..., 0] - k.cx) / k.fx, (p[..., 1] - k.cy) / k.fy], axis=-1)


def pixels_from_normalized(p: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.stack([p[..., 0] * k.fx + k.cx, p[..., 1] * k.fy + k.cy], axis=-1)


def normalize_by_intrinsics(
    c: Correspondence, k1: CameraIntrinsics, k2: CameraIntrinsics
) -> Correspondence:
    """Map both image points to intrinsics-normalized coordinates."""
    return replace(
        c,
        p1=normalize_points_by_intrinsics(c.p1, k1),
        p2=normalize_points_by_intrinsics(c.p2, k2),
    )


def f_to_e_upgrade(
    f: ModelHypothesis, k1: CameraIntrinsics, k2: CameraIntrinsics
) -> ModelHypothesis:
    """Upgrade a fundamental matrix to an essential matrix with known intrinsics."""
    if f.kind != FUNDAMENTAL:
        raise ValueError("f_to_e_upgrade expects a fundamental model")
    e = k2.matrix().T @ f.m @ k1.matrix()
    return ModelHypothesis(project_to_essential(e), ESSENTIAL, f.provenance, f.sample_indices)


# ---------------------------------------------------------------------------
# pose extraction


def _triangulate_midpoint(
    r: np.ndarray, t: np.ndarray, x1h: np.ndarray, x2h: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Midpoint triangulation in the camera-1 frame for a candidate (R, t).

    Camera 2 satisfies X2 = R @ X1 + t. Returns (points (n,3), depth1, depth2);
    near-parallel rays yield NaN depths.
    """
    c2 = -r.T @ t
    d1 = x1h
    d2 = x2h @ r  # rows are (R^T @ x2)^T
    a = np.einsum("ni,ni->n", d1, d1)
    b = np.einsum("ni,ni->n", d1, d2)
    c = np.einsum("ni,ni->n", d2, d2)
    e = d1 @ c2
    f = d2 @ c2
    det = b * b - a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (b * f - c * e) / det
        u = (a * f - b * e) / det
    mid = 0.5 * (s[:, None] * d1 + c2[None, :] + u[:, None] * d2)
    depth1 = mid[:, 2]
    depth2 = (mid @ r.T + t)[:, 2]
    return mid, depth1, depth2


def decompose_essential(
    e: ModelHypothesis, inlier_correspondences: Sequence[Correspondence]
) -> RelativePose:
    """Recover (R, t) from an essential matrix by cheirality voting.

    All four SVD candidates are triangulated over the provided inliers, the
    one with the most points of positive depth in both views wins; ties break
    on the smallest mean reprojection residual.
    """
    if e.kind != ESSENTIAL:
        raise ValueError("decompose_essential expects an essential model")
    if len(inlier_correspondences) < 1:
        raise ValueError("need at least one inlier correspondence")
    p1, p2 = correspondence_arrays(inlier_correspondences)
    return decompose_essential_arrays(e.m, p1, p2)


def decompose_essential_arrays(
    e: np.ndarray, p1: np.ndarray, p2: np.ndarray
) -> RelativePose:
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = u.copy()
        u[:, 2] *= -1.0
    if np.linalg.det(vt) < 0:
        vt = vt.copy()
        vt[2, :] *= -1.0
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]
    x1h = homogenize(p1)
    x2h = homogenize(p2)

    best = None
    for r_cand, t_cand in ((r1, t), (r1, -t), (r2, t), (r2, -t)):
        mid, depth1, depth2 = _triangulate_midpoint(r_cand, t_cand, x1h, x2h)
        good = np.isfinite(depth1) & np.isfinite(depth2) & (depth1 > 0) & (depth2 > 0)
        votes = int(good.sum())
        if votes == 0:
            continue
        proj1 = mid[good, :2] / mid[good, 2:3]
        in2 = mid[good] @ r_cand.T + t_cand
        proj2 = in2[:, :2] / in2[:, 2:3]
        resid = float(
            np.mean(
                np.linalg.norm(proj1 - p1[good], axis=1)
                + np.linalg.norm(proj2 - p2[good], axis=1)
            )
        )
        key = (votes, -resid)
        if best is None or key > best[0]:
            best = (key, r_cand, t_cand)
    if best is None:
        raise PoseUndecidable("no pose candidate places any point in front of both cameras")
    return RelativePose(best[1], best[2])


def essential_from_pose(pose: RelativePose) -> ModelHypothesis:
    """The unit-norm essential matrix of a relative pose (X2 = R X1 + t)."""
    e = skew(pose.translation) @ pose.rotation
    return ModelHypothesis(unit_norm(e), ESSENTIAL, "refined")


def fundamental_from_pose(
    pose: RelativePose, k1: CameraIntrinsics, k2: CameraIntrinsics
) -> ModelHypothesis:
    e = skew(pose.translation) @ pose.rotation
    f = np.linalg.inv(k2.matrix()).T @ e @ np.linalg.inv(k1.matrix())
    return ModelHypothesis(unit_norm(f), FUNDAMENTAL, "refined")


def pose_error(estimate: RelativePose, gt: RelativePose) -> float:
    """max(rotation error, translation direction error) in degrees.

    Translation keeps its sign: cheirality already disambiguated it, so a
    180-degree-flipped direction counts as a 180-degree error.
    """
    rot_err = rotation_angle_deg(estimate.rotation @ gt.rotation.T)
    dot = float(np.dot(estimate.translation, gt.translation))
    trans_err = math.degrees(math.acos(min(1.0, max(-1.0, dot))))
    return max(rot_err, trans_err)
