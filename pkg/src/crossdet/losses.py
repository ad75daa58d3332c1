"""Regression losses of the RGB-D box head and their analytic gradients.

The combined objective is the plain sum of four terms

    total = centroids + angle + extents + l2d

with squared error on the 2.5D centroid keypoint (u, v, depth), cosine
similarity on the biternion yaw, l1 on metric extents and squared error plus
binary cross-entropy for the 2D box and objectness.  Each term carries an
optional scalar weight (default 1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .geometry import Biternion

OBJECTNESS_EPS = 1e-7

# Order of prediction fields in flattened vectors and gradients.
PREDICTION_FIELDS = ("u", "v", "z", "d", "w", "h", "bcos", "bsin",
                     "cx", "cy", "bw", "bh", "objectness")


@dataclass(frozen=True)
class BoxPrediction:
    u: float
    v: float
    z: float
    extents: tuple[float, float, float]
    angle: Biternion
    box2d: tuple[float, float, float, float]  # cx, cy, bw, bh (normalized)
    objectness: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.u, self.v, self.z, *self.extents,
                         self.angle.cos_component, self.angle.sin_component,
                         *self.box2d, self.objectness], dtype=float)

    @classmethod
    def from_vector(cls, vec) -> BoxPrediction:
        v = [float(x) for x in vec]
        return cls(v[0], v[1], v[2], (v[3], v[4], v[5]), Biternion(v[6], v[7]),
                   (v[8], v[9], v[10], v[11]), v[12])


@dataclass(frozen=True)
class BoxTarget:
    u: float
    v: float
    z: float
    extents: tuple[float, float, float]
    yaw: float
    box2d: tuple[float, float, float, float]
    objectness_label: int = 1

    def __post_init__(self) -> None:
        if min(self.extents) <= 0.0:
            raise ValueError("target extents must be strictly positive")
        if self.objectness_label not in (0, 1):
            raise ValueError("objectness label must be 0 or 1")


@dataclass(frozen=True)
class LossWeights:
    wu: float = 1.0
    wv: float = 1.0
    wz: float = 1.0
    centroids: float = 1.0
    angle: float = 1.0
    extents: float = 1.0
    l2d: float = 1.0

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0.0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    centroids: float
    angle: float
    extents: float
    l2d: float
    total: float


def centroid_loss(pred: BoxPrediction, tgt: BoxTarget,
                  weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> float:
    wu, wv, wz = weights
    if min(weights) < 0.0:
        raise ValueError("centroid weights must be non-negative")
    return wu * (pred.u - tgt.u) ** 2 + wv * (pred.v - tgt.v) ** 2 + wz * (pred.z - tgt.z) ** 2


def angle_loss(pred: Biternion, target_yaw: float) -> float:
    """Cosine distance between a (possibly unnormalized) biternion and the target yaw."""
    n = pred.norm
    if n == 0.0:
        raise ValueError("angle loss undefined for a zero-norm biternion")
    dot = pred.cos_component * math.cos(target_yaw) + pred.sin_component * math.sin(target_yaw)
    return 1.0 - dot / n


def extents_loss(pred, tgt) -> float:
    return sum(abs(float(p) - float(t)) for p, t in zip(pred, tgt))


def _objectness(p: float, clamp: bool) -> float:
    if clamp:
        return min(max(p, OBJECTNESS_EPS), 1.0 - OBJECTNESS_EPS)
    if not 0.0 < p < 1.0:
        raise ValueError(f"objectness must lie strictly inside (0, 1), got {p}")
    return p


def loss_2d(pred: BoxPrediction, tgt: BoxTarget, clamp: bool = False) -> float:
    geom = sum((p - t) ** 2 for p, t in zip(pred.box2d, tgt.box2d))
    p = _objectness(pred.objectness, clamp)
    y = tgt.objectness_label
    bce = -math.log(p) if y == 1 else -math.log1p(-p)
    return geom + bce


def combined_loss(pred: BoxPrediction, tgt: BoxTarget, weights: LossWeights | None = None,
                  clamp: bool = False) -> LossBreakdown:
    w = weights or LossWeights()
    lc = w.centroids * centroid_loss(pred, tgt, (w.wu, w.wv, w.wz))
    la = w.angle * angle_loss(pred.angle, tgt.yaw)
    le = w.extents * extents_loss(pred.extents, tgt.extents)
    l2 = w.l2d * loss_2d(pred, tgt, clamp)
    return LossBreakdown(lc, la, le, l2, lc + la + le + l2)


def loss_gradient(pred: BoxPrediction, tgt: BoxTarget, weights: LossWeights | None = None,
                  clamp: bool = False) -> np.ndarray:
    """Partial derivatives of ``combined_loss(...).total`` in :data:`PREDICTION_FIELDS` order.

    The l1 subgradient at an exact tie is 0.
    """
    w = weights or LossWeights()
    g = np.zeros(len(PREDICTION_FIELDS))
    g[0] = w.centroids * 2.0 * w.wu * (pred.u - tgt.u)
    g[1] = w.centroids * 2.0 * w.wv * (pred.v - tgt.v)
    g[2] = w.centroids * 2.0 * w.wz * (pred.z - tgt.z)
    for i, (p, t) in enumerate(zip(pred.extents, tgt.extents)):
        g[3 + i] = w.extents * float(np.sign(p - t))

    b = np.array([pred.angle.cos_component, pred.angle.sin_component])
    n = float(np.linalg.norm(b))
    if n == 0.0:
        raise ValueError("angle loss undefined for a zero-norm biternion")
    t = np.array([math.cos(tgt.yaw), math.sin(tgt.yaw)])
    # d/db [1 - b.t/|b|] = -(t/|b| - (b.t) b/|b|^3)
    g[6:8] = -w.angle * (t / n - float(b @ t) * b / n ** 3)

    for i, (p, q) in enumerate(zip(pred.box2d, tgt.box2d)):
        g[8 + i] = w.l2d * 2.0 * (p - q)
    p = _objectness(pred.objectness, clamp)
    y = tgt.objectness_label
    g[12] = w.l2d * (-1.0 / p if y == 1 else 1.0 / (1.0 - p))
    return g


def _total_extended(x: np.ndarray, tgt: BoxTarget, w: LossWeights) -> np.longdouble:
    # straight-line re-derivation of combined_loss in extended precision; shares
    # no code with the float64 path so it can serve as an oracle
    L = np.longdouble
    u, v, z, d, wd, h, bc, bs, cx, cy, bw, bh, p = x
    cen = L(w.wu) * (u - L(tgt.u)) ** 2 + L(w.wv) * (v - L(tgt.v)) ** 2 + L(w.wz) * (z - L(tgt.z)) ** 2
    ang = L(1) - (bc * np.cos(L(tgt.yaw)) + bs * np.sin(L(tgt.yaw))) / np.sqrt(bc * bc + bs * bs)
    ext = abs(d - L(tgt.extents[0])) + abs(wd - L(tgt.extents[1])) + abs(h - L(tgt.extents[2]))
    geo = ((cx - L(tgt.box2d[0])) ** 2 + (cy - L(tgt.box2d[1])) ** 2
           + (bw - L(tgt.box2d[2])) ** 2 + (bh - L(tgt.box2d[3])) ** 2)
    bce = -np.log(p) if tgt.objectness_label == 1 else -np.log(L(1) - p)
    return (L(w.centroids) * cen + L(w.angle) * ang + L(w.extents) * ext
            + L(w.l2d) * (geo + bce))


def finite_difference_gradient(pred: BoxPrediction, tgt: BoxTarget,
                               weights: LossWeights | None = None, step: float = 1e-6) -> np.ndarray:
    """Central differences of the combined loss, evaluated in extended precision."""
    w = weights or LossWeights()
    x = pred.as_vector().astype(np.longdouble)
    h = np.longdouble(step)
    g = np.zeros(x.size)
    for i in range(x.size):
        hi, lo = x.copy(), x.copy()
        hi[i] += h
        lo[i] -= h
        g[i] = float((_total_extended(hi, tgt, w) - _total_extended(lo, tgt, w)) / (2 * h))
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; the floor only guards 0/0."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def random_smooth_point(rng: np.random.Generator, kink_margin: float = 1e-3) -> tuple[BoxPrediction, BoxTarget]:
    """Draw a prediction/target pair away from l1 kinks and BCE boundaries."""
    tgt_ext = rng.uniform(0.2, 2.0, size=3)
    offsets = rng.uniform(kink_margin, 0.5, size=3) * rng.choice([-1.0, 1.0], size=3)
    pred_ext = tgt_ext + offsets
    radius = rng.uniform(0.2, 3.0)
    phi = rng.uniform(-math.pi, math.pi)
    pred = BoxPrediction(
        u=rng.uniform(0, 1), v=rng.uniform(0, 1), z=rng.uniform(0.5, 15.0),
        extents=tuple(pred_ext), angle=Biternion(radius * math.cos(phi), radius * math.sin(phi)),
        box2d=tuple(rng.uniform(0, 1, size=4)), objectness=rng.uniform(0.05, 0.95),
    )
    tgt = BoxTarget(
        u=rng.uniform(0, 1), v=rng.uniform(0, 1), z=rng.uniform(0.5, 15.0),
        extents=tuple(tgt_ext), yaw=rng.uniform(-math.pi, math.pi),
        box2d=tuple(rng.uniform(0, 1, size=4)), objectness_label=int(rng.integers(0, 2)),
    )
    return pred, tgt


def gradient_check(n_points: int = 1000, seed: int = 0, step: float = 1e-6) -> float:
    """Max relative error of the analytic gradient against central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        pred, tgt = random_smooth_point(rng)
        err = relative_error(loss_gradient(pred, tgt), finite_difference_gradient(pred, tgt, step=step))
        worst = max(worst, float(err.max()))
    return worst
