"""Prototype softmax and the segmentation objective.

Probability fields are (K, H, W) tensors with K = number of classes + 1
(channel 0 is background).  Label maps are integer (H, W) arrays.  Folding
of unannotated classes into channel 0 is done by a constant 0/1 matrix so
every loss stays an ordinary differentiable expression.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .prototypes import as_matrix

DEFAULT_TAU = 0.12
LOG_FLOOR = 1e-12

VOLUMETRIC = "volumetric"
SPARSE = "sparse"
UNLABELED = "unlabeled"


@dataclass(frozen=True)
class AnnotationSpec:
    """Which classes are annotated, and where.

    ``phi`` is used by the volumetric regime; the sparse regime uses
    ``rows`` with one class subset per row in ``row_phis``.
    """

    regime: str
    phi: tuple = ()
    rows: tuple = ()
    row_phis: tuple = ()

    def __post_init__(self):
        if self.regime not in (VOLUMETRIC, SPARSE, UNLABELED):
            raise ValueError(f"unknown annotation regime {self.regime!r}")
        object.__setattr__(self, "phi", tuple(int(c) for c in self.phi))
        object.__setattr__(self, "rows", tuple(int(r) for r in self.rows))
        object.__setattr__(self, "row_phis", tuple(tuple(int(c) for c in p) for p in self.row_phis))
        if self.regime == SPARSE:
            if len(self.rows) != len(self.row_phis):
                raise ValueError("sparse annotation needs one class subset per annotated row")
            if any(b <= a for a, b in zip(self.rows, self.rows[1:])):
                raise ValueError("sparse row indices must be strictly increasing")
        for p in (self.phi,) + self.row_phis:
            check_subset(p)

    @property
    def labeled(self):
        return self.regime != UNLABELED

    def classes(self):
        if self.regime == SPARSE:
            return tuple(sorted(set(c for p in self.row_phis for c in p)))
        return self.phi

    def with_phi(self, phi):
        """Same regions, every annotated subset replaced by ``phi``."""
        phi = tuple(phi)
        if self.regime == SPARSE:
            return AnnotationSpec(SPARSE, rows=self.rows, row_phis=(phi,) * len(self.rows))
        if self.regime == VOLUMETRIC:
            return AnnotationSpec(VOLUMETRIC, phi=phi)
        return self

    def to_dict(self):
        return {"regime": self.regime, "phi": list(self.phi), "rows": list(self.rows),
                "row_phis": [list(p) for p in self.row_phis]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["regime"], tuple(d.get("phi", ())), tuple(d.get("rows", ())),
                   tuple(tuple(p) for p in d.get("row_phis", ())))


def check_subset(phi, n=None):
    phi = tuple(phi)
    if any(b <= a for a, b in zip(phi, phi[1:])):
        raise ValueError(f"class subset {phi} must be strictly increasing")
    if phi and phi[0] < 1:
        raise ValueError(f"class subset {phi} may not contain background class 0")
    if n is not None and phi and phi[-1] > n:
        raise ValueError(f"class subset {phi} exceeds class count {n}")
    return phi


def one_hot(labels, n_channels):
    labels = np.asarray(labels)
    return (np.arange(n_channels).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(np.float64)


def fold_matrix(phi, n_channels):
    """(|phi|+1) x n_channels 0/1 matrix: row 0 sums every channel outside phi."""
    phi = check_subset(phi, n_channels - 1)
    fm = np.zeros((len(phi) + 1, n_channels))
    fm[0] = 1.0
    for r, c in enumerate(phi, start=1):
        fm[0, c] = 0.0
        fm[r, c] = 1.0
    return fm


def _apply_fold(fm, p):
    k, spatial = p.shape[0], p.shape[1:]
    flat = ad.reshape(p, (k, -1))
    return ad.reshape(ad.matmul(ad.Tensor(fm), flat), (fm.shape[0],) + spatial)


def prototype_softmax(features, protos, tau=DEFAULT_TAU):
    """Per-pixel softmax of cosine similarity to each prototype row, scaled by 1/tau."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    features = ad.as_tensor(features)
    pm = as_matrix(protos)
    d, spatial = features.shape[0], features.shape[1:]
    if pm.shape[1] != d:
        raise ad.ShapeError("prototype_softmax", f"prototypes of width {d}", pm.shape)
    fhat = ad.reshape(ad.l2_normalize(features, axis=0), (d, -1))
    logits = ad.mul(ad.matmul(ad.Tensor(pm), fhat), 1.0 / tau)
    return ad.reshape(ad.softmax(logits, axis=0), (pm.shape[0],) + spatial)


def remap(p, phi, n=None):
    """Fold every channel outside ``phi`` into channel 0; output channels are [0, *phi]."""
    p = ad.as_tensor(p)
    n = p.shape[0] - 1 if n is None else n
    if p.shape[0] != n + 1:
        raise ad.ShapeError("remap", f"{n + 1} channels", p.shape)
    return _apply_fold(fold_matrix(phi, n + 1), p)


def remap_labels(labels, phi):
    """Integer labels -> indices into [0, *phi]; classes outside phi become 0."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=np.int64)
    for r, c in enumerate(phi, start=1):
        out[labels == c] = r
    return out


def _log(p):
    return ad.log(ad.clamp_min(p, LOG_FLOOR))


def _focal_region(p, y, phi):
    """Focal CE over one region; p is (K, ...) and y matches p's spatial shape."""
    pt = remap(p, phi)
    yt = one_hot(remap_labels(y, phi), len(phi) + 1)
    ptrue = ad.sum(ad.mul(pt, yt), axis=0)
    return ad.neg(ad.mean(ad.mul(ad.power(ad.sub(1.0, ptrue), 2), _log(ptrue))))


def _dice_region(p, y, phi, eps):
    pt = remap(p, phi)
    k = len(phi) + 1
    yt = one_hot(remap_labels(y, phi), k)
    axes = tuple(range(1, pt.ndim))
    inter = ad.sum(ad.mul(pt, yt), axis=axes)
    fp = ad.sum(ad.mul(pt, 1.0 - yt), axis=axes)
    fn = ad.sum(ad.mul(ad.sub(1.0, pt), yt), axis=axes)
    num = ad.add(ad.mul(inter, 2.0), eps)
    den = ad.add(ad.add(ad.add(ad.mul(inter, 2.0), fp), fn), eps)
    return ad.sub(1.0, ad.mean(ad.div(num, den)))


def _per_regime(region_fn, p, y, spec):
    p = ad.as_tensor(p)
    y = np.asarray(y)
    if spec.regime == UNLABELED:
        raise ValueError("supervised loss requested for an unlabeled sample")
    if spec.regime == VOLUMETRIC:
        return region_fn(p, y, spec.phi)
    if not spec.rows:
        raise ValueError("sparse annotation with no annotated rows")
    terms = [region_fn(ad.take(p, [r], axis=1), y[r:r + 1], phi)
             for r, phi in zip(spec.rows, spec.row_phis)]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def focal_ce(p, y, spec):
    """Ambiguity-aware focal cross-entropy, -(1-p)^2 log p averaged over pixels."""
    return _per_regime(_focal_region, p, y, spec)


def dice_loss(p, y, spec, eps=1.0):
    return _per_regime(lambda pp, yy, phi: _dice_region(pp, yy, phi, eps), p, y, spec)


def entropy_loss(p):
    p = ad.as_tensor(p)
    n_pix = p.size // p.shape[0]
    return ad.mul(ad.sum(ad.mul(p, _log(p))), -1.0 / n_pix)


def volume_loss(p, n=None):
    """Foreground mass summed over pixels, averaged over classes 1..n."""
    p = ad.as_tensor(p)
    n = p.shape[0] - 1 if n is None else n
    if n < 1:
        raise ValueError("volume loss needs at least one foreground class")
    return ad.mul(ad.sum(ad.take(p, np.arange(1, n + 1), axis=0)), 1.0 / n)


def kd_loss(p_teacher, p_student, n, m, exclude_mask=None):
    """KL(teacher || folded student) averaged over non-excluded pixels.

    The student's channel 0 and new channels n+1..n+m are summed into one
    background channel before comparison.
    """
    pt = np.asarray(p_teacher.data if isinstance(p_teacher, ad.Tensor) else p_teacher, dtype=np.float64)
    ps = ad.as_tensor(p_student)
    if pt.shape[0] != n + 1 or ps.shape[0] != n + m + 1 or pt.shape[1:] != ps.shape[1:]:
        raise ad.ShapeError("kd_loss", f"teacher {n + 1} / student {n + m + 1} channels, same extent",
                            (pt.shape, ps.shape))
    weights = np.ones(pt.shape[1:])
    if exclude_mask is not None:
        weights = np.where(np.asarray(exclude_mask, dtype=bool), 0.0, 1.0)
    kept = weights.sum()
    if kept == 0:
        raise ValueError("every pixel is excluded from distillation")
    weights = weights / kept
    folded = _apply_fold(fold_matrix(tuple(range(1, n + 1)), n + m + 1), ps)
    with np.errstate(divide="ignore", invalid="ignore"):
        self_term = np.where(pt > 0, pt * np.log(pt), 0.0)
    cross = ad.sum(ad.mul(_log(folded), pt * weights[None]))
    return ad.sub(float((self_term.sum(axis=0) * weights).sum()), cross)


# -- weighted objective -----------------------------------------------------------
@dataclass
class LossWeights:
    lambda1_labeled: float = 1.0
    lambda1_unlabeled: float = 3.0
    lambda2_base: float = 1e-5
    lambda2_epochs: float = 5.0
    epoch_iterations: int = 1000
    lambda3: float = 0.0


def lambda2_at(epoch, weights=None):
    w = weights or LossWeights()
    return w.lambda2_base * max((w.lambda2_epochs - epoch) / w.lambda2_epochs, 0.0)


@dataclass
class SampleLosses:
    """Loss components of one sample; unused terms stay ``None``."""

    entropy: object
    volume: object
    focal_ce: object = None
    dice: object = None
    kd: object = None
    labeled: bool = True
    parts: dict = field(default_factory=dict)


def total_loss(sample, weights, epoch):
    """focal_ce + dice + l1*entropy + l2*volume + l3*kd for one sample."""
    l1 = weights.lambda1_labeled if sample.labeled else weights.lambda1_unlabeled
    l2 = lambda2_at(epoch, weights)
    terms = [ad.mul(sample.entropy, l1), ad.mul(sample.volume, l2)]
    if sample.labeled:
        terms = [sample.focal_ce, sample.dice] + terms
    if weights.lambda3 > 0:
        if sample.kd is None:
            raise ValueError("distillation weight is positive but no teacher field was given")
        terms.append(ad.mul(sample.kd, weights.lambda3))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
