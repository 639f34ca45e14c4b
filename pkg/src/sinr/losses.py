"""Single-positive multi-label losses for presence-only training.

Each training example carries exactly one confirmed-present species and no
confirmed absences. The losses here fill in the missing supervision in two
families: the "assume negative" (AN) family treats unobserved labels as
absent, and the "maximum entropy" (ME) family replaces every
``-log(1 - p)`` absence term with the Bernoulli entropy ``H(p)``.

Within each family there are three variants distinguished by where the
negative signal comes from:

- ``ssdl``: the same species at a uniformly random pseudo-location,
- ``slds``: a uniformly random other species at the same location,
- ``full``: every non-positive species at the data location (positive term
  weighted by ``lam``) plus every species at a random pseudo-location.

All functions return the batch-mean loss value together with exact gradients
with respect to the prediction arrays (the ``1/batch`` factor included), so a
caller can backpropagate them through the network. Predictions are clamped to
``[CLAMP_EPS, 1 - CLAMP_EPS]`` in float64 before any logarithm, which keeps
values and gradients finite even when a float32 sigmoid saturates.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

#: Predictions are clamped this far inside the unit interval before logs.
CLAMP_EPS = 1e-7


class LossVariant(str, Enum):
    AN_SSDL = "an-ssdl"
    AN_SLDS = "an-slds"
    AN_FULL = "an-full"
    ME_SSDL = "me-ssdl"
    ME_SLDS = "me-slds"
    ME_FULL = "me-full"


def needs_pseudo_negatives(variant: LossVariant) -> bool:
    """Whether a variant consumes predictions at random pseudo-locations."""
    return variant in (
        LossVariant.AN_SSDL,
        LossVariant.AN_FULL,
        LossVariant.ME_SSDL,
        LossVariant.ME_FULL,
    )


@dataclass(frozen=True)
class LossConfig:
    """Training-loss selection: variant plus the positive weight ``lam``.

    ``lam`` multiplies the confirmed-positive term of the ``full`` variants
    and is ignored by the others.
    """

    variant: LossVariant
    lam: float = 2048.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", LossVariant(self.variant))
        lam = float(self.lam)
        if not np.isfinite(lam) or lam <= 0.0:
            raise ValueError(f"lam must be a positive finite float, got {self.lam}")
        object.__setattr__(self, "lam", lam)


@dataclass(frozen=True)
class BatchTargets:
    """Per-example confirmed-positive species indices for one batch."""

    positive_index: np.ndarray
    n_species: int

    def __post_init__(self) -> None:
        idx = np.asarray(self.positive_index)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError(f"positive_index must be 1-D and non-empty, got shape {idx.shape}")
        if not np.issubdtype(idx.dtype, np.integer):
            raise TypeError(f"positive_index must be integral, got dtype {idx.dtype}")
        if self.n_species < 1:
            raise ValueError(f"n_species must be >= 1, got {self.n_species}")
        if np.any(idx < 0) or np.any(idx >= self.n_species):
            raise ValueError("positive_index entries must lie in [0, n_species)")
        object.__setattr__(self, "positive_index", idx.astype(np.int64))
        object.__setattr__(self, "n_species", int(self.n_species))

    @property
    def batch_size(self) -> int:
        return int(self.positive_index.shape[0])


@dataclass(frozen=True)
class LossResult:
    """Loss value plus gradients for whichever prediction arrays were used."""

    value: float
    d_y_hat: np.ndarray
    d_y_hat_rand: np.ndarray | None = None
    j_prime: np.ndarray | None = None


def bernoulli_entropy(p):
    """Entropy of a Bernoulli(p) variable in nats, with ``0 log 0 = 0``.

    Accepts a scalar or array with every entry in [0, 1]; returns the same
    shape (a plain float for scalar input).

    >>> round(bernoulli_entropy(0.5), 7)
    0.6931472
    """
    arr = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("bernoulli_entropy requires probabilities in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(
            np.where(arr > 0.0, arr * np.log(arr), 0.0)
            + np.where(arr < 1.0, (1.0 - arr) * np.log1p(-arr), 0.0)
        )
    if np.ndim(p) == 0:
        return float(h)
    return h


def _clamp(y_hat: np.ndarray, targets: BatchTargets, name: str) -> np.ndarray:
    arr = np.asarray(y_hat, dtype=np.float64)
    expected = (targets.batch_size, targets.n_species)
    if arr.shape != expected:
        raise ValueError(f"{name} must have shape {expected}, got {arr.shape}")
    return np.clip(arr, CLAMP_EPS, 1.0 - CLAMP_EPS)


def _entropy_grad(p: np.ndarray) -> np.ndarray:
    """d/dp of bernoulli_entropy at clamped p: log((1-p)/p)."""
    return np.log1p(-p) - np.log(p)


def loss_an_ssdl(
    y_hat: np.ndarray, y_hat_rand: np.ndarray, targets: BatchTargets
) -> tuple[float, np.ndarray, np.ndarray]:
    """Assume-negative loss with a same-species pseudo-negative.

    Per example: ``-(log y[j] + log(1 - y'[j]))`` at the positive species j,
    where ``y'`` is the prediction at a random pseudo-location. Returns
    ``(value, d_y_hat, d_y_hat_rand)``.
    """
    c = _clamp(y_hat, targets, "y_hat")
    cr = _clamp(y_hat_rand, targets, "y_hat_rand")
    b = targets.batch_size
    rows = np.arange(b)
    j = targets.positive_index
    value = float(np.mean(-np.log(c[rows, j]) - np.log1p(-cr[rows, j])))
    d = np.zeros_like(c)
    dr = np.zeros_like(cr)
    d[rows, j] = -1.0 / (c[rows, j] * b)
    dr[rows, j] = 1.0 / ((1.0 - cr[rows, j]) * b)
    return value, d, dr


def _draw_j_prime(
    targets: BatchTargets,
    rng: np.random.Generator | None,
    j_prime: np.ndarray | None,
) -> np.ndarray:
    s = targets.n_species
    if s < 2:
        raise ValueError("slds variants require at least two species")
    j = targets.positive_index
    if j_prime is None:
        if rng is None:
            raise ValueError("slds variants need an rng (or an explicit j_prime)")
        # Uniform over the S-1 non-positive species: draw in [0, S-1) and
        # shift draws at or above the positive index up by one.
        u = rng.integers(0, s - 1, size=targets.batch_size)
        return u + (u >= j)
    jp = np.asarray(j_prime)
    if jp.shape != j.shape or not np.issubdtype(jp.dtype, np.integer):
        raise ValueError("j_prime must be an integer array matching positive_index")
    if np.any(jp < 0) or np.any(jp >= s) or np.any(jp == j):
        raise ValueError("j_prime entries must be valid non-positive species indices")
    return jp.astype(np.int64)


def loss_an_slds(
    y_hat: np.ndarray,
    targets: BatchTargets,
    rng: np.random.Generator | None = None,
    j_prime: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Assume-negative loss with a same-location different-species negative.

    Per example: ``-(log y[j] + log(1 - y[j']))`` with j' drawn uniformly
    from the non-positive species. Returns ``(value, d_y_hat, j_prime)`` so a
    caller can replay the draw.
    """
    c = _clamp(y_hat, targets, "y_hat")
    jp = _draw_j_prime(targets, rng, j_prime)
    b = targets.batch_size
    rows = np.arange(b)
    j = targets.positive_index
    value = float(np.mean(-np.log(c[rows, j]) - np.log1p(-c[rows, jp])))
    d = np.zeros_like(c)
    d[rows, j] = -1.0 / (c[rows, j] * b)
    d[rows, jp] = 1.0 / ((1.0 - c[rows, jp]) * b)
    return value, d, jp


def loss_an_full(
    y_hat: np.ndarray, y_hat_rand: np.ndarray, targets: BatchTargets, lam: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Assume-negative loss over every species slot.

    Per example, averaged over species: ``lam * -log y[j]`` at the positive,
    ``-log(1 - y[k])`` at every other k, and ``-log(1 - y'[k])`` at every k of
    the pseudo-location prediction. Returns ``(value, d_y_hat, d_y_hat_rand)``.
    """
    lam = float(lam)
    if not np.isfinite(lam) or lam <= 0.0:
        raise ValueError(f"lam must be a positive finite float, got {lam}")
    c = _clamp(y_hat, targets, "y_hat")
    cr = _clamp(y_hat_rand, targets, "y_hat_rand")
    b = targets.batch_size
    s = targets.n_species
    rows = np.arange(b)
    j = targets.positive_index

    terms = -np.log1p(-c)
    terms[rows, j] = lam * -np.log(c[rows, j])
    value = float(np.mean((terms.sum(axis=1) + (-np.log1p(-cr)).sum(axis=1)) / s))

    d = 1.0 / ((1.0 - c) * (s * b))
    d[rows, j] = -lam / (c[rows, j] * (s * b))
    dr = 1.0 / ((1.0 - cr) * (s * b))
    return value, d, dr


def loss_me_ssdl(
    y_hat: np.ndarray, y_hat_rand: np.ndarray, targets: BatchTargets
) -> tuple[float, np.ndarray, np.ndarray]:
    """Maximum-entropy counterpart of :func:`loss_an_ssdl`.

    The pseudo-negative term ``-log(1 - y'[j])`` is replaced by ``H(y'[j])``.
    """
    c = _clamp(y_hat, targets, "y_hat")
    cr = _clamp(y_hat_rand, targets, "y_hat_rand")
    b = targets.batch_size
    rows = np.arange(b)
    j = targets.positive_index
    value = float(np.mean(-np.log(c[rows, j]) + bernoulli_entropy(cr[rows, j])))
    d = np.zeros_like(c)
    dr = np.zeros_like(cr)
    d[rows, j] = -1.0 / (c[rows, j] * b)
    dr[rows, j] = _entropy_grad(cr[rows, j]) / b
    return value, d, dr


def loss_me_slds(
    y_hat: np.ndarray,
    targets: BatchTargets,
    rng: np.random.Generator | None = None,
    j_prime: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Maximum-entropy counterpart of :func:`loss_an_slds`."""
    c = _clamp(y_hat, targets, "y_hat")
    jp = _draw_j_prime(targets, rng, j_prime)
    b = targets.batch_size
    rows = np.arange(b)
    j = targets.positive_index
    value = float(np.mean(-np.log(c[rows, j]) + bernoulli_entropy(c[rows, jp])))
    d = np.zeros_like(c)
    d[rows, j] = -1.0 / (c[rows, j] * b)
    d[rows, jp] = _entropy_grad(c[rows, jp]) / b
    return value, d, jp


def loss_me_full(
    y_hat: np.ndarray, y_hat_rand: np.ndarray, targets: BatchTargets, lam: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Maximum-entropy counterpart of :func:`loss_an_full`.

    Every ``-log(1 - p)`` absence term becomes ``H(p)``; the weighted
    positive term is unchanged.
    """
    lam = float(lam)
    if not np.isfinite(lam) or lam <= 0.0:
        raise ValueError(f"lam must be a positive finite float, got {lam}")
    c = _clamp(y_hat, targets, "y_hat")
    cr = _clamp(y_hat_rand, targets, "y_hat_rand")
    b = targets.batch_size
    s = targets.n_species
    rows = np.arange(b)
    j = targets.positive_index

    terms = bernoulli_entropy(c)
    terms[rows, j] = lam * -np.log(c[rows, j])
    value = float(np.mean((terms.sum(axis=1) + bernoulli_entropy(cr).sum(axis=1)) / s))

    d = _entropy_grad(c) / (s * b)
    d[rows, j] = -lam / (c[rows, j] * (s * b))
    dr = _entropy_grad(cr) / (s * b)
    return value, d, dr


def compute_loss(
    cfg: LossConfig,
    y_hat: np.ndarray,
    targets: BatchTargets,
    *,
    y_hat_rand: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    j_prime: np.ndarray | None = None,
) -> LossResult:
    """Evaluate the configured loss variant on one batch.

    ``y_hat_rand`` is required for the ssdl/full variants; ``rng`` (or a
    replayed ``j_prime``) is required for the slds variants.
    """
    variant = cfg.variant
    if needs_pseudo_negatives(variant):
        if y_hat_rand is None:
            raise ValueError(f"variant {variant.value!r} requires y_hat_rand")
        if variant is LossVariant.AN_SSDL:
            value, d, dr = loss_an_ssdl(y_hat, y_hat_rand, targets)
        elif variant is LossVariant.ME_SSDL:
            value, d, dr = loss_me_ssdl(y_hat, y_hat_rand, targets)
        elif variant is LossVariant.AN_FULL:
            value, d, dr = loss_an_full(y_hat, y_hat_rand, targets, cfg.lam)
        else:
            value, d, dr = loss_me_full(y_hat, y_hat_rand, targets, cfg.lam)
        return LossResult(value, d, d_y_hat_rand=dr)
    if variant is LossVariant.AN_SLDS:
        value, d, jp = loss_an_slds(y_hat, targets, rng=rng, j_prime=j_prime)
    else:
        value, d, jp = loss_me_slds(y_hat, targets, rng=rng, j_prime=j_prime)
    return LossResult(value, d, j_prime=jp)
