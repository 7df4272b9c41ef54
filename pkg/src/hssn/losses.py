"""Triplet, style and hybrid losses built from differentiable tensor ops."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .exceptions import ConfigurationError, DimensionError
from .tensor import Tensor, relu, sqrt

SQRT_STABILISER = 1e-12
STYLE_MODES = ("aux_vector", "raw_gram")
DISTANCES = ("euclidean", "squared_euclidean")


@dataclass(frozen=True)
class KlPolicy:
    """Per-layer scale of the negated style loss.

    ``kind="equal_to_m_l"`` uses the tapped layer's spatial size; ``"constant"``
    uses ``value`` for every layer.
    """

    kind: str = "equal_to_m_l"
    value: float = 1.0

    def resolve(self, m_l: int) -> float:
        if self.kind == "equal_to_m_l":
            return float(m_l)
        if self.kind == "constant":
            return float(self.value)
        raise ConfigurationError(f"K_l_policy kind must be 'equal_to_m_l' or 'constant', got {self.kind!r}")


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.2
    K: float = 2.0
    K_l_policy: KlPolicy = field(default_factory=KlPolicy)
    w1: float = 1.0
    w2: float = 1.0
    style_mode: str = "aux_vector"
    distance: str = "euclidean"

    def __post_init__(self):
        if isinstance(self.K_l_policy, dict):
            object.__setattr__(self, "K_l_policy", KlPolicy(**self.K_l_policy))
        elif isinstance(self.K_l_policy, str):
            object.__setattr__(self, "K_l_policy", KlPolicy(self.K_l_policy))
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigurationError(f"w1 and w2 must be >= 0, got {self.w1}, {self.w2}")
        if self.w1 + self.w2 <= 0:
            raise ConfigurationError("w1 + w2 must be > 0")
        if self.style_mode not in STYLE_MODES:
            raise ConfigurationError(f"style_mode must be one of {STYLE_MODES}, got {self.style_mode!r}")
        if self.distance not in DISTANCES:
            raise ConfigurationError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.K_l_policy.kind not in ("equal_to_m_l", "constant"):
            raise ConfigurationError(f"unknown K_l_policy {self.K_l_policy.kind!r}")


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def distance(e1: Tensor, e2: Tensor, kind: str = "euclidean") -> Tensor:
    _check_same(e1, e2, "distance")
    diff = e1 - e2
    sq = (diff * diff).sum()
    if kind == "squared_euclidean":
        return sq
    if kind == "euclidean":
        return sqrt(sq + SQRT_STABILISER)
    raise ConfigurationError(f"unknown distance kind {kind!r}")


def triplet_loss(eA: Tensor, eP: Tensor, eN: Tensor, params: LossParams = LossParams()) -> Tensor:
    """Hinge ``max(alpha + d(A, P) - d(A, N), 0)``."""
    _check_same(eA, eP, "triplet_loss")
    _check_same(eA, eN, "triplet_loss")
    d_ap = distance(eA, eP, params.distance)
    d_an = distance(eA, eN, params.distance)
    return relu(d_ap - d_an + params.alpha)


def style_loss_reference(gm1, gm2, n_l: int, m_l: int) -> float:
    """Classic gram-matrix style distance ``sum((G1 - G2)^2) / (4 n^2 m^2)``.

    Plain float result; kept as a reference and for property tests.
    """
    a = gm1.data if isinstance(gm1, Tensor) else np.asarray(gm1)
    b = gm2.data if isinstance(gm2, Tensor) else np.asarray(gm2)
    if a.shape != b.shape:
        raise DimensionError(f"style_loss_reference: shapes {a.shape} and {b.shape} differ")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float((d * d).sum() / (4.0 * n_l**2 * m_l**2))


def layer_style_loss(repP: Tensor, repN: Tensor, n_l: int, m_l: int, params: LossParams = LossParams()) -> Tensor:
    """Negated per-layer style loss ``K - K_l * sum((P - N)^2) / (4 n^2 m^2)``.

    Shrinks as the two representations move apart; it is deliberately not
    clamped below.
    """
    _check_same(repP, repN, "layer_style_loss")
    if n_l < 1 or m_l < 1:
        raise DimensionError(f"layer_style_loss: n_l and m_l must be positive, got {n_l}, {m_l}")
    scale = params.K_l_policy.resolve(m_l) / (4.0 * n_l**2 * m_l**2)
    diff = repP - repN
    return (diff * diff).sum() * (-scale) + params.K


def _style_rep(aux, mode: str) -> Tensor:
    return aux.style_vector if mode == "aux_vector" else aux.raw_gram


@dataclass
class LossBreakdown:
    triplet: float
    style: list

    @property
    def style_total(self) -> float:
        return float(sum(self.style))


def hybrid_loss(outA, outP, outN, params: LossParams = LossParams()) -> tuple:
    """``w1 * triplet + w2 * sum_l layer_style(P_l, N_l)``.

    Returns ``(total, LossBreakdown)`` where the breakdown holds the unweighted
    triplet term and each layer's unweighted style term.
    """
    if not len(outA.aux) == len(outP.aux) == len(outN.aux):
        raise DimensionError("hybrid_loss: forward outputs carry different numbers of style taps")
    trip = triplet_loss(outA.embedding, outP.embedding, outN.embedding, params)
    total = trip * params.w1
    styles = []
    if params.w2 != 0:
        for auxP, auxN in zip(outP.aux, outN.aux):
            if (auxP.n_l, auxP.m_l) != (auxN.n_l, auxN.m_l):
                raise DimensionError("hybrid_loss: positive and negative taps disagree on layer sizes")
            term = layer_style_loss(_style_rep(auxP, params.style_mode), _style_rep(auxN, params.style_mode), auxP.n_l, auxP.m_l, params)
            styles.append(term.item())
            total = total + term * params.w2
    return total, LossBreakdown(trip.item(), styles)
