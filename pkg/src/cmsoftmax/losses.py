"""Softmax losses over a unit-weight, zero-bias classifier head.

Four members share one code path: logits are ``scale_i * t_ij`` where
``t_ij`` is the (possibly margin-adjusted) cosine between feature ``i`` and
class weight ``j``, and ``scale_i`` is

* ``‖x_i‖``                          -- plain softmax,
* a constant ``s``                   -- fixed-norm softmax (NormFace style),
* ``f(‖x_i‖)``                       -- contraction-mapped softmax,

with the margin variants applying ``psi`` to the true-class cosine only.
The contraction ``f`` squeezes raw norms into ``[s_lower, s_upper)`` while
keeping their order, so small-norm samples still get larger gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import DegenerateFeatureError, DimensionError, DomainError

COS_EPS = 1e-7
ADDITIVE_COSINE = "additive_cosine"
ADDITIVE_ANGLE = "additive_angle"
LOSS_KINDS = ("softmax", "fixed_norm", "cm_softmax", "cm_margin", "fixed_margin")


# --------------------------------------------------------------------------
# norm bounds
# --------------------------------------------------------------------------


def lower_bound(p: float, c: int) -> float:
    """Smallest feature norm giving true-class probability ``p`` among ``c`` classes.

    Evaluates ``log(p (c - 2) / (1 - p))`` with the natural log.  Requires
    ``c >= 3`` and an argument above 1 so the bound is positive.
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"p must lie in (0, 1), got {p}")
    if c <= 2:
        raise DomainError(f"class count must be at least 3, got {c} (the c-2 term vanishes)")
    arg = p * (c - 2) / (1.0 - p)
    if arg <= 1.0:
        raise DomainError(f"p(c-2)/(1-p) = {arg:g} <= 1 gives a non-positive lower bound")
    return math.log(arg)


def upper_bound(s_lower: float) -> float:
    if not s_lower > 0:
        raise DomainError(f"lower bound must be positive, got {s_lower}")
    return 3.0 * s_lower


@dataclass(frozen=True)
class ContractionSpec:
    p: float = 0.9
    c: int = 10
    gamma: float = 1.0
    s_lower: float = field(init=False)
    s_upper: float = field(init=False)

    def __post_init__(self):
        if not self.gamma > 0 or not math.isfinite(self.gamma):
            raise DomainError(f"gamma must be positive and finite, got {self.gamma}")
        lo = lower_bound(self.p, self.c)
        object.__setattr__(self, "s_lower", lo)
        object.__setattr__(self, "s_upper", upper_bound(lo))

    @property
    def width(self) -> float:
        return self.s_upper - self.s_lower


@dataclass(frozen=True)
class MarginSpec:
    variant: str = ADDITIVE_ANGLE
    margin: float = 0.5

    def __post_init__(self):
        if self.variant not in (ADDITIVE_COSINE, ADDITIVE_ANGLE):
            raise DomainError(f"unknown margin variant {self.variant!r}")
        if not self.margin >= 0:
            raise DomainError(f"margin must be non-negative, got {self.margin}")
        limit = math.pi / 2 if self.variant == ADDITIVE_ANGLE else 1.0
        if self.margin >= limit:
            raise DomainError(f"{self.variant} margin must be below {limit:g}, got {self.margin}")


@dataclass(frozen=True)
class FixedNormSpec:
    s: float = 10.0

    def __post_init__(self):
        if not (self.s > 0 and math.isfinite(self.s)):
            raise DomainError(f"fixed norm must be finite and positive, got {self.s}")


# --------------------------------------------------------------------------
# contraction mapping
# --------------------------------------------------------------------------


def _check_norms(norm) -> np.ndarray:
    n = np.asarray(norm, dtype=np.float64)
    if np.any(n < 0) or not np.all(np.isfinite(n)):
        raise DomainError("feature norms must be finite and non-negative")
    return n


def contract(norm, spec: ContractionSpec):
    """f(n) = s_lower + (2 sigmoid(gamma n) - 1)(s_upper - s_lower), on plain arrays."""
    n = _check_norms(norm)
    out = spec.s_lower + (2.0 * ad.sigmoid_array(spec.gamma * n) - 1.0) * spec.width
    return out if out.ndim else float(out)


def contraction_gap(norm, spec: ContractionSpec):
    """Distance ``s_upper - f(n)`` computed without cancellation.

    Stays strictly positive (and strictly decreasing) long after ``f(n)``
    itself rounds to ``s_upper`` in float64.
    """
    n = _check_norms(norm)
    out = 2.0 * spec.width * ad.sigmoid_array(-spec.gamma * n)
    return out if out.ndim else float(out)


def contraction_derivative(norm, spec: ContractionSpec):
    """df/dn = 2 gamma sigmoid(gamma n)(1 - sigmoid(gamma n))(s_upper - s_lower)."""
    n = _check_norms(norm)
    e = np.exp(-spec.gamma * n)
    out = 2.0 * spec.gamma * spec.width * e / (1.0 + e) ** 2
    return out if out.ndim else float(out)


def contraction_map(norms: Node, spec: ContractionSpec) -> Node:
    norms = ad.as_node(norms)
    value = np.asarray(contract(norms.value, spec))
    slope = np.asarray(contraction_derivative(norms.value, spec))

    def back(g):
        return (g * slope,)

    return ad.custom_op(value, (norms,), back, "contraction_map")


# --------------------------------------------------------------------------
# margins
# --------------------------------------------------------------------------


def psi_value(cosine, margin: MarginSpec):
    u = np.asarray(cosine, dtype=np.float64)
    if margin.variant == ADDITIVE_COSINE:
        out = u - margin.margin
    else:
        out = np.cos(np.arccos(np.clip(u, -1 + COS_EPS, 1 - COS_EPS)) + margin.margin)
    return out if out.ndim else float(out)


def psi(cosine, margin: MarginSpec) -> Node:
    """Margin-adjusted true-class cosine: ``cos θ - m`` or ``cos(θ + m)``."""
    cosine = ad.as_node(cosine)
    if margin.variant == ADDITIVE_COSINE:
        return ad.sub(cosine, margin.margin)
    u = cosine.value
    inside = (u >= -1 + COS_EPS) & (u <= 1 - COS_EPS)
    uc = np.clip(u, -1 + COS_EPS, 1 - COS_EPS)
    theta = np.arccos(uc)
    value = np.cos(theta + margin.margin)
    # d/du cos(arccos u + m) = sin(arccos u + m) / sqrt(1 - u^2)
    slope = np.where(inside, np.sin(theta + margin.margin) / np.sqrt(1.0 - uc * uc), 0.0)

    def back(g):
        return (g * slope,)

    return ad.custom_op(value, (cosine,), back, "psi_additive_angle")


# --------------------------------------------------------------------------
# classifier head and losses
# --------------------------------------------------------------------------


class ClassifierHead:
    """Zero-bias linear layer whose columns are normalised on every forward pass."""

    def __init__(self, weight: Parameter):
        if weight.value.ndim != 2:
            raise DimensionError(f"head weight must be [d x c], got {weight.shape}")
        self.weight = weight

    @classmethod
    def init(cls, dim: int, classes: int, rng, name: str = "head.W") -> "ClassifierHead":
        bound = math.sqrt(6.0 / dim)
        return cls(Parameter(name, rng.uniform_array((dim, classes), -bound, bound)))

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    @property
    def classes(self) -> int:
        return self.weight.shape[1]

    def normalized(self) -> Node:
        norms = ad.row_l2_norm(ad.transpose(self.weight))
        if np.any(norms.value == 0):
            raise DegenerateFeatureError("classifier weight column of zero length")
        return ad.div(self.weight, ad.reshape(norms, (1, self.classes)))


@dataclass
class LossOutput:
    loss: Node
    probabilities: np.ndarray  # P_{y_i}, shape [m]
    logits: Node
    cosines: np.ndarray | None = None
    norms: np.ndarray | None = None
    scales: np.ndarray | None = None  # the per-sample multiplier of the cosines


def _cosines_and_norms(features: Node, head: ClassifierHead) -> tuple[Node, Node]:
    features = ad.as_node(features)
    if features.value.ndim != 2 or features.shape[1] != head.dim:
        raise DimensionError(f"features {features.shape} do not match head dimension {head.dim}")
    norms = ad.row_l2_norm(features)
    if np.any(norms.value == 0):
        row = int(np.flatnonzero(norms.value == 0)[0])
        raise DegenerateFeatureError(f"feature row {row} has zero norm; its cosine is undefined")
    unit = ad.div(features, ad.reshape(norms, (features.shape[0], 1)))
    cos = ad.clip(ad.matmul(unit, head.normalized()), -1 + COS_EPS, 1 - COS_EPS)
    return cos, norms


def cosine_logits(features, head: ClassifierHead) -> Node:
    return _cosines_and_norms(features, head)[0]


def softmax_xent(logits, labels) -> LossOutput:
    logits = ad.as_node(logits)
    loss, probs = ad.softmax_cross_entropy(logits, labels)
    labels = np.asarray(labels, dtype=np.int64)
    return LossOutput(loss, probs[np.arange(len(labels)), labels], logits)


def _apply_margin(cos: Node, labels: np.ndarray, margin: MarginSpec) -> Node:
    mask = np.zeros(cos.shape)
    mask[np.arange(cos.shape[0]), labels] = 1.0
    return ad.add(ad.mul(psi(cos, margin), mask), ad.mul(cos, 1.0 - mask))


def _scaled_softmax(
    features,
    head: ClassifierHead,
    labels,
    scale_fn: Callable[[Node], Node],
    margin: MarginSpec | None = None,
) -> LossOutput:
    labels = np.asarray(labels, dtype=np.int64)
    cos, norms = _cosines_and_norms(features, head)
    m = cos.shape[0]
    scale = scale_fn(norms)
    target = cos if margin is None else _apply_margin(cos, labels, margin)
    logits = ad.mul(ad.reshape(scale, (m, 1)), target)
    out = softmax_xent(logits, labels)
    out.cosines = cos.value
    out.norms = norms.value
    out.scales = np.broadcast_to(scale.value, (m,)).copy()
    return out


def plain_softmax_loss(features, head: ClassifierHead, labels) -> LossOutput:
    return _scaled_softmax(features, head, labels, lambda norms: norms)


def _constant_scale(s: float) -> Callable[[Node], Node]:
    return lambda norms: ad.constant(np.full(norms.shape, s))


def fixed_norm_loss(features, head: ClassifierHead, labels, spec: FixedNormSpec) -> LossOutput:
    return _scaled_softmax(features, head, labels, _constant_scale(spec.s))


def fixed_margin_loss(
    features, head: ClassifierHead, labels, spec: FixedNormSpec, margin: MarginSpec
) -> LossOutput:
    """Fixed norm plus true-class margin (CosFace / ArcFace baselines)."""
    return _scaled_softmax(features, head, labels, _constant_scale(spec.s), margin)


def cm_softmax_loss(
    features,
    head: ClassifierHead,
    labels,
    spec: ContractionSpec,
    norm_map: Callable[[Node], Node] | None = None,
) -> LossOutput:
    """Softmax over ``f(‖x_i‖) cos θ_ij`` for every class j.

    ``norm_map`` replaces the contraction (used to check degenerate cases).
    """
    return _scaled_softmax(features, head, labels, norm_map or (lambda n: contraction_map(n, spec)))


def cm_margin_softmax_loss(
    features,
    head: ClassifierHead,
    labels,
    spec: ContractionSpec,
    margin: MarginSpec,
    norm_map: Callable[[Node], Node] | None = None,
) -> LossOutput:
    return _scaled_softmax(
        features, head, labels, norm_map or (lambda n: contraction_map(n, spec)), margin
    )


@dataclass(frozen=True)
class LossSpec:
    """Selects one loss of the family together with its parameters."""

    kind: str = "softmax"
    s: float = 10.0
    p: float = 0.9
    gamma: float = 1.0
    variant: str = ADDITIVE_ANGLE
    m: float = 0.5

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise DomainError(f"unknown loss kind {self.kind!r}; expected one of {', '.join(LOSS_KINDS)}")
        if self.kind in ("fixed_norm", "fixed_margin"):
            FixedNormSpec(self.s)
        if self.kind in ("cm_margin", "fixed_margin"):
            MarginSpec(self.variant, self.m)

    def contraction(self, classes: int) -> ContractionSpec:
        return ContractionSpec(self.p, classes, self.gamma)

    def __call__(self, features, head: ClassifierHead, labels) -> LossOutput:
        if self.kind == "softmax":
            return plain_softmax_loss(features, head, labels)
        if self.kind == "fixed_norm":
            return fixed_norm_loss(features, head, labels, FixedNormSpec(self.s))
        if self.kind == "fixed_margin":
            return fixed_margin_loss(
                features, head, labels, FixedNormSpec(self.s), MarginSpec(self.variant, self.m)
            )
        spec = self.contraction(head.classes)
        if self.kind == "cm_softmax":
            return cm_softmax_loss(features, head, labels, spec)
        return cm_margin_softmax_loss(features, head, labels, spec, MarginSpec(self.variant, self.m))

    def as_dict(self) -> dict:
        keep = {
            "softmax": (),
            "fixed_norm": ("s",),
            "cm_softmax": ("p", "gamma"),
            "cm_margin": ("p", "gamma", "variant", "m"),
            "fixed_margin": ("s", "variant", "m"),
        }[self.kind]
        return {"kind": self.kind, **{k: getattr(self, k) for k in keep}}
