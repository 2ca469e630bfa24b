"""Structure-aware decay masks with learnable per-head start points.

For a structural index ``psi``, decay ratio ``lam`` and start point ``sp``
the exponential mask is ``lam ** relu(psi - sp)``, evaluated as
``exp(relu(psi - sp) * ln(lam))`` so it is differentiable in ``sp``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DECAY_FNS = ("exponential", "linear")
ZERO_MODES = ("multiplicative", "exclusion")
UNREACHABLE_POLICIES = ("max_plus_one", "fixed", "exclude")


class ConfigError(ValueError):
    pass


@dataclass
class DecayConfig:
    lam: float = 0.5
    decay_fn: str = "exponential"
    linear_endpoint: float = 6.0
    zero_mode: str = "multiplicative"
    unreachable_policy: str = "max_plus_one"
    unreachable_value: float | None = None
    index: str = "sph"

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"decay.lambda must lie in [0, 1], got {self.lam}")
        if self.decay_fn not in DECAY_FNS:
            raise ConfigError(f"decay.decay_fn must be one of {DECAY_FNS}")
        if self.zero_mode not in ZERO_MODES:
            raise ConfigError(f"decay.zero_mode must be one of {ZERO_MODES}")
        if self.unreachable_policy not in UNREACHABLE_POLICIES:
            raise ConfigError(f"decay.unreachable_policy must be one of {UNREACHABLE_POLICIES}")
        if self.unreachable_policy == "fixed" and self.unreachable_value is None:
            raise ConfigError("decay.unreachable_value is required with the 'fixed' policy")
        if self.decay_fn == "linear" and self.linear_endpoint <= 0:
            raise ConfigError("decay.linear_endpoint must be positive")


def initial_start_points(heads: int) -> list[float]:
    """Head ``t`` starts at ``sp = t`` so heads differ from the first step."""
    return [float(t) for t in range(heads)]


def _sp_value(sp) -> float:
    return float(sp.data) if isinstance(sp, Tensor) else float(sp)


def _psi_const(psi) -> Tensor:
    return Tensor(np.asarray(getattr(psi, "values", psi), dtype=np.float64))


def resolve_unreachable(psi, policy: str = "max_plus_one", value: float | None = None):
    """Replace unreachable entries so the matrix can feed a mask.

    Returns ``(resolved, exclude)`` where ``exclude`` flags pairs that must be
    dropped from the softmax (non-empty only under the ``exclude`` policy).
    """
    vals = np.array(getattr(psi, "values", psi), dtype=np.float64)
    unreachable = ~np.isfinite(vals)
    exclude = np.zeros(vals.shape, dtype=bool)
    if not unreachable.any():
        return vals, exclude
    finite = vals[~unreachable]
    # floor at one hop so unreachable pairs never look adjacent (edgeless graphs)
    top = max(float(finite.max()) if finite.size else 0.0, 1.0)
    if policy == "max_plus_one":
        vals[unreachable] = top + 1.0
    elif policy == "fixed":
        if value is None:
            raise ConfigError("fixed policy needs a value")
        vals[unreachable] = float(value)
    elif policy == "exclude":
        vals[unreachable] = top + 1.0
        exclude = unreachable
    else:
        raise ConfigError(f"unknown unreachable policy {policy!r}")
    return vals, exclude


def build_exponential_mask(psi, lam: float, sp) -> Tensor:
    """``lam ** relu(psi - sp)``; routes ``lam == 0`` to the hard neighbourhood mask."""
    if lam <= 0.0:
        return build_gnn_limit_mask(psi, sp)
    if lam > 1.0:
        raise ConfigError(f"lambda must lie in (0, 1], got {lam}")
    p = _psi_const(psi)
    sp_t = sp if isinstance(sp, Tensor) else Tensor(np.array(float(sp)))
    dist = T.relu(T.sub(p, T.expand(sp_t, p.shape)))
    return T.exp(T.mul(dist, math.log(lam)))


def build_gnn_limit_mask(psi, sp) -> Tensor:
    """The ``lam = 0`` limit with ``0 ** 0 = 1``: 1 where ``psi <= sp`` else 0.

    Constant in ``sp`` (its derivative vanishes almost everywhere).
    """
    vals = np.asarray(getattr(psi, "values", psi), dtype=np.float64)
    return Tensor((vals <= _sp_value(sp)).astype(np.float64))


def build_linear_mask(psi, sp, endpoint: float) -> Tensor:
    """``clamp(1 - relu(psi - sp) / (endpoint - sp), 0, 1)``."""
    if endpoint <= _sp_value(sp):
        raise ConfigError(f"linear endpoint {endpoint} must exceed start point {_sp_value(sp)}")
    p = _psi_const(psi)
    sp_t = sp if isinstance(sp, Tensor) else Tensor(np.array(float(sp)))
    span = T.expand(T.add(T.neg(sp_t), float(endpoint)), p.shape)
    ramp = T.div(T.relu(T.sub(p, T.expand(sp_t, p.shape))), span)
    # relu(psi - sp) >= 0 keeps the upper clamp implicit
    return T.relu(T.add(T.neg(ramp), 1.0))


def build_mask(psi, cfg: DecayConfig, sp) -> Tensor:
    if cfg.decay_fn == "linear":
        return build_linear_mask(psi, sp, cfg.linear_endpoint)
    if cfg.lam == 0.0:
        return build_gnn_limit_mask(psi, sp)
    return build_exponential_mask(psi, cfg.lam, sp)


def per_head_masks(psi, cfg: DecayConfig, start_points: Sequence, heads: int | None = None) -> Tensor:
    """One mask per head, stacked on a new axis just before the two node axes."""
    if heads is not None and len(start_points) != heads:
        raise ConfigError(f"expected {heads} start points, got {len(start_points)}")
    masks = [build_mask(psi, cfg, sp) for sp in start_points]
    vals = np.asarray(getattr(psi, "values", psi))
    return T.stack(masks, axis=vals.ndim - 2)


def exponential_mask_sp_grad(psi, lam: float, sp: float) -> np.ndarray:
    """Closed-form ``dM/dsp = -ln(lam) * M * [psi > sp]``."""
    vals = np.asarray(getattr(psi, "values", psi), dtype=np.float64)
    m = lam ** np.maximum(vals - sp, 0.0)
    return -math.log(lam) * m * (vals > sp)
