"""The compound optimizer: damped-Newton steps for channelwise 1-D
parameters, SGD with momentum for everything else, plus the plain SGDM
baseline it degenerates to when no 1-D parameter exists.

Per step and 1-D parameter of curvature vector h and gradient g:

    h~   = |h| + eps                      rectification
    m_h  = (1 - alpha) m_h + alpha h~     Hessian momentum
    m_g  = (1 - beta)  m_g + beta  g      gradient momentum
    d    = tau_so * m_g / m_h             damped Newton direction
    w   -= tau * (d + eta w)              update with decoupled decay

Dense parameters skip the first two lines and use d = m_g. The momentum
recursions deliberately place the weight on the NEW term; set
momentum_convention="classical" for the mirrored form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

CONVENTIONS = ("new-term", "classical")


class MissingUpdateError(KeyError):
    pass


class InvariantViolation(RuntimeError):
    pass


@dataclass
class SgdPhConfig:
    tau: float = 0.01
    tau_so: float = 0.001
    alpha: float = 0.9
    beta_m: float = 0.9
    eta: float = 0.0
    eps: float = 0.0001
    momentum_convention: str = "new-term"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.tau_so > 0:
            raise ValueError(f"tau_so must be positive, got {self.tau_so}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0,1), got {self.alpha}")
        if not 0 < self.beta_m < 1:
            raise ValueError(f"beta_m must lie in (0,1), got {self.beta_m}")
        if self.eta < 0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")
        # eps = 0 is admitted here so the pure Newton scaling property is
        # testable; training configs enforce eps > 0 at the harness level
        if self.eps < 0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")
        if self.momentum_convention not in CONVENTIONS:
            raise ValueError(f"momentum_convention must be one of {CONVENTIONS}")


@dataclass
class ParamState:
    m_g: np.ndarray
    m_h: np.ndarray | None = None
    updates: int = 0


class OptState:
    """Momentum slots keyed by parameter name, zero-initialized; m_h exists
    only for channelwise-1d parameters."""

    def __init__(self, params):
        self.slots: dict[str, ParamState] = {}
        self.steps = 0
        for p in params:
            m_h = np.zeros_like(p.value) if p.kind == ad.CHANNELWISE_1D else None
            self.slots[p.name] = ParamState(m_g=np.zeros_like(p.value), m_h=m_h)

    def __getitem__(self, name: str) -> ParamState:
        return self.slots[name]


def rectify(h: np.ndarray, eps: float) -> np.ndarray:
    """Entrywise |h| + eps: the positive-definite surrogate of a possibly
    indefinite curvature vector."""
    return np.abs(h) + eps


def _mix(old: np.ndarray, new: np.ndarray, weight_new: float, convention: str) -> np.ndarray:
    if convention == "new-term":
        return (1.0 - weight_new) * old + weight_new * new
    return weight_new * old + (1.0 - weight_new) * new


def update_hessian_momentum(ps: ParamState, h_tilde: np.ndarray, alpha: float,
                            convention: str = "new-term") -> np.ndarray:
    ps.m_h = _mix(ps.m_h, h_tilde, alpha, convention)
    return ps.m_h


def update_grad_momentum(ps: ParamState, g: np.ndarray, beta_m: float,
                         convention: str = "new-term") -> np.ndarray:
    ps.m_g = _mix(ps.m_g, g, beta_m, convention)
    return ps.m_g


def direction_1d(ps: ParamState, g: np.ndarray, h: np.ndarray, cfg: SgdPhConfig) -> np.ndarray:
    h_tilde = rectify(h, cfg.eps)
    m_h = update_hessian_momentum(ps, h_tilde, cfg.alpha, cfg.momentum_convention)
    if np.min(m_h) <= 0:
        raise InvariantViolation(
            f"hessian momentum lost positivity (min {np.min(m_h):.3e}); "
            "eps = 0 with zero curvature?"
        )
    m_g = update_grad_momentum(ps, g, cfg.beta_m, cfg.momentum_convention)
    return cfg.tau_so * m_g / m_h


def direction_dense(ps: ParamState, g: np.ndarray, cfg: SgdPhConfig) -> np.ndarray:
    return update_grad_momentum(ps, g, cfg.beta_m, cfg.momentum_convention)


def _params_of(model_or_params):
    if hasattr(model_or_params, "parameters"):
        return model_or_params.parameters()
    return list(model_or_params)


def _apply(p, direction: np.ndarray, cfg: SgdPhConfig) -> None:
    d_tilde = direction + cfg.eta * p.value
    p.value = p.value - cfg.tau * d_tilde


def step(model, grads: dict, hdiags: dict, cfg: SgdPhConfig, state: OptState) -> None:
    """One compound update. grads must cover every parameter; hdiags must
    cover every channelwise-1d parameter."""
    for p in _params_of(model):
        if p.name not in grads:
            raise MissingUpdateError(f"no gradient supplied for parameter {p.name!r}")
        ps = state[p.name]
        if p.kind == ad.CHANNELWISE_1D:
            if p.name not in hdiags:
                raise MissingUpdateError(f"no curvature supplied for 1-D parameter {p.name!r}")
            d = direction_1d(ps, grads[p.name], hdiags[p.name], cfg)
        else:
            d = direction_dense(ps, grads[p.name], cfg)
        _apply(p, d, cfg)
        ps.updates += 1
    state.steps += 1


def sgdm_step(model, grads: dict, cfg: SgdPhConfig, state: OptState) -> None:
    """Baseline: the dense branch applied to every parameter uniformly."""
    for p in _params_of(model):
        if p.name not in grads:
            raise MissingUpdateError(f"no gradient supplied for parameter {p.name!r}")
        ps = state[p.name]
        d = direction_dense(ps, grads[p.name], cfg)
        _apply(p, d, cfg)
        ps.updates += 1
    state.steps += 1


def decayed_tau(base_tau: float, epoch: int, decay_every: int, decay_factor: float) -> float:
    """Step-decay schedule; decay_every <= 0 disables decay. Only tau is
    scheduled; tau_so stays constant and the effective second-order step
    still shrinks because tau multiplies the whole direction."""
    if decay_every <= 0:
        return base_tau
    return base_tau * decay_factor ** (epoch // decay_every)
