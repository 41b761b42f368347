"""Brute-force verification of every differential quantity.

Finite differences here are the ground truth the tape is judged against:
losses are evaluated through the plain-array forward path only, so the
adjoint machinery under test contributes nothing to the reference
numbers. All oracle arithmetic runs in f64.

Error metric used throughout: max_i |a_i - b_i| / (1 + |b_i|), an
entrywise relative error with an additive floor so near-zero reference
entries do not blow up the ratio.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from . import optim
from .tensor import Rng


class NonFiniteLossError(ValueError):
    pass


@dataclass
class FdSpec:
    h: float = 1e-4
    scheme: str = "central"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"finite-difference step must be positive, got {self.h}")
        if self.scheme != "central":
            raise ValueError(f"only the central scheme is implemented, got {self.scheme!r}")


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / (1.0 + np.abs(b)))) if a.size else 0.0


def _eval(lossfn, values: dict[str, np.ndarray], name: str, shifts: dict[int, float]) -> float:
    w = values[name].copy()
    flat = w.ravel()
    for idx, s in shifts.items():
        flat[idx] += s
    out = float(lossfn({**values, name: w}))
    if not np.isfinite(out):
        raise NonFiniteLossError(f"loss not finite at perturbation of {name!r}: {out}")
    return out


def fd_gradient(lossfn, params: dict[str, np.ndarray], spec: FdSpec | None = None) -> dict[str, np.ndarray]:
    """Central differences (L(w + h e_i) - L(w - h e_i)) / 2h per coordinate
    of every parameter. lossfn maps a name->array dict to a scalar."""
    spec = spec or FdSpec()
    base = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name, w in base.items():
        g = np.zeros(w.size, dtype=np.float64)
        for i in range(w.size):
            lp = _eval(lossfn, base, name, {i: +spec.h})
            lm = _eval(lossfn, base, name, {i: -spec.h})
            g[i] = (lp - lm) / (2.0 * spec.h)
        out[name] = g.reshape(w.shape)
    return out


def fd_hessian_block_1d(lossfn, params: dict[str, np.ndarray], name: str,
                        spec: FdSpec | None = None, symmetrize: bool = True) -> np.ndarray:
    """The full C x C second-difference Hessian block of one 1-D parameter,
    built as central differences of central-difference gradients (4 loss
    evaluations per entry, O(C^2) total). Symmetrized as (H + H^T)/2 unless
    the raw matrix is requested for noise auditing."""
    spec = spec or FdSpec()
    w = np.asarray(params[name], dtype=np.float64)
    if w.ndim != 1:
        raise ValueError(f"{name!r} is not 1-D (shape {w.shape})")
    c = w.size
    if c > 64:
        raise ValueError(f"block Hessian limited to C <= 64, got C = {c}")
    base = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    h = spec.h

    def grad_entry(j: int, i: int, si: float) -> float:
        sp = {i: si}
        sp[j] = sp.get(j, 0.0) + h
        sm = {i: si}
        sm[j] = sm.get(j, 0.0) - h
        return (_eval(lossfn, base, name, sp) - _eval(lossfn, base, name, sm)) / (2.0 * h)

    out = np.zeros((c, c), dtype=np.float64)
    for i in range(c):
        for j in range(c):
            gp = grad_entry(j, i, +h)
            gm = grad_entry(j, i, -h)
            out[i, j] = (gp - gm) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise NonFiniteLossError(f"non-finite entries in FD Hessian block of {name!r}")
    return 0.5 * (out + out.T) if symmetrize else out


# ---------------------------------------------------------------------------
# dual-path helpers over models


@contextmanager
def preserve_bn_stats(model: nn.Model):
    """Training-mode tape forwards update running statistics; oracle code
    wraps them so repeated evaluations leave the model untouched."""
    saved = [
        (layer, layer.running_mean.copy(), layer.running_var.copy())
        for layer in model.layers
        if isinstance(layer, nn.BatchNorm)
    ]
    try:
        yield
    finally:
        for layer, mean, var in saved:
            layer.running_mean = mean
            layer.running_var = var


def _loss_np(kind: str, y: np.ndarray, labels) -> float:
    if kind == "sos":
        return nn.sum_of_squares_np(y)
    if kind == "ce":
        return nn.softmax_cross_entropy_np(y, labels)
    raise ValueError(f"unknown loss kind {kind!r}")


def _loss_v(kind: str, y: ad.Variable, labels) -> ad.Variable:
    if kind == "sos":
        return nn.sum_of_squares(y)
    if kind == "ce":
        return nn.softmax_cross_entropy(y, labels)
    raise ValueError(f"unknown loss kind {kind!r}")


def model_lossfn(model: nn.Model, x: np.ndarray, loss: str = "sos", labels=None,
                 training: bool = True):
    """Array-path loss closure over parameter values, for FD oracles."""
    x = np.asarray(x, dtype=np.float64)

    def lossfn(values: dict[str, np.ndarray]) -> float:
        return _loss_np(loss, model.forward_np(x, values, training=training), labels)

    return lossfn


def tape_gradients(model: nn.Model, x: np.ndarray, loss: str = "sos", labels=None,
                   training: bool = True, retain: bool = False):
    """One tape forward+backward; returns (grads by name, and with retain
    also the loss Variable and parameter-leaf env for curvature calls)."""
    graph = ad.Graph()
    with preserve_bn_stats(model):
        env = model.bind(graph)
        xv = graph.constant(np.asarray(x, dtype=model.parameters()[0].value.dtype))
        y = model.forward_v(xv, env, training=training)
        loss_var = _loss_v(loss, y, labels)
        grads_by_id = ad.backward(loss_var, retain_differentiable=retain)
    grads = {name: grads_by_id[var.id] for name, var in env.items()}
    return (grads, loss_var, env) if retain else (grads, None, None)


def tape_hdiag(model: nn.Model, x: np.ndarray, name: str, loss: str = "sos",
               labels=None, training: bool = True) -> np.ndarray:
    """Channelwise curvature of one 1-D parameter via the double backward."""
    _, loss_var, env = tape_gradients(model, x, loss, labels, training, retain=True)
    return ad.hessian_diag_1d(loss_var, env[name])


def gradcheck(model: nn.Model, x: np.ndarray, spec: FdSpec | None = None,
              loss: str = "sos", labels=None) -> dict[str, float]:
    """Entrywise relative error between tape gradients and central
    differences, per parameter, in f64 training mode."""
    grads, _, _ = tape_gradients(model, x, loss, labels, training=True)
    fd = fd_gradient(model_lossfn(model, x, loss, labels, training=True),
                     model.values(), spec)
    return {name: max_rel_err(grads[name], fd[name]) for name in fd}


# ---------------------------------------------------------------------------
# per-layer gradient-check cases


def build_layer_case(case: str, seed: int):
    """A one-layer (or minimal composite) model plus a matching input batch
    for gradient checking; every registered layer type appears."""
    rng = Rng(seed)
    xrng = Rng(seed ^ 0x9E3779B9)
    if case == "linear":
        model = nn.Model(case, [nn.Linear("fc", 5, 4, rng)])
        return model, xrng.normal((8, 5)), "sos", None
    if case == "conv2d":
        model = nn.Model(case, [nn.Conv2d("conv", 2, 3, 3, rng)])
        return model, xrng.normal((2, 2, 6, 6)), "sos", None
    if case == "wnconv":
        model = nn.Model(case, [nn.WNConv("conv", 2, 3, 3, rng)])
        return model, xrng.normal((2, 2, 6, 6)), "sos", None
    if case == "batchnorm2d":
        model = nn.Model(case, [nn.BatchNorm("bn", 5)])
        return model, xrng.normal((12, 5)), "sos", None
    if case == "batchnorm4d":
        model = nn.Model(case, [nn.BatchNorm("bn", 3)])
        return model, xrng.normal((4, 3, 5, 5)), "sos", None
    if case == "relu":
        model = nn.Model(case, [nn.Linear("fc", 5, 4, rng), nn.ReLU()])
        return model, xrng.normal((8, 5)), "sos", None
    if case == "flatten-head":
        model = nn.Model(case, [
            nn.Conv2d("conv", 1, 2, 3, rng), nn.ReLU(), nn.Flatten(),
            nn.Linear("fc", 2 * 5 * 5, 3, rng),
        ])
        labels = Rng(seed ^ 0xABCDEF).integers(0, 3, (4,))
        return model, xrng.normal((4, 1, 5, 5)), "ce", labels
    raise ValueError(f"unknown layer case {case!r}")


LAYER_CASES = ("linear", "conv2d", "wnconv", "batchnorm2d", "batchnorm4d",
               "relu", "flatten-head")


def gradcheck_layers(seeds, spec: FdSpec | None = None) -> dict[str, float]:
    """Max entrywise relative FD error per (case, parameter) across seeds."""
    worst: dict[str, float] = {}
    for case in LAYER_CASES:
        for seed in seeds:
            model, x, loss, labels = build_layer_case(case, seed)
            for pname, err in gradcheck(model, x, spec, loss, labels).items():
                key = f"{case}:{pname}"
                worst[key] = max(worst.get(key, 0.0), err)
    return worst


# ---------------------------------------------------------------------------
# diagonality audit


@dataclass
class DiagonalityReport:
    parameter: str
    c: int
    max_abs_offdiag: float
    max_abs_diag: float
    offdiag_mass_ratio: float
    extracted_vs_rowsum_relerr: float


def diagonality_report(model: nn.Model, x: np.ndarray, name: str,
                       spec: FdSpec | None = None, loss: str = "sos",
                       labels=None) -> DiagonalityReport:
    """Quantifies how diagonal a 1-D parameter's true Hessian block is, and
    how closely the tape extraction matches the block's row sums. The
    extraction always equals the row sums; it equals the diagonal only when
    the off-diagonal mass vanishes (terminal-layer configurations)."""
    lossfn = model_lossfn(model, x, loss, labels, training=True)
    block = fd_hessian_block_1d(lossfn, model.values(), name, spec)
    extracted = tape_hdiag(model, x, name, loss, labels, training=True)
    diag = np.diag(block)
    off = block - np.diag(diag)
    rowsums = block.sum(axis=1)
    return DiagonalityReport(
        parameter=name,
        c=block.shape[0],
        max_abs_offdiag=float(np.max(np.abs(off))),
        max_abs_diag=float(np.max(np.abs(diag))),
        offdiag_mass_ratio=float(np.sum(np.abs(off)) / (np.sum(np.abs(diag)) + 1e-30)),
        extracted_vs_rowsum_relerr=max_rel_err(extracted, rowsums),
    )


# ---------------------------------------------------------------------------
# closed-form single-step check


@dataclass
class NewtonCheckResult:
    passed: bool
    residual: float
    applied: np.ndarray
    expected: np.ndarray


def newton_step_check(a, gamma0, opt: optim.SgdPhConfig, b=0.0,
                      tol: float = 1e-10) -> NewtonCheckResult:
    """Runs the real pipeline (tape loss, double backward, optimizer step)
    on the quadratic L = 1/2 sum a g^2 + sum b g and compares the applied
    update against the hand formula

        delta = -tau * (tau_so * (a g + b) / (|a| + eps) + eta g),

    valid on the first step from zero momenta when alpha == beta_m (the
    momentum weights cancel)."""
    if opt.alpha != opt.beta_m:
        raise ValueError("closed form requires alpha == beta_m")
    a = np.asarray(a, dtype=np.float64)
    gamma0 = np.asarray(gamma0, dtype=np.float64)
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), gamma0.shape)

    graph = ad.Graph()
    gvar = graph.variable(gamma0.copy(), requires_grad=True, kind=ad.CHANNELWISE_1D)
    loss = ad.add(
        ad.sum_all(ad.cmul(ad.mul(gvar, gvar), 0.5 * a)),
        ad.sum_all(ad.cmul(gvar, b)),
    )
    grads = ad.backward(loss, retain_differentiable=True)
    h = ad.hessian_diag_1d(loss, gvar)

    param = nn.Parameter("gamma", gamma0.copy(), ad.CHANNELWISE_1D)
    state = optim.OptState([param])
    optim.step([param], {"gamma": grads[gvar.id]}, {"gamma": h}, opt, state)
    applied = param.value - gamma0

    g_hand = a * gamma0 + b
    expected = -opt.tau * (opt.tau_so * g_hand / (np.abs(a) + opt.eps) + opt.eta * gamma0)
    residual = float(np.max(np.abs(applied - expected)))
    return NewtonCheckResult(residual <= tol, residual, applied, expected)
