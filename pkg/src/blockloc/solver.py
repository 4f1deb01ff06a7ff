"""Sparse-by-factor, dense-by-system Levenberg-Marquardt and Schur marginalization.

Variables are looked up by key in a ``values`` mapping. A variable exposes
``dim``, ``retract(delta)``, ``local(base)`` (the inverse of ``retract``
around ``base``) and ``local_jacobian(base)`` (derivative of ``local`` with
respect to a perturbation applied through ``retract``).

Every factor reports ``(cost, gradient, hessian)`` over the stacked tangents
of its keys. Least-squares factors use ``cost = 1/2 r^T W r`` with the
Gauss-Newton pair ``(J^T W r, J^T W J)``; other factors only need to be
consistent with the quadratic model ``cost + g^T d + 1/2 d^T H d``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Optional, Sequence

import numpy as np

from .errors import DegenerateMarginalization, Underconstrained

log = logging.getLogger(__name__)

EIG_CLAMP = 1e-10


class VectorVar:
    """Euclidean variable; used by linear test problems and for plain parameters."""

    def __init__(self, value):
        self.value = np.array(value, dtype=float).reshape(-1)

    @property
    def dim(self) -> int:
        return len(self.value)

    def retract(self, delta) -> "VectorVar":
        return VectorVar(self.value + np.asarray(delta, dtype=float))

    def local(self, base: "VectorVar") -> np.ndarray:
        return self.value - base.value

    def local_jacobian(self, base: "VectorVar") -> np.ndarray:
        return np.eye(self.dim)

    def __repr__(self) -> str:
        return f"VectorVar({self.value})"


class Factor:
    kind = "generic"
    keys: tuple = ()

    def linearize(self, values: Mapping) -> tuple[float, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def cost(self, values: Mapping) -> float:
        return self.linearize(values)[0]


class ResidualFactor(Factor):
    """Weighted least-squares factor from a residual function.

    ``fn(states)`` returns ``(r, [J_k])`` with one Jacobian per key, taken
    with respect to the tangent of that state.
    """

    def __init__(self, keys: Sequence[Hashable], fn: Callable, information: np.ndarray, kind: str = "generic"):
        self.keys = tuple(keys)
        self.fn = fn
        self.information = np.asarray(information, dtype=float)
        self.kind = kind

    def residual(self, values: Mapping):
        return self.fn([values[k] for k in self.keys])

    def cost(self, values: Mapping) -> float:
        r, _ = self.residual(values)
        return 0.5 * float(r @ self.information @ r)

    def linearize(self, values: Mapping):
        r, jacs = self.residual(values)
        J = np.hstack(jacs)
        WJ = self.information @ J
        return 0.5 * float(r @ self.information @ r), WJ.T @ r, J.T @ WJ


class LinearFactor(ResidualFactor):
    """``r = sum_k A_k x_k - z`` over :class:`VectorVar` keys."""

    def __init__(self, keys, blocks: Sequence[np.ndarray], z, information, kind: str = "generic"):
        blocks = [np.atleast_2d(np.asarray(A, dtype=float)) for A in blocks]
        z = np.asarray(z, dtype=float).reshape(-1)

        def fn(states):
            r = sum(A @ s.value for A, s in zip(blocks, states)) - z
            return r, blocks

        super().__init__(keys, fn, information, kind)
        self.blocks = blocks
        self.z = z


class MarginalizationPrior(Factor):
    """Gaussian prior left behind by the Schur complement.

    Cost is ``b^T d + 1/2 d^T H d`` with ``d`` the stacked local coordinates
    of the current values around the fixed linearization point.
    """

    kind = "margprior"

    def __init__(self, keys, H_hat: np.ndarray, b_hat: np.ndarray, linearization: Sequence):
        self.keys = tuple(keys)
        self.H_hat = 0.5 * (H_hat + H_hat.T)
        self.b_hat = np.asarray(b_hat, dtype=float)
        self.linearization = list(linearization)

    def _delta(self, values):
        parts, jacs = [], []
        for k, x0 in zip(self.keys, self.linearization):
            parts.append(values[k].local(x0))
            jacs.append(values[k].local_jacobian(x0))
        n = sum(j.shape[0] for j in jacs)
        J = np.zeros((n, n))
        o = 0
        for j in jacs:
            J[o:o + len(j), o:o + len(j)] = j
            o += len(j)
        return np.concatenate(parts), J

    def cost(self, values):
        d, _ = self._delta(values)
        return float(self.b_hat @ d + 0.5 * d @ self.H_hat @ d)

    def linearize(self, values):
        d, J = self._delta(values)
        grad = self.b_hat + self.H_hat @ d
        return float(self.b_hat @ d + 0.5 * d @ self.H_hat @ d), J.T @ grad, J.T @ self.H_hat @ J

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.H_hat)[0])


def _layout(values: Mapping, order: Sequence) -> tuple[dict, int]:
    offsets, n = {}, 0
    for k in order:
        offsets[k] = (n, values[k].dim)
        n += values[k].dim
    return offsets, n


def build_system(values: Mapping, order: Sequence, factors: Sequence[Factor]):
    """Total cost, gradient and Hessian over the stacked tangents of ``order``."""
    offsets, n = _layout(values, order)
    H = np.zeros((n, n))
    g = np.zeros(n)
    cost = 0.0
    for f in factors:
        c, gf, Hf = f.linearize(values)
        cost += c
        idx = np.concatenate([np.arange(offsets[k][0], offsets[k][0] + offsets[k][1]) for k in f.keys])
        g[idx] += gf
        H[np.ix_(idx, idx)] += Hf
    return cost, g, H


def total_cost(values: Mapping, factors: Sequence[Factor]) -> float:
    return float(sum(f.cost(values) for f in factors))


def apply_step(values: Mapping, order: Sequence, step: np.ndarray) -> dict:
    offsets, _ = _layout(values, order)
    out = dict(values)
    for k in order:
        o, d = offsets[k]
        out[k] = values[k].retract(step[o:o + d])
    return out


@dataclass
class SolverOptions:
    max_iterations: int = 15
    gradient_tol: float = 1e-6
    step_tol: float = 1e-8
    # the first attempt is an undamped Gauss-Newton step
    lambda_init: float = 0.0
    lambda_floor: float = 0.0
    lambda_restart: float = 1e-6
    lambda_max: float = 1e10
    rank_tol: float = 1e-14


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    accepted_costs: list = field(default_factory=list)
    rejected: int = 0
    stop: str = ""
    diverged: bool = False


def _check_rank(H: np.ndarray, tol: float) -> None:
    scale = max(float(np.max(np.abs(np.diag(H)))), 1e-300)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise Underconstrained("normal equations are not positive definite") from None
    if float(np.min(np.diag(L))) ** 2 < tol * scale:
        raise Underconstrained("normal equations are rank deficient")


def optimize(
    values: Mapping,
    order: Sequence,
    factors: Sequence[Factor],
    options: Optional[SolverOptions] = None,
) -> tuple[dict, SolveReport]:
    """Levenberg-Marquardt with Marquardt (diagonal) damping.

    Steps that raise the total cost are rejected and retried with more
    damping, so accepted costs never increase.
    """
    opt = options or SolverOptions()
    values = dict(values)
    report = SolveReport()
    cost, g, H = build_system(values, order, factors)
    _check_rank(H, opt.rank_tol)
    report.initial_cost = report.final_cost = cost
    lam = opt.lambda_init
    for it in range(opt.max_iterations):
        if float(np.linalg.norm(g)) < opt.gradient_tol:
            report.stop = "gradient"
            break
        D = np.diag(np.maximum(np.diag(H), 1e-12))
        accepted = False
        while lam <= opt.lambda_max:
            A = H + lam * D
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam = max(lam * 10.0, opt.lambda_restart)
                continue
            if float(np.linalg.norm(step)) < opt.step_tol:
                report.stop = "step"
                report.iterations = it
                report.final_cost = cost
                return values, report
            candidate = apply_step(values, order, step)
            new_cost = total_cost(candidate, factors)
            if np.isfinite(new_cost) and new_cost <= cost:
                predicted = -(g @ step + 0.5 * step @ H @ step)
                rho = (cost - new_cost) / predicted if predicted > 0 else 0.0
                lam = max(lam / 10.0, opt.lambda_floor) if rho > 0.25 else lam
                values = candidate
                cost, g, H = build_system(values, order, factors)
                report.accepted_costs.append(cost)
                accepted = True
                break
            report.rejected += 1
            lam = max(lam * 10.0, opt.lambda_restart)
        report.iterations = it + 1
        if not accepted:
            report.stop = "damping"
            report.diverged = not report.accepted_costs
            break
    else:
        report.stop = "iterations"
    report.final_cost = cost
    return values, report


def schur_complement(H: np.ndarray, b: np.ndarray, n_alpha: int) -> tuple[np.ndarray, np.ndarray]:
    """Eliminate the trailing block: returns (H_aa - H_ab H_bb^-1 H_ba, b_a - H_ab H_bb^-1 b_b)."""
    Haa, Hab, Hbb = H[:n_alpha, :n_alpha], H[:n_alpha, n_alpha:], H[n_alpha:, n_alpha:]
    ba, bb = b[:n_alpha], b[n_alpha:]
    if Hbb.shape[0] == 0:
        return Haa.copy(), ba.copy()
    Hbb = 0.5 * (Hbb + Hbb.T)
    vals, vecs = np.linalg.eigh(Hbb)
    if vals[-1] <= EIG_CLAMP or vals[0] < -1e-9 * max(vals[-1], 1.0):
        raise DegenerateMarginalization(f"H_bb eigenvalues span [{vals[0]:.3e}, {vals[-1]:.3e}]")
    inv_vals = np.where(vals > EIG_CLAMP, 1.0 / np.where(vals > EIG_CLAMP, vals, 1.0), 0.0)
    Hbb_inv = (vecs * inv_vals) @ vecs.T
    K = Hab @ Hbb_inv
    H_hat = Haa - K @ Hab.T
    b_hat = ba - K @ bb
    return 0.5 * (H_hat + H_hat.T), b_hat


def marginalize(
    values: Mapping, factors: Sequence[Factor], drop: Sequence[Hashable]
) -> tuple[list[Factor], Optional[MarginalizationPrior]]:
    """Eliminate the ``drop`` keys.

    Factors touching ``drop`` are linearized at the current values and
    folded into a single prior over the other keys they touch. Returns the
    surviving factor list (with the new prior appended) and the prior.
    """
    drop_set = set(drop)
    consumed = [f for f in factors if drop_set.intersection(f.keys)]
    kept = [f for f in factors if not drop_set.intersection(f.keys)]
    alpha = []
    for f in consumed:
        for k in f.keys:
            if k not in drop_set and k not in alpha:
                alpha.append(k)
    beta = [k for k in drop if any(k in f.keys for f in consumed)]
    order = alpha + beta
    _, b, H = build_system(values, order, consumed)
    n_alpha = sum(values[k].dim for k in alpha)
    H_hat, b_hat = schur_complement(H, b, n_alpha)
    if not alpha:
        return kept, None
    prior = MarginalizationPrior(alpha, H_hat, b_hat, [values[k] for k in alpha])
    kept.append(prior)
    return kept, prior
