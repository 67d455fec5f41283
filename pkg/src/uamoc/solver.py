"""Differential dynamic programming with gap contraction on manifold problems.

The solver works on any problem object exposing:

  n_nodes, ndx, nu, x0
  state_oplus(x, dx), state_ominus(y, x)
  dynamics(k, x, u) -> x_next
  dynamics_derivatives(k, x, u) -> (fx, fu)        (or batched sweep())
  cost(k, x, u) -> float
  cost_derivatives(k, x, u) -> (l, lx, lu, lxx, lxu, luu)
  terminal_cost(x) -> float
  terminal_derivatives(x) -> (l, lx, lxx)

Infeasible iterates are allowed: defect gaps between the rollout and the
stored trajectory are closed progressively by the line search, so a cold or
shifted warm start never has to be dynamically consistent.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import NonPositiveQuu, NoProgress


def squash(z, lower, upper):
    """Sigmoid map from unbounded inputs to box-bounded controls.

    Unit slope at the box center; coordinates with an infinite bound pass
    through unchanged.
    """
    z = np.asarray(z, dtype=float)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), z.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), z.shape)
    out = z.copy()
    bounded = np.isfinite(lower) & np.isfinite(upper)
    w = upper[bounded] - lower[bounded]
    mid = 0.5 * (upper[bounded] + lower[bounded])
    out[bounded] = lower[bounded] + w * expit(4.0 * (z[bounded] - mid) / w)
    return out


def squash_jacobian(z, lower, upper):
    """Diagonal of d squash / dz."""
    z = np.asarray(z, dtype=float)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), z.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), z.shape)
    out = np.ones_like(z)
    bounded = np.isfinite(lower) & np.isfinite(upper)
    w = upper[bounded] - lower[bounded]
    mid = 0.5 * (upper[bounded] + lower[bounded])
    s = expit(4.0 * (z[bounded] - mid) / w)
    out[bounded] = 4.0 * s * (1.0 - s)
    return out


def unsquash(u, lower, upper, clip=0.999):
    """Inverse of squash, with controls clipped into the open box."""
    u = np.asarray(u, dtype=float)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), u.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), u.shape)
    out = u.copy()
    bounded = np.isfinite(lower) & np.isfinite(upper)
    w = upper[bounded] - lower[bounded]
    mid = 0.5 * (upper[bounded] + lower[bounded])
    s = (u[bounded] - lower[bounded]) / w
    s = np.clip(s, 0.5 * (1.0 - clip), 0.5 * (1.0 + clip))
    out[bounded] = mid + 0.25 * w * np.log(s / (1.0 - s))
    return out


@dataclass
class SolverSettings:
    max_iters: int = 100
    grad_tol: float = 1e-5
    gap_tol: float = 1e-6
    reg_init: float = 1e-9
    reg_max: float = 1e6
    reg_grow: float = 10.0
    reg_shrink: float = 0.5
    armijo: float = 0.1
    neg_step: float = 2.0
    th_grad: float = 1e-12
    n_alphas: int = 11
    callback: object = None


@dataclass
class SolverResult:
    X: np.ndarray
    U: np.ndarray
    K: np.ndarray
    k: np.ndarray
    cost: float
    iterations: int
    grad_norm: float
    gap_norm: float
    reg: float
    converged: bool
    stop_reason: str
    alpha_history: list = field(default_factory=list)


class FddpSolver:
    def __init__(self, problem, settings=None):
        self.problem = problem
        self.settings = settings or SolverSettings()

    def solve(self, X_init=None, U_init=None):
        p = self.problem
        st = self.settings
        N = p.n_nodes
        ndx, nu = p.ndx, p.nu

        X = self._init_states(X_init, N)
        U = (np.zeros((N - 1, nu)) if U_init is None
             else np.array(U_init, dtype=float, copy=True))
        if U.shape != (N - 1, nu):
            raise ValueError(f"U_init must have shape {(N - 1, nu)}, got {U.shape}")

        gaps = self._gaps(X, U)
        cost = self._total_cost(X, U)
        reg = st.reg_init
        Kfb = np.zeros((N - 1, nu, ndx))
        kff = np.zeros((N - 1, nu))
        alpha_hist = []
        grad_inf = np.inf
        reason = "max_iters"
        converged = False
        it = 0

        for it in range(1, st.max_iters + 1):
            FX, FU, L = self._derivatives(X, U)
            while True:
                back = self._backward(FX, FU, L, gaps, reg, Kfb, kff)
                if back is not None:
                    grad_inf, dg, dq, dv1, Vxs, Vxxs = back
                    break
                if reg >= st.reg_max:
                    raise NonPositiveQuu(
                        f"control Hessian not positive definite at regularization {reg:g}")
                reg = min(reg * st.reg_grow, st.reg_max)

            gap_inf = np.abs(gaps).max() if N > 1 else 0.0
            if grad_inf <= st.grad_tol and gap_inf <= st.gap_tol:
                converged = True
                reason = "gradient"
                break

            accepted = False
            for alpha in 2.0 ** -np.arange(st.n_alphas):
                Xn, Un, cost_new = self._rollout(X, U, gaps, Kfb, kff, alpha)
                if not np.isfinite(cost_new):
                    continue
                # model of the cost change for this trial, exact for a
                # quadratic problem at a full step: the gap terms let the
                # search accept cost increases that buy dynamic feasibility
                dv = 0.0
                if gap_inf > 1e-14:
                    with np.errstate(over="ignore", invalid="ignore"):
                        for t in range(N):
                            dxt = p.state_ominus(Xn[t], X[t])
                            dv += gaps[t] @ (Vxxs[t] @ dxt)
                d1 = dg + dv
                d2 = dq - 2.0 * dv
                exp_red = alpha * (d1 + 0.5 * alpha * d2)
                # a rollout so wild the model overflows is never acceptable
                if not np.isfinite(exp_red):
                    continue
                actual = cost - cost_new
                if exp_red >= 0.0:
                    # |d1| near zero means the model sees nothing left to gain
                    # and the step is accepted to close gaps; a hugely negative
                    # d1 is an overflowed model, not optimality
                    ok = abs(d1) < st.th_grad or actual > st.armijo * exp_red
                else:
                    ok = actual > st.neg_step * exp_red
                if ok:
                    X, U, cost = Xn, Un, cost_new
                    gaps = self._gaps(X, U)
                    alpha_hist.append(alpha)
                    if alpha == 1.0:
                        reg = max(reg * st.reg_shrink, st.reg_init)
                    accepted = True
                    break
            if st.callback is not None:
                st.callback(it, cost, grad_inf, np.abs(gaps).max(), reg)
            if not accepted:
                if reg >= st.reg_max:
                    raise NoProgress(
                        f"line search failed at regularization ceiling {reg:g}")
                reg = min(reg * st.reg_grow, st.reg_max)
                continue
            # a vanishing predicted decrease on a feasible trajectory is optimality
            if abs(dv1) < 1e-14 and np.abs(gaps).max() <= st.gap_tol:
                converged = True
                reason = "no_decrease"
                break

        # the gain buffers are overwritten by every backward sweep, so an
        # overflowing final sweep can poison an otherwise accepted iterate
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U))
                and np.all(np.isfinite(Kfb)) and np.all(np.isfinite(kff))):
            raise NoProgress("solution contains non-finite values")
        return SolverResult(
            X=X, U=U, K=Kfb, k=kff, cost=cost, iterations=it,
            grad_norm=grad_inf, gap_norm=float(np.abs(gaps).max()),
            reg=reg, converged=converged, stop_reason=reason,
            alpha_history=alpha_hist)

    # -- pieces -------------------------------------------------------------

    def _init_states(self, X_init, N):
        p = self.problem
        if X_init is None:
            return np.stack([np.array(p.x0, dtype=float, copy=True)] * N)
        X = np.array(X_init, dtype=float, copy=True)
        if X.shape[0] != N:
            raise ValueError(f"X_init must have {N} rows, got {X.shape[0]}")
        return X

    def _gaps(self, X, U):
        p = self.problem
        N = p.n_nodes
        gaps = np.zeros((N, p.ndx))
        gaps[0] = p.state_ominus(p.x0, X[0])
        for k in range(N - 1):
            gaps[k + 1] = p.state_ominus(p.dynamics(k, X[k], U[k]), X[k + 1])
        return gaps

    def _total_cost(self, X, U):
        p = self.problem
        c = 0.0
        for k in range(p.n_nodes - 1):
            c += p.cost(k, X[k], U[k])
        return c + p.terminal_cost(X[-1])

    def _derivatives(self, X, U):
        p = self.problem
        N = p.n_nodes
        if hasattr(p, "sweep"):
            FX, FU = p.sweep(X, U)
        else:
            FX = np.empty((N - 1, p.ndx, p.ndx))
            FU = np.empty((N - 1, p.ndx, p.nu))
            for k in range(N - 1):
                FX[k], FU[k] = p.dynamics_derivatives(k, X[k], U[k])
        L = [p.cost_derivatives(k, X[k], U[k]) for k in range(N - 1)]
        L.append(p.terminal_derivatives(X[-1]))
        return FX, FU, L

    def _backward(self, FX, FU, L, gaps, reg, Kfb, kff):
        p = self.problem
        N = p.n_nodes
        nu = p.nu
        _, Vx, Vxx = L[-1]
        Vxx = Vxx.copy()
        Vx = Vx.copy()
        Vxs = np.empty((N, p.ndx))
        Vxxs = np.empty((N, p.ndx, p.ndx))
        Vxs[N - 1] = Vx
        Vxxs[N - 1] = Vxx
        grad_inf = 0.0
        dv1 = 0.0
        dg = 0.0
        dq = 0.0
        eye = np.eye(nu)
        # value recursions on a wild iterate can overflow; treat that the same
        # as an indefinite Hessian so the caller raises regularization
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(N - 2, -1, -1):
                _, lx, lu, lxx, lxu, luu = L[k]
                fx, fu = FX[k], FU[k]
                Vxg = Vx + Vxx @ gaps[k + 1]
                Qx = lx + fx.T @ Vxg
                Qu = lu + fu.T @ Vxg
                VxxFx = Vxx @ fx
                Qxx = lxx + fx.T @ VxxFx
                Qux = lxu.T + fu.T @ VxxFx
                Quu = luu + fu.T @ Vxx @ fu + reg * eye
                if not np.all(np.isfinite(Quu)):
                    return None
                try:
                    Lc = np.linalg.cholesky(0.5 * (Quu + Quu.T))
                except np.linalg.LinAlgError:
                    return None
                rhs = np.column_stack([Qu, Qux])
                sol = np.linalg.solve(Lc.T, np.linalg.solve(Lc, rhs))
                kff[k] = -sol[:, 0]
                Kfb[k] = -sol[:, 1:]
                dv1 += kff[k] @ Qu
                dg -= kff[k] @ Qu
                dq -= kff[k] @ (Quu @ kff[k])
                Vx = Qx + Kfb[k].T @ (Quu @ kff[k]) + Kfb[k].T @ Qu + Qux.T @ kff[k]
                Vxx = Qxx + Kfb[k].T @ Quu @ Kfb[k] + Kfb[k].T @ Qux + Qux.T @ Kfb[k]
                Vxx = 0.5 * (Vxx + Vxx.T)
                if not (np.all(np.isfinite(Vx)) and np.all(np.isfinite(Vxx))):
                    return None
                Vxs[k] = Vx
                Vxxs[k] = Vxx
                grad_inf = max(grad_inf, np.abs(Qu).max())
            # linear and quadratic gap corrections to the expected improvement
            for t in range(N):
                gVxxg = gaps[t] @ (Vxxs[t] @ gaps[t])
                dg -= Vxs[t] @ gaps[t] + gVxxg
                dq += gVxxg
        if not (np.isfinite(dg) and np.isfinite(dq)):
            return None
        return grad_inf, dg, dq, dv1, Vxs, Vxxs

    def _rollout(self, X, U, gaps, Kfb, kff, alpha):
        p = self.problem
        N = p.n_nodes
        Xn = np.empty_like(X)
        Un = np.empty_like(U)
        Xn[0] = p.state_oplus(X[0], alpha * gaps[0])
        cost = 0.0
        # diverging trial rollouts overflow before they are rejected; keep quiet
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(N - 1):
                dx = p.state_ominus(Xn[k], X[k])
                Un[k] = U[k] + alpha * kff[k] + Kfb[k] @ dx
                c = p.cost(k, Xn[k], Un[k])
                if not np.isfinite(c):
                    return Xn, Un, np.inf
                cost += c
                xnext = p.dynamics(k, Xn[k], Un[k])
                if k + 1 < N:
                    Xn[k + 1] = p.state_oplus(xnext, -(1.0 - alpha) * gaps[k + 1])
            return Xn, Un, cost + p.terminal_cost(Xn[-1])
