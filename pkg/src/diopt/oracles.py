"""Reference solvers used to label datasets.

* :func:`solve_qp` -- ADMM operator splitting with residual-balanced
  penalty, followed by an active-set polish of the KKT system.
* :func:`solve_nonconvex` -- multi-start penalised descent in the free
  variables, each local result polished with SLSQP and then pulled back
  into the feasible set along the segment to the feasible anchor.
* :func:`grid_search_2d` -- exhaustive grid over a free space of
  dimension at most two; the independent check for the other two.
"""

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from . import kernels
from .errors import OracleError, SolverError
from .problems import Dataset, Kind, complete, objective, objective_grad


@dataclass
class KKTResiduals:
    eq: float
    ineq: float
    stationarity: float
    complementarity: float
    dual_sign: float

    def max(self):
        return max(self.eq, self.ineq, self.stationarity, self.complementarity, self.dual_sign)


def kkt_residuals(fam, x, y, nu, mu):
    """Infinity-norm KKT residuals for ``(y, nu, mu)`` with ``mu`` on ``G y <= h``."""
    g = fam.G @ y - fam.h
    grad = objective_grad(fam, y) + fam.A.T @ nu + fam.G.T @ mu
    return KKTResiduals(
        eq=float(np.max(np.abs(fam.A @ y - x), initial=0.0)),
        ineq=float(np.max(np.maximum(g, 0.0), initial=0.0)),
        stationarity=float(np.max(np.abs(grad), initial=0.0)),
        complementarity=float(np.max(np.abs(mu * g), initial=0.0)),
        dual_sign=float(np.max(np.maximum(-mu, 0.0), initial=0.0)),
    )


def _linear_term(fam):
    # a sine-regularised family with alpha = 0 is a pure quadratic
    return np.zeros(fam.n) if fam.sine else fam.p


def _kkt_solve(fam, x, act):
    n = fam.n
    Ga = fam.G[act]
    C = np.vstack([fam.A, Ga])
    k = C.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = np.diag(fam.qdiag)
    K[:n, n:] = C.T
    K[n:, :n] = C
    rhs = np.concatenate([-_linear_term(fam), x, fam.h[act]])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    y = sol[:n]
    nu = sol[n:n + fam.n_eq]
    mu = np.zeros(fam.n_ineq)
    mu[act] = sol[n + fam.n_eq:]
    return y, nu, mu


def _polish(fam, x, y, lam_ineq, tol, max_rounds=50):
    scale = max(1.0, float(np.max(np.abs(lam_ineq), initial=0.0)))
    act = (lam_ineq > 1e-7 * scale) | (fam.G @ y - fam.h > -1e-7)
    act = act.copy()
    for _ in range(max_rounds):
        idx = np.flatnonzero(act)
        yy, nu, mu = _kkt_solve(fam, x, idx)
        g = fam.G @ yy - fam.h
        viol = np.where(act, -np.inf, g)
        if viol.size and viol.max() > tol:
            act[int(np.argmax(viol))] = True
            continue
        neg = np.where(act, mu, np.inf)
        if neg.size and neg.min() < -tol:
            act[int(np.argmin(neg))] = False
            continue
        return yy, nu, mu
    return None


def solve_qp(fam, x, tol=1e-6, eps_abs=1e-8, eps_rel=1e-6, max_iter=20000, rho=0.1):
    """Solve a convex member of the family for condition ``x``.

    Returns ``(y_star, f_star)``.  Raises :class:`SolverError` carrying the
    residuals when no point meets every KKT residual ``<= tol``.
    """
    if np.any(fam.qdiag < 0):
        raise SolverError("solve_qp needs a convex objective (Q diagonal >= 0)")
    if fam.sine and fam.alpha != 0.0:
        raise SolverError("solve_qp handles quadratic objectives only (alpha must be 0)")
    x = np.asarray(x, dtype=np.float64).reshape(fam.n_eq)
    C = np.vstack([fam.A, fam.G])
    lo = np.concatenate([x, np.full(fam.n_ineq, -1e20)])
    hi = np.concatenate([x, fam.h])
    is_eq = np.concatenate([np.ones(fam.n_eq, bool), np.zeros(fam.n_ineq, bool)])
    y, _, lam, _, _, _, _ = kernels.admm(np.diag(fam.qdiag), _linear_term(fam), C, lo, hi, is_eq, rho,
                                         1e-6, 1.6, eps_abs, eps_rel, max_iter, 25)
    nu, mu = lam[:fam.n_eq], lam[fam.n_eq:]
    best = (kkt_residuals(fam, x, y, nu, np.maximum(mu, 0.0)), y)
    polished = _polish(fam, x, y, mu, tol * 1e-2)
    if polished is not None:
        res = kkt_residuals(fam, x, *polished)
        if res.max() < best[0].max():
            best = (res, polished[0])
    res, y = best
    if res.max() > tol:
        raise SolverError(f"QP solve did not reach tol={tol}: {res}", residuals=res)
    return y, float(objective(fam, y))


def _retract(fam, anchor, y):
    """Largest step from ``anchor`` toward ``y`` that stays inside ``G y <= h``."""
    d = fam.G @ (y - anchor)
    slack = fam.h - fam.G @ anchor
    pos = d > 0
    s = 1.0
    if pos.any():
        s = min(1.0, float(np.min(np.maximum(slack[pos], 0.0) / d[pos])))
    return anchor + s * (y - anchor)


def _slsqp(fam, x, z0, c):
    M, G, h = fam.M, fam.G, fam.h
    GM = G @ M
    cons = {"type": "ineq", "fun": lambda z: h - G @ (M @ z + c), "jac": lambda z: -GM}
    res = scipy.optimize.minimize(
        lambda z: objective(fam, M @ z + c), z0,
        jac=lambda z: M.T @ objective_grad(fam, M @ z + c),
        constraints=[cons], method="SLSQP", options={"maxiter": 500, "ftol": 1e-12})
    return res.x


def solve_nonconvex(fam, x, starts=16, tol=1e-6, seed=0, radius=1.0, max_iter=2000):
    """Best feasible local minimum found from ``starts`` initial points.

    Start 0 is the feasible anchor ``A^+ x``; the rest are random
    perturbations of it of norm at most ``radius``, pulled back into the
    feasible set.  Ties in objective (to 1e-9) go to the lexicographically
    smallest ``y``.  Returns ``(y_best, f_best)``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(fam.n_eq)
    rng = np.random.default_rng(seed)
    c = fam.N @ x
    anchor = fam.anchor(x)
    z_anchor = anchor[fam.free]
    best_y, best_f = None, np.inf
    for s in range(starts):
        if s == 0:
            z0 = z_anchor
        else:
            d = rng.standard_normal(fam.n_free)
            d *= radius * rng.random() ** (1.0 / fam.n_free) / max(np.linalg.norm(d), 1e-300)
            z0 = _retract(fam, anchor, complete(fam, z_anchor + d, x))[fam.free]
        z1, _ = kernels.penalty_descent(z0, fam.M, c, fam.G, fam.h, fam.qdiag, fam.p,
                                        fam.alpha, fam.sine, 10.0, tol, max_iter)
        candidates = [complete(fam, z1, x)]
        try:
            candidates.append(complete(fam, _slsqp(fam, x, z1, c), x))
        except (ValueError, np.linalg.LinAlgError):
            pass
        for y in candidates:
            if np.max(fam.G @ y - fam.h) > tol:
                y = _retract(fam, anchor, y)
            if np.max(fam.G @ y - fam.h, initial=-np.inf) > tol:
                continue
            f = float(objective(fam, y))
            if f < best_f - 1e-9 or (abs(f - best_f) <= 1e-9 and tuple(y) < tuple(best_y)):
                best_y, best_f = y, f
    if best_y is None:
        raise SolverError("no feasible point found from any start")
    return best_y, best_f


def _free_box(fam, x):
    GM = fam.G @ fam.M
    rhs = fam.h - fam.G @ (fam.N @ x)
    lo, hi = [], []
    for k in range(fam.n_free):
        cvec = np.zeros(fam.n_free)
        bounds = [(None, None)] * fam.n_free
        out = []
        for sign in (1.0, -1.0):
            cvec[k] = sign
            r = scipy.optimize.linprog(cvec, A_ub=GM, b_ub=rhs, bounds=bounds, method="highs")
            if r.status == 2:
                raise OracleError("feasible region is empty")
            if r.status != 0:
                raise OracleError(f"feasible region is unbounded or LP failed ({r.message})")
            out.append(r.x[k])
        lo.append(out[0])
        hi.append(out[1])
    return np.array(lo), np.array(hi)


def grid_search_2d(fam, x, resolution=401, refine=3, tol=1e-9):
    """Best feasible point on a tensor grid over the free variables.

    The free space must have dimension 1 or 2 (``n = 2`` without
    equalities, or ``n - n_eq <= 2`` in general).  ``refine`` extra passes
    re-grid a window of +-2 cells around the incumbent.  Returns
    ``(y_star, f_star)``.
    """
    if not 1 <= fam.n_free <= 2:
        raise OracleError(f"grid search needs 1 or 2 free variables, got {fam.n_free}")
    x = np.asarray(x, dtype=np.float64).reshape(fam.n_eq)
    lo, hi = _free_box(fam, x)
    c = fam.N @ x
    best = None
    box_lo, box_hi = lo.copy(), hi.copy()
    for _ in range(refine + 1):
        axes = [np.linspace(a, b, resolution) for a, b in zip(box_lo, box_hi)]
        u = axes[0]
        v = axes[1] if fam.n_free == 2 else np.zeros(0)
        f, i, j = kernels.grid_best(u, v, fam.M, c, fam.G, fam.h, fam.qdiag, fam.p,
                                    fam.alpha, fam.sine, tol)
        if i < 0:
            if best is None:
                raise OracleError("no feasible grid point")
            break
        z = np.array([u[i]] if fam.n_free == 1 else [u[i], v[j]])
        if best is None or f <= best[1]:
            best = (z, f)
        cell = (box_hi - box_lo) / max(resolution - 1, 1)
        box_lo = np.maximum(lo, best[0] - 2 * cell)
        box_hi = np.minimum(hi, best[0] + 2 * cell)
    z, f = best
    return complete(fam, z, x), float(f)


def label(fam, x, tol=1e-6, starts=16, seed=0):
    """Dispatch to the right oracle for the family kind."""
    if fam.kind in (Kind.QP, Kind.TOY2D):
        return solve_qp(fam, x, tol=tol)
    return solve_nonconvex(fam, x, starts=starts, tol=tol, seed=seed)


def check_label(fam, x, y, tol=1e-6):
    eq = float(np.max(np.abs(fam.A @ y - x), initial=0.0))
    ineq = float(np.max(fam.G @ y - fam.h, initial=-np.inf))
    return eq <= tol and ineq <= tol


def label_dataset(ds, tol=1e-6, starts=16, seed=0):
    """Label every instance.  Returns ``(labeled_dataset, failures)``.

    ``failures`` lists ``(index, message)``; failed rows keep NaN labels.
    """
    fam = ds.family
    Y = np.full((len(ds), fam.n), np.nan)
    F = np.full(len(ds), np.nan)
    failures = []
    for i, x in enumerate(ds.X):
        try:
            y, f = label(fam, x, tol=tol, starts=starts, seed=seed + i)
        except (SolverError, OracleError) as exc:
            failures.append((i, str(exc)))
            continue
        if not check_label(fam, x, y, tol):
            failures.append((i, "label violates residual invariants"))
            continue
        Y[i], F[i] = y, f
    meta = dict(ds.meta, labeled_by="solve_qp" if fam.kind in (Kind.QP, Kind.TOY2D)
                else f"solve_nonconvex(starts={starts})")
    return Dataset(fam, ds.X, Y, F, meta), failures
