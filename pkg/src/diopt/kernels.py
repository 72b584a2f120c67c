"""Hot inner loops.

Every kernel here has two implementations with identical semantics: a
numba-compiled loop and a numpy path.  The module-level names resolve to
one or the other according to ``diopt._accel.USE_NUMBA``; both variants
stay importable under ``*_numba`` / ``*_numpy`` for tests and benchmarks.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# Mish activation (value and derivative in one pass)
# ---------------------------------------------------------------------------


# tanh(softplus(x)) = w / (w + 2) with w = e^x (e^x + 2); one exp per element


def mish_numpy(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(np.minimum(x, 20.0))
    w = e * (e + 2.0)
    th = np.where(x > 20.0, 1.0, w / (w + 2.0))
    sig = e / (1.0 + e)
    return x * th, th + x * (1.0 - th * th) * sig


@njit
def _mish_loop(x, out, dout):
    for i in range(x.size):
        v = x[i]
        if v > 20.0:
            out[i] = v
            dout[i] = 1.0
            continue
        e = math.exp(v)
        w = e * (e + 2.0)
        th = w / (w + 2.0)
        sig = e / (1.0 + e)
        out[i] = v * th
        dout[i] = th + v * (1.0 - th * th) * sig


def mish_numba(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(x)
    dout = np.empty_like(x)
    _mish_loop(x.reshape(-1), out.reshape(-1), dout.reshape(-1))
    return out, dout


# ---------------------------------------------------------------------------
# Cone membership counting for the vertex-feasibility Monte Carlo
# ---------------------------------------------------------------------------


def cone_count_numpy(points, normals):
    """Count rows of ``points`` with ``normals[k] @ points[k] <= 0`` on every plane.

    ``points`` is (m, d); ``normals`` is (m, d, d) or (d, d) when shared.
    """
    if normals.ndim == 2:
        s = points @ normals.T
    else:
        s = np.einsum("kij,kj->ki", normals, points)
    return int(np.count_nonzero(np.all(s <= 0.0, axis=1)))


@njit
def _cone_count_loop(points, normals, shared):
    m, d = points.shape
    hits = 0
    for k in range(m):
        inside = True
        for i in range(d):
            s = 0.0
            for j in range(d):
                if shared:
                    s += normals[0, i, j] * points[k, j]
                else:
                    s += normals[k, i, j] * points[k, j]
            if s > 0.0:
                inside = False
                break
        if inside:
            hits += 1
    return hits


def cone_count_numba(points, normals):
    points = np.ascontiguousarray(points, dtype=np.float64)
    shared = normals.ndim == 2
    nrm = np.ascontiguousarray(normals[None] if shared else normals, dtype=np.float64)
    return int(_cone_count_loop(points, nrm, shared))


# ---------------------------------------------------------------------------
# Exhaustive grid evaluation over an (at most 2-D) free-variable box
# ---------------------------------------------------------------------------


def _grid_objective_numpy(Y, qdiag, p, alpha, sine):
    lin = alpha * (np.sin(Y) @ p) if sine else Y @ p
    return 0.5 * (Y * Y) @ qdiag + lin


def grid_best_numpy(u, v, M, c, G, h, qdiag, p, alpha, sine, tol, chunk=1 << 16):
    """Best feasible point of ``y = M @ (u_i, v_j) + c`` over the tensor grid.

    ``v`` may be empty for a one-dimensional free space.  Returns
    ``(f_best, i_best, j_best)``; ``i_best = -1`` when no grid point is
    feasible.  Ties keep the first point in (i, j) lexicographic order.
    """
    nv = max(len(v), 1)
    total = len(u) * nv
    best = (math.inf, -1, -1)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        ii, jj = idx // nv, idx % nv
        Z = u[ii][:, None] if len(v) == 0 else np.column_stack([u[ii], v[jj]])
        Y = Z @ M.T + c
        feas = np.all(Y @ G.T - h <= tol, axis=1) if G.shape[0] else np.ones(len(Y), bool)
        if not feas.any():
            continue
        f = np.where(feas, _grid_objective_numpy(Y, qdiag, p, alpha, sine), np.inf)
        k = int(np.argmin(f))
        if f[k] < best[0]:
            best = (float(f[k]), int(ii[k]), int(jj[k]) if len(v) else -1)
    return best


@njit
def _grid_best_loop(u, v, M, c, G, h, qdiag, p, alpha, sine, tol):
    n = M.shape[0]
    m = G.shape[0]
    nv = max(v.shape[0], 1)
    y = np.empty(n)
    fbest = np.inf
    ib = -1
    jb = -1
    for i in range(u.shape[0]):
        for j in range(nv):
            for r in range(n):
                acc = c[r] + M[r, 0] * u[i]
                if v.shape[0] > 0:
                    acc += M[r, 1] * v[j]
                y[r] = acc
            ok = True
            for r in range(m):
                s = -h[r]
                for k in range(n):
                    s += G[r, k] * y[k]
                if s > tol:
                    ok = False
                    break
            if not ok:
                continue
            f = 0.0
            for k in range(n):
                f += 0.5 * qdiag[k] * y[k] * y[k]
                if sine:
                    f += alpha * p[k] * math.sin(y[k])
                else:
                    f += p[k] * y[k]
            if f < fbest:
                fbest = f
                ib = i
                jb = j if v.shape[0] > 0 else -1
    return fbest, ib, jb


def grid_best_numba(u, v, M, c, G, h, qdiag, p, alpha, sine, tol):
    f, i, j = _grid_best_loop(
        np.ascontiguousarray(u, dtype=np.float64),
        np.ascontiguousarray(v, dtype=np.float64),
        np.ascontiguousarray(M, dtype=np.float64),
        np.ascontiguousarray(c, dtype=np.float64),
        np.ascontiguousarray(G, dtype=np.float64).reshape(-1, M.shape[0]),
        np.ascontiguousarray(h, dtype=np.float64),
        np.ascontiguousarray(qdiag, dtype=np.float64),
        np.ascontiguousarray(p, dtype=np.float64),
        float(alpha), bool(sine), float(tol),
    )
    return float(f), int(i), int(j)


# ---------------------------------------------------------------------------
# ADMM (operator splitting) for  min 1/2 y'Py + q'y  s.t.  l <= C y <= u
# ---------------------------------------------------------------------------


def _admm_loop_impl(P, q, C, l, u, is_eq, rho0, sigma, relax, eps_abs, eps_rel,
                    max_iter, check_every):
    n = P.shape[0]
    m = C.shape[0]
    x = np.zeros(n)
    z = np.zeros(m)
    lam = np.zeros(m)
    rho_bar = rho0
    rho = np.empty(m)
    for i in range(m):
        rho[i] = 1e3 * rho_bar if is_eq[i] else rho_bar
    K = P + sigma * np.eye(n) + C.T @ (C * rho[:, None])
    Kinv = np.linalg.inv(K)
    r_prim = np.inf
    r_dual = np.inf
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        rhs = sigma * x - q + C.T @ (rho * z - lam)
        xt = Kinv @ rhs
        zt = C @ xt
        x = relax * xt + (1.0 - relax) * x
        zr = relax * zt + (1.0 - relax) * z
        znew = np.minimum(np.maximum(zr + lam / rho, l), u)
        lam = lam + rho * (zr - znew)
        z = znew
        if it % check_every == 0 or it == max_iter:
            Cx = C @ x
            Px = P @ x
            Clam = C.T @ lam
            r_prim = np.max(np.abs(Cx - z)) if m > 0 else 0.0
            r_dual = np.max(np.abs(Px + q + Clam))
            sc_p = max(np.max(np.abs(Cx)) if m > 0 else 0.0, np.max(np.abs(z)) if m > 0 else 0.0)
            sc_d = max(np.max(np.abs(Px)), np.max(np.abs(Clam)), np.max(np.abs(q)))
            if r_prim <= eps_abs + eps_rel * sc_p and r_dual <= eps_abs + eps_rel * sc_d:
                converged = True
                break
            # residual balancing of the penalty parameter
            num = r_prim / max(sc_p, 1e-30)
            den = r_dual / max(sc_d, 1e-30)
            if den > 0.0 and num > 0.0:
                new_rho = rho_bar * math.sqrt(num / den)
                new_rho = min(max(new_rho, 1e-6), 1e6)
                if new_rho > 5.0 * rho_bar or new_rho < 0.2 * rho_bar:
                    rho_bar = new_rho
                    for i in range(m):
                        rho[i] = 1e3 * rho_bar if is_eq[i] else rho_bar
                    K = P + sigma * np.eye(n) + C.T @ (C * rho[:, None])
                    Kinv = np.linalg.inv(K)
    return x, z, lam, it, converged, r_prim, r_dual


admm_numpy = _admm_loop_impl
_admm_loop_jit = njit(_admm_loop_impl)


def admm_numba(P, q, C, l, u, is_eq, rho0, sigma, relax, eps_abs, eps_rel, max_iter, check_every):
    f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)
    return _admm_loop_jit(f64(P), f64(q), f64(C), f64(l), f64(u),
                          np.ascontiguousarray(is_eq, dtype=np.bool_),
                          float(rho0), float(sigma), float(relax), float(eps_abs),
                          float(eps_rel), int(max_iter), int(check_every))


# ---------------------------------------------------------------------------
# Penalised gradient descent in the free-variable space (nonconvex oracle)
# ---------------------------------------------------------------------------


def _penalty_descent_impl(z0, M, c, G, h, qdiag, p, alpha, sine, mu0, tol, max_iter):
    z = z0.copy()
    mu = mu0
    n = M.shape[0]

    def value(zz, mu_):
        y = M @ zz + c
        r = np.maximum(G @ y - h, 0.0)
        if sine:
            f = 0.5 * np.sum(qdiag * y * y) + alpha * np.sum(p * np.sin(y))
        else:
            f = 0.5 * np.sum(qdiag * y * y) + np.sum(p * y)
        return f + mu_ * np.sum(r * r), y, r

    fz, y, r = value(z, mu)
    step = 1.0
    stall = 0
    for _ in range(max_iter):
        if sine:
            gy = qdiag * y + alpha * p * np.cos(y)
        else:
            gy = qdiag * y + p
        gy = gy + 2.0 * mu * (G.T @ r)
        gz = M.T @ gy
        gn = np.sum(gz * gz)
        if gn < 1e-24:
            if np.max(r) <= tol or mu > 1e8:
                break
            mu *= 2.0
            fz, y, r = value(z, mu)
            continue
        step = min(step * 2.0, 1e3)
        accepted = False
        while step > 1e-14:
            zn = z - step * gz
            fn, yn, rn = value(zn, mu)
            if fn <= fz - 1e-4 * step * gn:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            stall += 1
        else:
            if fz - fn < 1e-12 * (1.0 + abs(fz)):
                stall += 1
            else:
                stall = 0
            z, fz, y, r = zn, fn, yn, rn
        if stall >= 3:
            if np.max(r) <= tol or mu > 1e8:
                break
            mu *= 2.0
            fz, y, r = value(z, mu)
            stall = 0
    return z, mu


penalty_descent_numpy = _penalty_descent_impl
_penalty_descent_jit = njit(_penalty_descent_impl)


def penalty_descent_numba(z0, M, c, G, h, qdiag, p, alpha, sine, mu0, tol, max_iter):
    f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)
    return _penalty_descent_jit(f64(z0), f64(M), f64(c), f64(G).reshape(-1, M.shape[0]), f64(h),
                                f64(qdiag), f64(p), float(alpha), bool(sine), float(mu0),
                                float(tol), int(max_iter))


if USE_NUMBA:
    mish = mish_numba
    cone_count = cone_count_numba
    grid_best = grid_best_numba
    admm = admm_numba
    penalty_descent = penalty_descent_numba
else:
    mish = mish_numpy
    cone_count = cone_count_numpy
    grid_best = grid_best_numpy
    admm = admm_numpy
    penalty_descent = penalty_descent_numpy
