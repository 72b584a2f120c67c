"""Candidate weighting, solution selection, metrics, and the vertex-cone
Monte Carlo estimate."""

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from .errors import DomainError
from .problems import eq_residual, ineq_values, objective

EPS_VIOLATION = 0.01


class WeightMode(str, Enum):
    FULL = "FULL"
    VIOLATION_ONLY = "VIOLATION_ONLY"


def weights(fam, Y, f_star, mode=WeightMode.FULL, beta_w=1.0, eps=EPS_VIOLATION):
    """Candidate weights for ``Y`` (any leading shape, last axis ``n``).

    FULL: ``exp(beta_w (f_star - f))`` if every violation is ``<= eps``,
    otherwise minus the summed violation.  VIOLATION_ONLY: minus the summed
    violation for every candidate.  ``f_star`` broadcasts against
    ``Y.shape[:-1]``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    viol = np.maximum(ineq_values(fam, Y), 0.0)
    neg = -viol.sum(axis=-1)
    if WeightMode(mode) == WeightMode.VIOLATION_ONLY:
        return neg
    feasible = np.all(viol <= eps, axis=-1)
    expo = np.minimum(beta_w * (np.asarray(f_star) - objective(fam, Y)), 700.0)
    return np.where(feasible, np.exp(expo), neg)


def weight(fam, x, y, f_star, mode=WeightMode.FULL, beta_w=1.0, eps=EPS_VIOLATION):
    """Scalar weight of one candidate ``y`` (``x`` is implied by completion)."""
    return float(weights(fam, np.asarray(y)[None, :], f_star, mode, beta_w, eps)[0])


def modified_weights(w):
    """Mean-shifted, clipped weights over the last axis.

    The shift is applied only to candidate sets containing a negative
    weight; other sets are returned unchanged.
    """
    w = np.asarray(w, dtype=np.float64)
    diff = w - w.mean(axis=-1, keepdims=True)
    # the mean of equal values can round below them; treat that as zero
    tol = 8 * np.finfo(np.float64).eps * np.abs(w).max(axis=-1, keepdims=True)
    shifted = np.where(diff > tol, diff, 0.0)
    has_neg = np.any(w < 0, axis=-1, keepdims=True)
    return np.where(has_neg, shifted, w)


def rank_key(fam, Y, eps=EPS_VIOLATION):
    """Sort key equivalent to FULL-mode weight order for any ``f_star``.

    Larger is better: feasible before infeasible, then lower objective
    (feasible) or lower total violation (infeasible).
    """
    viol = np.maximum(ineq_values(fam, Y), 0.0)
    feasible = np.all(viol <= eps, axis=-1)
    return feasible, np.where(feasible, -objective(fam, Y), -viol.sum(axis=-1))


def select_index(fam, Y, f_star_est=None, eps=EPS_VIOLATION):
    """Index of the chosen candidate among the rows of ``Y`` (shape ``(K, n)``).

    Maximal FULL weight; ties go to lower objective, then lower index.
    """
    Y = np.asarray(Y, dtype=np.float64)
    f = objective(fam, Y)
    if f_star_est is None:
        f_star_est = float(np.min(f))
    w = weights(fam, Y, f_star_est, WeightMode.FULL, 1.0, eps)
    order = np.lexsort((np.arange(len(Y)), f, -w))
    return int(order[0])


def select_solution(fam, x, candidates, f_star_est=None, eps=EPS_VIOLATION):
    candidates = np.asarray(candidates)
    return candidates[select_index(fam, candidates, f_star_est, eps)]


def select_batch(fam, Ycand, f_star=None, eps=EPS_VIOLATION):
    """Selection for every instance: ``Ycand`` is ``(m, K, n)``, returns ``(m, n)``."""
    out = np.empty((Ycand.shape[0], Ycand.shape[2]))
    for i in range(len(Ycand)):
        fs = None if f_star is None else float(f_star[i])
        out[i] = Ycand[i, select_index(fam, Ycand[i], fs, eps)]
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("Objective", "Gap%", "Ineq Mean", "Ineq Max", "Ineq Num Viol", "Feasibility%")


@dataclass
class MetricsRecord:
    objective: np.ndarray
    gap: np.ndarray
    gap_absolute: np.ndarray
    ineq_mean: np.ndarray
    ineq_max: np.ndarray
    ineq_num_viol: np.ndarray
    eq_max: np.ndarray
    eq_num_viol: np.ndarray
    feasible: np.ndarray
    summary: dict = field(default_factory=dict)

    def row(self):
        """Table-shaped ``{column: (mean, std)}``."""
        return {c: self.summary[c] for c in METRIC_COLUMNS}


def _mean_std(a):
    a = np.asarray(a, dtype=np.float64)
    a = a[np.isfinite(a)]
    if a.size == 0:
        return (math.nan, math.nan)
    return (float(a.mean()), float(a.std()))


def metrics(fam, X, Ysel, F_star=None, eps=EPS_VIOLATION):
    """Per-instance metrics plus mean/std over instances.

    ``Gap% = (f - f*) / |f*| * 100``; when ``|f*| < 1e-12`` the absolute
    difference is reported and ``gap_absolute`` is set for that row.
    An instance is feasible when no inequality exceeds ``eps`` and no
    equality residual exceeds ``eps``.
    """
    Ysel = np.asarray(Ysel, dtype=np.float64)
    g = ineq_values(fam, Ysel)
    viol = np.maximum(g, 0.0)
    f = objective(fam, Ysel)
    m = len(Ysel)
    if fam.n_eq:
        eqr = np.abs(eq_residual(fam, Ysel, X))
        eq_max, eq_num = eqr.max(axis=1), (eqr > eps).sum(axis=1)
    else:
        eq_max, eq_num = np.zeros(m), np.zeros(m, dtype=int)
    num = (g > eps).sum(axis=1)
    if F_star is None:
        gap = np.full(m, np.nan)
        gabs = np.zeros(m, dtype=bool)
    else:
        F_star = np.asarray(F_star, dtype=np.float64)
        gabs = np.abs(F_star) < 1e-12
        gap = np.where(gabs, f - F_star, (f - F_star) / np.where(gabs, 1.0, np.abs(F_star)) * 100.0)
    feas = (num == 0) & (eq_num == 0)
    rec = MetricsRecord(f, gap, gabs, viol.mean(axis=1), viol.max(axis=1), num, eq_max, eq_num,
                        feas)
    rec.summary = {
        "Objective": _mean_std(f),
        "Gap%": _mean_std(gap),
        "Ineq Mean": _mean_std(rec.ineq_mean),
        "Ineq Max": _mean_std(rec.ineq_max),
        "Ineq Num Viol": _mean_std(num),
        "Feasibility%": (100.0 * float(feas.mean()) if m else math.nan, 0.0),
        "Eq Max": _mean_std(eq_max),
        "Eq Num Viol": _mean_std(eq_num),
    }
    return rec


def aggregate_seeds(records):
    """Mean and std across seeds of each per-seed mean."""
    out = {}
    for c in METRIC_COLUMNS + ("Eq Max", "Eq Num Viol"):
        vals = np.array([r.summary[c][0] for r in records], dtype=np.float64)
        out[c] = (float(np.nanmean(vals)), float(np.nanstd(vals)))
    return out


def write_results_csv(path, rows):
    """``rows``: list of ``(label_dict, {column: (mean, std)})``."""
    label_keys = list(rows[0][0]) if rows else []
    cols = list(METRIC_COLUMNS) + ["Eq Max", "Eq Num Viol"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = list(label_keys)
        for c in cols:
            head += [c, f"{c} mean", f"{c} std"]
        w.writerow(head)
        for labels, summ in rows:
            line = [labels[k] for k in label_keys]
            for c in cols:
                mu, sd = summ.get(c, (math.nan, math.nan))
                line += [f"{mu:.4f} ± {sd:.4f}", repr(mu), repr(sd)]
            w.writerow(line)


# ---------------------------------------------------------------------------
# vertex-cone Monte Carlo
# ---------------------------------------------------------------------------


@dataclass
class ConeEstimate:
    d: int
    estimate: float
    stderr: float
    n_points: int

    @property
    def target(self):
        return 2.0 ** -self.d

    @property
    def z_score(self):
        return (self.estimate - self.target) / self.stderr if self.stderr > 0 else math.inf


def _unit_rows(rng, shape):
    a = rng.standard_normal(shape)
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def theorem1_mc(d, n_planes=None, n_points=10**6, eps_ball=1e-3, seed=0, chunk=1 << 15,
                redraw_normals=True):
    """Fraction of a small ball around an LP vertex lying in the feasible set.

    The vertex sits at the origin with ``d`` active half-spaces
    ``a_i . y <= 0`` whose normals are uniform on the sphere.  With
    ``redraw_normals`` each ball point gets a fresh set of normals, so the
    estimate targets the probability averaged over constraint draws;
    otherwise one set of normals is shared.  The remaining
    ``n_planes - d`` planes are inactive at the vertex (offset at least
    ``2 * eps_ball``).
    """
    d = int(d)
    if d < 1:
        raise DomainError("dimension must be >= 1")
    n_planes = d if n_planes is None else int(n_planes)
    if n_planes < d:
        raise DomainError("need at least d planes")
    rng = np.random.default_rng([int(seed), d])
    shared = None if redraw_normals else _unit_rows(rng, (d, d))
    inactive = _unit_rows(rng, (n_planes - d, d))
    offsets = rng.uniform(2 * eps_ball, 1.0 + 2 * eps_ball, n_planes - d)
    hits = 0
    done = 0
    while done < n_points:
        m = min(chunk, n_points - done)
        pts = _unit_rows(rng, (m, d)) * (eps_ball * rng.random((m, 1)) ** (1.0 / d))
        normals = shared if shared is not None else _unit_rows(rng, (m, d, d))
        if len(offsets):
            keep = np.all(pts @ inactive.T <= offsets, axis=1)
            hits += kernels.cone_count(pts[keep], normals if shared is not None else normals[keep])
        else:
            hits += kernels.cone_count(pts, normals)
        done += m
    p = hits / n_points
    return ConeEstimate(d, p, math.sqrt(max(p * (1 - p), 1e-300) / n_points), n_points)
