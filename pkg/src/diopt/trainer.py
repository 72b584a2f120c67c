"""Supervised warm start, weighted bootstrapping and the DiOpt training loop."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .diffusion import NoiseModel, q_sample, sample_batch
from .errors import ConfigError, TrainingError
from .evaluation import (EPS_VIOLATION, WeightMode, metrics, rank_key, select_batch,
                         weights)
from .nn import OptimizerState, adam_step
from .problems import complete, free_part, objective

LOG_COLUMNS = ("epoch", "phase", "loss", "objective", "gap%", "ineq_mean", "ineq_max",
               "ineq_numviol", "feasibility%")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def weighted_denoise_loss(model, Z, X, w, rng):
    """``sum_r w_r |eps_r - eps_theta(z_t, t, x)|^2 / B`` with fresh ``t`` and ``eps``.

    ``B`` is ``len(Z)`` unless the caller folds it into ``w``.  Returns
    ``(loss, grads)``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    R = len(Z)
    T = model.schedule.T
    t = rng.integers(1, T + 1, size=R)
    eps = rng.standard_normal(Z.shape)
    Yt = q_sample(Z, t, eps, model.schedule)
    w = np.asarray(w, dtype=np.float64)

    def loss_grad(out):
        diff = out - eps
        per = np.sum(diff * diff, axis=1)
        return float(w @ per), 2.0 * w[:, None] * diff

    return model.net.forward_backward(Yt, t, X, loss_grad)


def supervised_loss(model, X, Zstar, rng, draws=1):
    """Mean squared noise-prediction error on labelled free variables.

    Each label is noised ``draws`` times at a uniform step in ``[1, T]``.
    """
    if Zstar is None or np.any(~np.isfinite(Zstar)):
        raise ConfigError("supervised loss needs labels for every instance in the batch")
    Z = np.repeat(np.asarray(Zstar, dtype=np.float64), draws, axis=0)
    Xr = np.repeat(np.asarray(X, dtype=np.float64).reshape(len(Zstar), -1), draws, axis=0)
    return weighted_denoise_loss(model, Z, Xr, np.full(len(Z), 1.0 / len(Z)), rng)


# ---------------------------------------------------------------------------
# look-up table
# ---------------------------------------------------------------------------


class LookupTable:
    """Best candidate ever offered per instance index.

    Ordering is the FULL-mode weight order (:func:`rank_key`), which does
    not depend on ``f_star``; the incumbent wins ties.
    """

    def __init__(self, fam, size, eps=EPS_VIOLATION):
        self.fam = fam
        self.eps = eps
        self.has = np.zeros(size, dtype=bool)
        self.Z = np.full((size, fam.n_free), np.nan)
        self.Y = np.full((size, fam.n), np.nan)
        self.feasible = np.zeros(size, dtype=bool)
        self.score = np.full(size, -np.inf)

    def __len__(self):
        return int(self.has.sum())

    def get(self, i):
        return (self.Z[i].copy(), self.Y[i].copy()) if self.has[i] else None

    def offer(self, idx, Zc, Yc):
        """Offer candidates ``Zc (b, C, n_free)`` / ``Yc (b, C, n)`` for rows ``idx``.

        Returns a boolean mask of the rows whose entry was replaced.
        """
        idx = np.asarray(idx)
        feas, score = rank_key(self.fam, Yc, self.eps)
        replaced = np.zeros(len(idx), dtype=bool)
        for r, i in enumerate(idx):
            order = np.lexsort((np.arange(Yc.shape[1]), -score[r], ~feas[r]))
            k = order[0]
            better = (not self.has[i] or (feas[r, k] and not self.feasible[i])
                      or (feas[r, k] == self.feasible[i] and score[r, k] > self.score[i]))
            if better:
                self.has[i] = True
                self.Z[i], self.Y[i] = Zc[r, k], Yc[r, k]
                self.feasible[i], self.score[i] = feas[r, k], score[r, k]
                replaced[r] = True
        return replaced

    def best_feasible_objective(self, idx):
        idx = np.asarray(idx)
        out = np.full(len(idx), np.nan)
        ok = self.has[idx] & self.feasible[idx]
        out[ok] = -self.score[idx[ok]]
        return out


# ---------------------------------------------------------------------------
# bootstrapping
# ---------------------------------------------------------------------------


@dataclass
class BootstrapTargets:
    Z: np.ndarray          # (R, n_free) training rows
    X: np.ndarray          # (R, n_eq)
    w: np.ndarray          # (R,) row weights, already divided by the batch size
    omega: np.ndarray      # (b, C) raw weights over the joined set (nan where absent)
    omega_mod: np.ndarray  # (b, C) modified weights
    replaced: np.ndarray   # (b,) table rows updated


def masked_modified_weights(W, mask):
    """Modified weights over the valid entries of each row (invalid -> 0)."""
    Wm = np.where(mask, W, 0.0)
    cnt = np.maximum(mask.sum(axis=1, keepdims=True), 1)
    mean = Wm.sum(axis=1, keepdims=True) / cnt
    has_neg = np.any(mask & (W < 0), axis=1, keepdims=True)
    diff = Wm - mean
    tol = 8 * np.finfo(np.float64).eps * np.abs(Wm).max(axis=1, keepdims=True)
    out = np.where(has_neg, np.where(diff > tol, diff, 0.0), Wm)
    return np.where(mask, out, 0.0)


def _f_star(fam, idx, F, table, Ycand, mask):
    fs = np.full(len(idx), np.nan)
    if F is not None:
        fs = np.asarray(F, dtype=np.float64)[idx].copy()
    miss = ~np.isfinite(fs)
    if miss.any():
        fs[miss] = table.best_feasible_objective(np.asarray(idx)[miss])
    miss = ~np.isfinite(fs)
    if miss.any():
        f = np.where(mask, objective(fam, Ycand), np.inf)
        fs[miss] = f[miss].min(axis=1)
    return fs


def bootstrap_targets(model, fam, X, idx, table, K_t, mode, rng, eta=1.0, beta_w=1.0,
                      eps=EPS_VIOLATION, target="WEIGHTED_ALL", weight_norm="instance",
                      F=None):
    """Sample, weight and select training rows for the instances ``idx``.

    ``X`` holds the conditions of the whole dataset (rows addressed by
    ``idx``) and ``F`` optional oracle objectives.  The table is updated
    with the fresh samples after the weights are computed.
    """
    idx = np.asarray(idx)
    b = len(idx)
    Xb = X[idx]
    Zs = sample_batch(model, Xb, K_t, eta, rng)
    Ys = complete(fam, Zs, Xb[:, None, :])
    C = K_t + 1
    Zj = np.zeros((b, C, fam.n_free))
    Yj = np.zeros((b, C, fam.n))
    Zj[:, :K_t], Yj[:, :K_t] = Zs, Ys
    mask = np.ones((b, C), dtype=bool)
    has = table.has[idx]
    mask[:, K_t] = has
    Zj[has, K_t] = table.Z[idx[has]]
    Yj[has, K_t] = table.Y[idx[has]]

    fs = _f_star(fam, idx, F, table, Yj, mask)
    W = weights(fam, Yj, fs[:, None], mode, beta_w, eps)
    W = np.where(mask, W, np.nan)
    Wt = masked_modified_weights(np.nan_to_num(W, nan=0.0), mask)

    if target == "ARGMAX":
        Wsel = np.zeros_like(Wt)
        key = np.where(mask, np.nan_to_num(W, nan=-np.inf), -np.inf)
        k = np.argmax(key, axis=1)
        Wsel[np.arange(b), k] = Wt[np.arange(b), k]
    elif target == "WEIGHTED_ALL":
        Wsel = Wt
    else:
        raise ConfigError(f"unknown target {target!r}")
    if weight_norm == "instance":
        tot = Wsel.sum(axis=1, keepdims=True)
        Wsel = np.where(tot > 0, Wsel / np.where(tot > 0, tot, 1.0), 0.0)
    rows = np.nonzero(Wsel > 0)
    replaced = table.offer(idx, Zs, Ys)
    return BootstrapTargets(Zj[rows], Xb[rows[0]], Wsel[rows] / b, W, Wt, replaced)


def bootstrap_step(model, fam, X, idx, table, K_t, mode, rng, **kw):
    """One bootstrapping loss evaluation.

    Returns ``(loss, grads, targets)``; ``grads`` is ``None`` when every
    modified weight is zero (the step is skipped, the table still updated).
    """
    tg = bootstrap_targets(model, fam, X, idx, table, K_t, mode, rng, **kw)
    if len(tg.w) == 0:
        return 0.0, None, tg
    loss, grads = weighted_denoise_loss(model, tg.Z, tg.X, tg.w, rng)
    return loss, grads, tg


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def phase_of(epoch, n_sup, alternate=True):
    if epoch < n_sup:
        return "supervised"
    if not alternate:
        return WeightMode.FULL.value
    return WeightMode.FULL.value if epoch % 2 == 0 else WeightMode.VIOLATION_ONLY.value


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    loss: float
    objective: float = math.nan
    gap: float = math.nan
    ineq_mean: float = math.nan
    ineq_max: float = math.nan
    ineq_numviol: float = math.nan
    feasibility: float = math.nan

    def values(self):
        return (self.epoch, self.phase, self.loss, self.objective, self.gap, self.ineq_mean,
                self.ineq_max, self.ineq_numviol, self.feasibility)


@dataclass
class TrainResult:
    model: NoiseModel
    log: list = field(default_factory=list)
    table: LookupTable = None
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None


def split_indices(m, val_count):
    """Last ``val_count`` rows validate, the rest train; tiny sets share rows."""
    all_idx = np.arange(m)
    if val_count <= 0:
        return all_idx, all_idx[: min(m, 64)]
    if m <= val_count:
        return all_idx, all_idx
    return all_idx[: m - val_count], all_idx[m - val_count:]


def evaluate_model(model, ds, idx, K, eta, rng, eps=EPS_VIOLATION):
    """Sample ``K`` candidates per instance, select, and compute metrics."""
    fam = ds.family
    Xv = ds.X[idx]
    Zc = sample_batch(model, Xv, K, eta, rng)
    Yc = complete(fam, Zc, Xv[:, None, :])
    Ysel = select_batch(fam, Yc, None, eps)
    Fs = ds.F[idx] if ds.labeled else None
    return metrics(fam, Xv, Ysel, Fs, eps)


def new_model(ds, cfg, rng):
    fam = ds.family
    return NoiseModel.create(fam.n_free, fam.n_eq, cfg.T, rng, kind=cfg.schedule,
                             hidden=cfg.hidden, n_layers=cfg.n_layers, t_dim=cfg.t_dim,
                             t_hidden=cfg.t_hidden)


def train(ds, cfg: RunConfig, model=None, on_epoch=None, alternate=True, start_epoch=0,
          table=None):
    """Run the DiOpt loop on ``ds``.

    The first ``floor(r_s N)`` epochs minimise the supervised loss; the rest
    bootstrap with FULL weights on even and VIOLATION_ONLY on odd epochs
    (FULL throughout when ``alternate`` is false).  ``on_epoch(epoch, model,
    record)`` is called after each epoch.
    """
    cfg.validate()
    fam = ds.family
    n_sup = int(math.floor(cfg.r_s * cfg.N))
    if n_sup > start_epoch and not ds.labeled:
        raise ConfigError("supervised epochs need a labelled dataset")
    if model is None:
        model = new_model(ds, cfg, np.random.default_rng([cfg.seed, 0]))
    arrays = model.net.arrays()
    opt = OptimizerState.for_params(arrays, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    train_idx, val_idx = split_indices(len(ds), cfg.val_count)
    if table is None:
        table = LookupTable(fam, len(ds), cfg.eps)
        if cfg.seed_table_from_labels and ds.labeled:
            ok = np.isfinite(ds.F)
            rows = np.flatnonzero(ok)
            table.offer(rows, free_part(fam, ds.Y[rows])[:, None, :], ds.Y[rows][:, None, :])
    Zstar = free_part(fam, ds.Y) if ds.labeled else None
    res = TrainResult(model, [], table, train_idx, val_idx)
    for epoch in range(start_epoch, cfg.N):
        phase = phase_of(epoch, n_sup, alternate)
        perm = rng.permutation(train_idx)
        losses = []
        for s in range(0, len(perm), cfg.batch_size):
            bi = perm[s:s + cfg.batch_size]
            if phase == "supervised":
                loss, grads = supervised_loss(model, ds.X[bi], Zstar[bi], rng, cfg.sup_draws)
            else:
                loss, grads, _ = bootstrap_step(
                    model, fam, ds.X, bi, table, cfg.K_t, WeightMode(phase), rng, eta=cfg.eta,
                    beta_w=cfg.beta_w, eps=cfg.eps, target=cfg.target,
                    weight_norm=cfg.weight_norm, F=ds.F)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} ({phase})")
            losses.append(loss)
            if grads is not None:
                adam_step(opt, arrays, grads)
        rec = EpochRecord(epoch, phase, float(np.mean(losses)) if losses else 0.0)
        if cfg.log_every and (epoch % cfg.log_every == 0 or epoch == cfg.N - 1) and len(val_idx):
            m = evaluate_model(model, ds, val_idx, cfg.eval_K, cfg.eta,
                               np.random.default_rng([cfg.seed, 2, epoch]), cfg.eps)
            s = m.summary
            rec.objective, rec.gap = s["Objective"][0], s["Gap%"][0]
            rec.ineq_mean, rec.ineq_max = s["Ineq Mean"][0], s["Ineq Max"][0]
            rec.ineq_numviol, rec.feasibility = s["Ineq Num Viol"][0], s["Feasibility%"][0]
        res.log.append(rec)
        if on_epoch is not None:
            on_epoch(epoch, model, rec)
    return res


def write_epoch_log(path, log):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for rec in log:
            w.writerow([repr(v) if isinstance(v, float) else v for v in rec.values()])


def read_epoch_log(path):
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        head = next(r)
        if tuple(head) != LOG_COLUMNS:
            raise ValueError(f"unexpected epoch-log header {head}")
        for row in r:
            out.append(EpochRecord(int(row[0]), row[1], *(float(v) for v in row[2:])))
    return out


# ---------------------------------------------------------------------------
# distribution-collapse diagnostic
# ---------------------------------------------------------------------------


def sample_spread(model, ds, idx, K, eta, rng):
    """Mean per-instance variance (trace) of ``K`` completed samples."""
    fam = ds.family
    Xv = ds.X[idx]
    Y = complete(fam, sample_batch(model, Xv, K, eta, rng), Xv[:, None, :])
    return float(np.mean(np.sum(Y.var(axis=1), axis=-1)))


def collapse_diagnostic(model, ds, cfg, epochs, K=512):
    """Continue training a converged model with FULL-only and with alternating
    weights for ``epochs`` epochs each; return both sample spreads."""
    out = {}
    base = cfg.replace(N=epochs, r_s=0.0, log_every=0)
    for name, alt in (("full_only", False), ("alternating", True)):
        m = NoiseModel(model.net.copy(), model.schedule)
        train(ds, base, model=m, alternate=alt)
        idx = np.arange(min(len(ds), 8))
        out[name] = sample_spread(m, ds, idx, K, cfg.eta, np.random.default_rng([cfg.seed, 3]))
    return out
