"""Comparison methods: DC3, a supervised MLP, and model-based diffusion."""

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import make_schedule
from .errors import ConfigError, DomainError, TrainingError
from .nn import (MlpParams, OptimizerState, adam_step, backward_from_cache, init_mlp,
                 mlp_forward, mlp_forward_cached)
from .problems import complete, eq_residual, free_part, ineq_values, objective, objective_grad
from .trainer import EpochRecord, split_indices
from .evaluation import metrics


# ---------------------------------------------------------------------------
# inequality correction
# ---------------------------------------------------------------------------


def violation_energy(fam, Y):
    v = np.maximum(ineq_values(fam, Y), 0.0)
    return np.sum(v * v, axis=-1)


def _correct(fam, Z, X, steps, lr, record=False):
    """Backtracking descent on ``|ReLU(G y - h)|^2`` in ``z``.

    Rows that cannot decrease in 30 halvings keep their point.  With
    ``record`` the per-step ``(active mask, accepted step size)`` pairs are
    returned for the reverse pass.
    """
    Z = np.array(Z, dtype=np.float64)
    GM = fam.G @ fam.M
    tape = []
    Y = complete(fam, Z, X, check=False)
    E = violation_energy(fam, Y)
    for _ in range(steps):
        g = ineq_values(fam, Y)
        act = g > 0
        grad = 2.0 * (np.where(act, g, 0.0) @ GM)
        step = np.full(len(Z), float(lr))
        accepted = np.zeros(len(Z))
        todo = np.flatnonzero(E > 0)
        for _ in range(30):
            if not len(todo):
                break
            Zt = Z[todo] - step[todo, None] * grad[todo]
            Et = violation_energy(fam, complete(fam, Zt, X[todo] if X.ndim == 2 else X,
                                                check=False))
            ok = Et <= E[todo]
            acc = todo[ok]
            Z[acc] = Zt[ok]
            E[acc] = Et[ok]
            accepted[acc] = step[acc]
            todo = todo[~ok]
            step[todo] *= 0.5
        tape.append((act, accepted))
        Y = complete(fam, Z, X, check=False)
    return (Z, tape) if record else Z


def _rows(fam, X, m):
    # reshape that also works when there are no equality columns
    X = np.asarray(X, dtype=np.float64)
    rows = len(X) if X.ndim == 2 else (1 if fam.n_eq == 0 else X.size // fam.n_eq)
    X = X.reshape(rows, fam.n_eq)
    return np.broadcast_to(X, (m, fam.n_eq)) if rows == 1 and m > 1 else X


def dc3_correct(fam, x, y, steps=10, lr=1e-3):
    """Gradient correction of ``y`` toward inequality feasibility.

    Works on a single ``y`` or a batch (rows of ``y`` with matching rows of
    ``x``).  The completed variables are recomputed after every step, and a
    step is only taken if ``|ReLU(G y - h)|^2`` does not increase.
    """
    if steps < 0:
        raise DomainError("steps must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    Y = y[None, :] if single else y
    X = _rows(fam, x, len(Y))
    if steps == 0:
        return y.copy()
    Z = _correct(fam, free_part(fam, Y), X, steps, lr)
    out = complete(fam, Z, X)
    return out[0] if single else out


def _correct_backward(fam, tape, gZ):
    """Reverse through the recorded correction steps (step sizes held fixed)."""
    GM = fam.G @ fam.M
    for act, step in reversed(tape):
        # z' = z - 2 s (GM)^T D (GM z + const)
        inner = (gZ @ GM.T) * act
        gZ = gZ - 2.0 * step[:, None] * (inner @ GM)
    return gZ


# ---------------------------------------------------------------------------
# DC3 / MLP training
# ---------------------------------------------------------------------------


@dataclass
class BaselineModel:
    method: str
    params: MlpParams
    corr_steps: int = 0
    corr_lr: float = 1e-3
    log: list = field(default_factory=list)

    def predict_free(self, X):
        return mlp_forward(self.params, np.atleast_2d(X), train=False)

    def predict(self, fam, X):
        X = _rows(fam, X, 1)
        Y = complete(fam, self.predict_free(_inputs(fam, X)), X)
        if self.method == "dc3" and self.corr_steps:
            Y = dc3_correct(fam, X, Y, self.corr_steps, self.corr_lr)
        return Y


def soft_loss(fam, Y, X, lambda_g=5.0, lambda_h=5.0):
    """Per-row ``f + lambda_g |ReLU(g)|^2 + lambda_h |A y - x|^2`` and its y-gradient."""
    g = np.maximum(ineq_values(fam, Y), 0.0)
    loss = objective(fam, Y) + lambda_g * np.sum(g * g, axis=-1)
    grad = objective_grad(fam, Y) + 2.0 * lambda_g * (g @ fam.G)
    if fam.n_eq:
        r = eq_residual(fam, Y, X)
        loss = loss + lambda_h * np.sum(r * r, axis=-1)
        grad = grad + 2.0 * lambda_h * (r @ fam.A)
    return loss, grad


def _backbone(fam, cfg, rng):
    sizes = [max(fam.n_eq, 1), cfg.base_hidden, cfg.base_hidden, fam.n_free]
    return init_mlp(sizes, rng, activation="relu", batch_norm=cfg.base_batch_norm,
                    dropout=cfg.base_dropout)


def _inputs(fam, X):
    # an equality-free family has no condition; feed a constant zero input
    return X if fam.n_eq else np.zeros((len(X), 1))


def _train_baseline(method, ds, cfg, on_epoch=None):
    fam = ds.family
    rng = np.random.default_rng([cfg.seed, 10])
    params = _backbone(fam, cfg, np.random.default_rng([cfg.seed, 11]))
    arrays = params.arrays()
    opt = OptimizerState.for_params(arrays, lr=cfg.base_lr)
    train_idx, val_idx = split_indices(len(ds), cfg.val_count)
    model = BaselineModel(method, params, cfg.corr_steps_test if method == "dc3" else 0,
                          cfg.corr_lr)
    Ystar = ds.Y
    for epoch in range(cfg.base_epochs):
        perm = rng.permutation(train_idx)
        losses = []
        for s in range(0, len(perm), cfg.batch_size):
            bi = perm[s:s + cfg.batch_size]
            Xb = ds.X[bi]
            Zp, cache = mlp_forward_cached(params, _inputs(fam, Xb), train=True, rng=rng)
            B = len(bi)
            if method == "dc3":
                Zc, tape = _correct(fam, Zp, Xb, cfg.corr_steps_train, cfg.corr_lr, record=True)
                Y = complete(fam, Zc, Xb)
                lv, gy = soft_loss(fam, Y, Xb, cfg.lambda_g, cfg.lambda_h)
                gZ = _correct_backward(fam, tape, (gy @ fam.M) / B)
            else:
                Y = complete(fam, Zp, Xb)
                diff = Y - Ystar[bi]
                lv = np.sum(diff * diff, axis=1)
                gZ = (2.0 * diff @ fam.M) / B
            loss = float(np.mean(lv))
            if not math.isfinite(loss):
                raise TrainingError(f"{method}: non-finite loss at epoch {epoch}")
            grads, _ = backward_from_cache(params, cache, gZ)
            adam_step(opt, arrays, grads)
            losses.append(loss)
        rec = EpochRecord(epoch, method, float(np.mean(losses)) if losses else 0.0)
        if cfg.log_every and (epoch % cfg.log_every == 0 or epoch == cfg.base_epochs - 1):
            m = metrics(fam, ds.X[val_idx], model.predict(fam, ds.X[val_idx]),
                        ds.F[val_idx] if ds.labeled else None, cfg.eps)
            s = m.summary
            rec.objective, rec.gap = s["Objective"][0], s["Gap%"][0]
            rec.ineq_mean, rec.ineq_max = s["Ineq Mean"][0], s["Ineq Max"][0]
            rec.ineq_numviol, rec.feasibility = s["Ineq Num Viol"][0], s["Feasibility%"][0]
        model.log.append(rec)
        if on_epoch is not None:
            on_epoch(epoch, model, rec)
    return model


def dc3_train(ds, cfg, on_epoch=None):
    """Self-supervised training on the soft loss with unrolled correction."""
    return _train_baseline("dc3", ds, cfg, on_epoch)


def mlp_train(ds, cfg, on_epoch=None):
    """Supervised regression of the completed solution onto the labels."""
    if not ds.labeled or np.any(~np.isfinite(ds.Y)):
        raise ConfigError("the MLP baseline needs labels for every instance")
    return _train_baseline("mlp", ds, cfg, on_epoch)


# ---------------------------------------------------------------------------
# model-based diffusion (training free)
# ---------------------------------------------------------------------------


def mbd_scores(fam, Y, X, lambda_h=10.0, lambda_g=10.0):
    """``f + lambda_h |A y - x|_2 + lambda_g |ReLU(G y - h)|_2``; lower is better."""
    p = objective(fam, Y) + lambda_g * np.linalg.norm(np.maximum(ineq_values(fam, Y), 0.0),
                                                      axis=-1)
    if fam.n_eq:
        p = p + lambda_h * np.linalg.norm(eq_residual(fam, Y, X), axis=-1)
    return p


def mbd_weights(p, tau=1.0, mode="exp"):
    """Sample weights over the last axis.

    ``exp``: ``exp(-(p - min p) / tau)``.  ``raw``: ``p`` itself (higher cost,
    higher weight).  Rows whose weights do not sum to a positive finite
    number fall back to uniform.
    """
    p = np.asarray(p, dtype=np.float64)
    if mode == "exp":
        w = np.exp(-(p - p.min(axis=-1, keepdims=True)) / tau)
    elif mode == "raw":
        w = p.copy()
    else:
        raise ConfigError(f"unknown MBD weighting {mode!r}")
    tot = w.sum(axis=-1, keepdims=True)
    bad = ~(np.isfinite(tot) & (tot > 0))
    return np.where(bad, 1.0 / p.shape[-1], w / np.where(bad, 1.0, tot))


def mbd_solve(fam, X, steps=100, samples=256, lambda_h=10.0, lambda_g=10.0,
              use_completion=True, tau=1.0, mode="exp", schedule="linear", rng=None,
              return_cloud=False):
    """Training-free reverse diffusion driven by sample scores.

    ``X`` is one condition or a batch of them.  With completion the
    samples live in the free variables and are completed before scoring;
    without it they cover all ``n`` variables and the equality residual is
    only penalised.  Returns the final completed (or raw) points, plus the
    last sample cloud ``(m, samples, n)`` when ``return_cloud`` is set.
    """
    if steps < 1 or samples < 1:
        raise DomainError("steps and samples must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    single = np.ndim(X) == 1
    X = _rows(fam, X, 1)
    m = len(X)
    d = fam.n_free if use_completion else fam.n
    ab = make_schedule(steps, schedule).alpha_bars
    center = rng.standard_normal((m, d))
    Xs = X[:, None, :]
    for i in range(steps, 0, -1):
        mean = center / math.sqrt(ab[i])
        std = math.sqrt(1.0 / ab[i] - 1.0)
        Zs = mean[:, None, :] + std * rng.standard_normal((m, samples, d))
        Ys = complete(fam, Zs, Xs, check=False) if use_completion else Zs
        w = mbd_weights(mbd_scores(fam, Ys, Xs, lambda_h, lambda_g), tau, mode)
        center = math.sqrt(ab[i - 1]) * np.einsum("mk,mkd->md", w, Zs)
    Y = complete(fam, center, X) if use_completion else center
    if single:
        Y, Ys = Y[0], Ys[0]
    return (Y, Ys) if return_cloud else Y
