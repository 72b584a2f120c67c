"""DDPM noise schedules, forward noising and the reverse sampler."""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, SamplingError, ShapeError
from .nn import NoiseNet

SCHEDULE_KINDS = ("linear", "vp", "cosine")


@dataclass(frozen=True)
class Schedule:
    """Per-step quantities, stored 1-indexed: entry ``t`` belongs to step ``t``.

    Index 0 holds the boundary convention ``alpha_bar[0] = 1`` (and
    ``beta[0] = 0``) so that ``sigma`` is defined at ``t = 1``.
    """

    T: int
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigma_ddpm: np.ndarray

    def sigma(self, t, eta):
        return eta * self.sigma_ddpm[t]


def make_schedule(T, kind="linear"):
    """Build a schedule with ``T`` steps.

    ``linear`` interpolates beta from 1e-4 to 0.02 (``T = 1`` uses the
    0.02 endpoint).  ``vp`` is the discretised variance-preserving SDE with
    beta_min=0.1, beta_max=10, which keeps ``alpha_bar_T`` near zero for any
    ``T`` and is what short chains (T=5) need.  ``cosine`` is the
    squared-cosine alpha_bar curve with betas capped at 0.999.
    """
    T = int(T)
    if T < 1:
        raise DomainError("schedule needs T >= 1")
    if kind == "linear":
        betas = np.array([0.02]) if T == 1 else np.linspace(1e-4, 0.02, T)
    elif kind == "vp":
        t = np.arange(1, T + 1)
        b_min, b_max = 0.1, 10.0
        betas = 1.0 - np.exp(-b_min / T - 0.5 * (b_max - b_min) * (2 * t - 1) / T**2)
    elif kind == "cosine":
        s = 0.008
        f = lambda u: np.cos((u / T + s) / (1 + s) * np.pi / 2) ** 2
        t = np.arange(T + 1)
        ab = f(t) / f(0)
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise DomainError(f"unknown schedule kind {kind!r}")
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sig = np.zeros(T + 1)
    sig[1:] = np.sqrt((1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:])
    for a in (betas, alphas, alpha_bars, sig):
        a.setflags(write=False)
    return Schedule(T, kind, betas, alphas, alpha_bars, sig)


def q_sample(y0, t, eps, sched):
    """``sqrt(abar_t) y0 + sqrt(1 - abar_t) eps``; ``t`` may be an int or per-row array."""
    y0 = np.asarray(y0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if y0.shape != eps.shape:
        raise ShapeError(f"y0 {y0.shape} and eps {eps.shape} differ")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise DomainError(f"timestep outside [1, {sched.T}]")
    ab = sched.alpha_bars[t]
    if ab.ndim == 1 and y0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps


@dataclass
class NoiseModel:
    """The denoiser together with its schedule.

    ``d_out`` is the width of the sampled variable (free variables when
    equality completion is active) and ``d_x`` the condition width.
    """

    net: NoiseNet
    schedule: Schedule

    @property
    def d_out(self):
        return self.net.d_y

    @property
    def d_x(self):
        return self.net.d_x

    @classmethod
    def create(cls, d_out, d_x, T, rng, kind="vp", hidden=512, n_layers=4, t_dim=32,
               t_hidden=512):
        net = NoiseNet.create(d_out, d_x, rng, hidden, n_layers, t_dim, t_hidden)
        return cls(net, make_schedule(T, kind))

    def eps(self, Y, t, X):
        out = self.net.forward(Y, t, X)
        if not np.all(np.isfinite(out)):
            raise SamplingError(f"non-finite noise prediction at step {t}")
        return out


def _cond_rows(x, d_x, B):
    if d_x == 0:
        return np.zeros((B, 0))
    X = np.asarray(x, dtype=np.float64).reshape(-1, d_x)
    return np.broadcast_to(X, (B, d_x))


def _step(sched, Y, eps_hat, t, eta, Z):
    a = sched.alphas[t]
    ab = sched.alpha_bars[t]
    mean = (Y - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if t > 1 and eta != 0.0:
        mean = mean + sched.sigma(t, eta) * Z
    return mean


def denoise_step(model, y_t, x, t, eta, z):
    """One reverse step ``y_t -> y_{t-1}``.

    Works on a single vector or a batch.  The noise term is skipped at
    ``t = 1`` and whenever ``eta == 0``.
    """
    sched = model.schedule
    if not 1 <= int(t) <= sched.T:
        raise DomainError(f"timestep {t} outside [1, {sched.T}]")
    Y = np.atleast_2d(np.asarray(y_t, dtype=np.float64))
    X = _cond_rows(x, model.d_x, Y.shape[0])
    eps_hat = model.eps(Y, int(t), X)
    Z = np.asarray(z, dtype=np.float64).reshape(Y.shape)
    out = _step(sched, Y, eps_hat, int(t), float(eta), Z)
    return out[0] if np.ndim(y_t) == 1 else out


def reverse_process(model, X, y_T, noises, eta):
    """Run ``t = T..1`` from ``y_T`` with pre-drawn per-step noise.

    ``X`` is ``(B, d_x)``, ``y_T`` is ``(B, d_out)`` and ``noises`` is
    ``(T, B, d_out)`` where ``noises[t-1]`` is used at step ``t``.
    """
    sched = model.schedule
    Y = np.array(y_T, dtype=np.float64)
    for t in range(sched.T, 0, -1):
        eps_hat = model.eps(Y, t, X)
        Y = _step(sched, Y, eps_hat, t, eta, noises[t - 1] if eta != 0.0 else None)
    return Y


def trajectory_noise(seed, index, T, d):
    """Initial and per-step noise of one trajectory, from the stream ``(seed, index)``."""
    rng = np.random.default_rng([int(seed), int(index)])
    return rng.standard_normal(d), rng.standard_normal((T, d))


def sample_candidates(model, x, K, eta, seed):
    """Draw ``K`` reverse-diffusion endpoints for condition ``x``.

    Trajectory ``k`` uses its own stream ``(seed, k)``, so the result does
    not depend on evaluation order or on ``K`` for the shared prefix.
    """
    if K < 1:
        raise DomainError("K must be >= 1")
    d, T = model.d_out, model.schedule.T
    init = np.empty((K, d))
    noise = np.empty((T, K, d))
    for k in range(K):
        init[k], noise[:, k, :] = trajectory_noise(seed, k, T, d)
    return reverse_process(model, _cond_rows(x, model.d_x, K), init, noise, eta)


def sample_batch(model, X, K, eta, rng):
    """``K`` samples for every row of ``X`` from a single generator.

    Returns ``(len(X), K, d_out)``.  Cheaper than :func:`sample_candidates`
    when many conditions are sampled at once (training, evaluation).
    """
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(len(X), model.d_x) if model.d_x else np.zeros((len(X), 0))
    B = len(X) * K
    Xr = np.repeat(X, K, axis=0)
    d, T = model.d_out, model.schedule.T
    init = rng.standard_normal((B, d))
    noise = rng.standard_normal((T, B, d)) if eta != 0.0 else None
    return reverse_process(model, Xr, init, noise, eta).reshape(len(X), K, d)
