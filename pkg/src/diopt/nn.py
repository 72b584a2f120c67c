"""Fixed-architecture MLPs with hand-written reverse mode, plus Adam.

Weights are stored ``(fan_in, fan_out)`` so a batch ``X`` of shape
``(B, fan_in)`` maps to ``X @ W + b``.  Everything is float64.

The noise network used by the diffusion model concatenates its inputs in
the order ``(y_t, time embedding, x)``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError, TrainingError
from .kernels import mish

ACTIVATIONS = ("mish", "relu", "identity")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _act(name, z):
    if name == "mish":
        return mish(z)
    if name == "relu":
        pos = z > 0
        return z * pos, pos.astype(np.float64)
    if name == "identity":
        return z, None
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class MlpParams:
    """Parameters of an MLP with ``len(weights)`` affine layers.

    The hidden activation follows every layer except the last, which is
    linear.  Batch norm (when ``gammas`` is non-empty) sits between a hidden
    affine map and its activation; dropout follows the activation.  Both
    are active only in training mode.
    """

    weights: list
    biases: list
    activation: str = "mish"
    dropout: float = 0.0
    gammas: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    running_mean: list = field(default_factory=list)
    running_var: list = field(default_factory=list)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("weights and biases must be non-empty and paired")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[0]} != previous output "
                                 f"{self.weights[i - 1].shape[1]}")

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    @property
    def batch_norm(self):
        return bool(self.gammas)

    def arrays(self):
        """Trainable arrays, in the order used by gradients and Adam."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + list(self.gammas) + list(self.betas)

    def buffers(self):
        return list(self.running_mean) + list(self.running_var)

    def copy(self):
        cp = lambda xs: [a.copy() for a in xs]
        return MlpParams(cp(self.weights), cp(self.biases), self.activation, self.dropout,
                         cp(self.gammas), cp(self.betas), cp(self.running_mean),
                         cp(self.running_var))


def init_mlp(sizes, rng, activation="mish", batch_norm=False, dropout=0.0):
    """Uniform(+-1/sqrt(fan_in)) initialisation for a chain of widths ``sizes``."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2:
        raise ShapeError("need at least input and output widths")
    ws, bs = [], []
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(max(fi, 1))
        ws.append(rng.uniform(-bound, bound, size=(fi, fo)))
        bs.append(rng.uniform(-bound, bound, size=fo))
    hidden = sizes[1:-1]
    params = MlpParams(ws, bs, activation, dropout)
    if batch_norm:
        params.gammas = [np.ones(h) for h in hidden]
        params.betas = [np.zeros(h) for h in hidden]
        params.running_mean = [np.zeros(h) for h in hidden]
        params.running_var = [np.ones(h) for h in hidden]
    return params


def _forward(params, X, train=False, rng=None):
    L = len(params.weights)
    cache = {"inputs": [], "dact": [], "bn": [], "masks": []}
    h = X
    for i in range(L):
        cache["inputs"].append(h)
        z = h @ params.weights[i] + params.biases[i]
        if i == L - 1:
            return z, cache
        if params.batch_norm:
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                params.running_mean[i] *= 1 - BN_MOMENTUM
                params.running_mean[i] += BN_MOMENTUM * mu
                params.running_var[i] *= 1 - BN_MOMENTUM
                params.running_var[i] += BN_MOMENTUM * var
            else:
                mu, var = params.running_mean[i], params.running_var[i]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv
            cache["bn"].append((zhat, inv, train))
            z = zhat * params.gammas[i] + params.betas[i]
        h, d = _act(params.activation, z)
        cache["dact"].append(d)
        if train and params.dropout > 0.0:
            if rng is None:
                raise ValueError("dropout in training mode needs an rng")
            mask = (rng.random(h.shape) >= params.dropout) / (1.0 - params.dropout)
            h = h * mask
            cache["masks"].append(mask)
        else:
            cache["masks"].append(None)
    raise AssertionError("unreachable")


def _check_input(params, X):
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise ShapeError(f"input width {X.shape[-1]} != network input width {params.in_dim}")
    return X, squeeze


def mlp_forward(params, X, train=False, rng=None):
    """Evaluate the network on a vector or a ``(B, in_dim)`` batch."""
    X, squeeze = _check_input(params, X)
    out, _ = _forward(params, X, train, rng)
    return out[0] if squeeze else out


def mlp_forward_cached(params, X, train=False, rng=None):
    X, _ = _check_input(params, X)
    return _forward(params, X, train, rng)


def backward_from_cache(params, cache, G):
    """Reverse pass.  Returns ``(grads, input_grad)``; ``grads`` follows ``params.arrays()``."""
    L = len(params.weights)
    gW = [None] * L
    gb = [None] * L
    gg = [None] * len(params.gammas)
    gbe = [None] * len(params.betas)
    g = G
    for i in range(L - 1, -1, -1):
        h = cache["inputs"][i]
        gW[i] = h.T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i == 0:
            break
        j = i - 1
        mask = cache["masks"][j]
        if mask is not None:
            g = g * mask
        d = cache["dact"][j]
        if d is not None:
            g = g * d
        if params.batch_norm:
            zhat, inv, train = cache["bn"][j]
            gg[j] = (g * zhat).sum(axis=0)
            gbe[j] = g.sum(axis=0)
            gz = g * params.gammas[j]
            if train:
                B = g.shape[0]
                g = inv / B * (B * gz - gz.sum(axis=0) - zhat * (gz * zhat).sum(axis=0))
            else:
                g = gz * inv
    grads = []
    for a, b in zip(gW, gb):
        grads += [a, b]
    return grads + gg + gbe, g


def mlp_backward(params, X, output_grad, train=False, rng=None):
    """Gradients of ``sum(output_grad * mlp_forward(params, X))``.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered as
    ``params.arrays()``.
    """
    X, squeeze = _check_input(params, X)
    G = np.asarray(output_grad, dtype=np.float64)
    if squeeze:
        G = G[None, :]
    if G.shape != (X.shape[0], params.out_dim):
        raise ShapeError(f"output_grad shape {G.shape} != {(X.shape[0], params.out_dim)}")
    _, cache = _forward(params, X, train, rng)
    grads, gin = backward_from_cache(params, cache, G)
    return grads, (gin[0] if squeeze else gin)


# ---------------------------------------------------------------------------
# time embedding
# ---------------------------------------------------------------------------


def sinusoidal_features(t, dim=32, max_period=10000.0):
    """Interleaved ``(sin, cos)`` pairs at geometrically spaced frequencies."""
    if dim % 2:
        raise ShapeError("embedding dimension must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = max_period ** (-np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    out = np.empty((len(t), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


@dataclass
class TimeEmbedding:
    dim: int
    head: MlpParams

    @classmethod
    def create(cls, rng, dim=32, hidden=512):
        return cls(dim, init_mlp([dim, hidden, dim], rng, activation="mish"))


def time_embed(t, T, emb):
    """Projected sinusoidal embedding of an integer timestep ``0 <= t <= T``."""
    if not 0 <= int(t) <= int(T):
        raise DomainError(f"timestep {t} outside [0, {T}]")
    return mlp_forward(emb.head, sinusoidal_features(int(t), emb.dim)[0])


# ---------------------------------------------------------------------------
# noise network eps_theta(y_t, t, x)
# ---------------------------------------------------------------------------


@dataclass
class NoiseNet:
    backbone: MlpParams
    embed: TimeEmbedding
    d_y: int
    d_x: int

    @classmethod
    def create(cls, d_y, d_x, rng, hidden=512, n_layers=4, t_dim=32, t_hidden=512):
        embed = TimeEmbedding.create(rng, t_dim, t_hidden)
        sizes = [d_y + t_dim + d_x] + [hidden] * (n_layers - 1) + [d_y]
        return cls(init_mlp(sizes, rng, activation="mish"), embed, d_y, d_x)

    def arrays(self):
        return self.backbone.arrays() + self.embed.head.arrays()

    def copy(self):
        return NoiseNet(self.backbone.copy(),
                        TimeEmbedding(self.embed.dim, self.embed.head.copy()),
                        self.d_y, self.d_x)

    def _inputs(self, Y, t, X):
        Y = np.asarray(Y, dtype=np.float64)
        t = np.asarray(t)
        B = Y.shape[0]
        if Y.ndim != 2 or Y.shape[1] != self.d_y:
            raise ShapeError(f"y_t shape {Y.shape}, expected (B, {self.d_y})")
        X = np.asarray(X, dtype=np.float64).reshape(B, -1) if self.d_x else np.zeros((B, 0))
        if X.shape[1] != self.d_x:
            raise ShapeError(f"condition width {X.shape[1]} != {self.d_x}")
        t = np.broadcast_to(t, (B,))
        uniq, inv = np.unique(t, return_inverse=True)
        return Y, X, uniq, inv

    def forward(self, Y, t, X):
        Y, X, uniq, inv = self._inputs(Y, t, X)
        E = mlp_forward(self.embed.head, sinusoidal_features(uniq, self.embed.dim))
        return mlp_forward(self.backbone, np.hstack([Y, E[inv], X]))

    def forward_backward(self, Y, t, X, loss_grad_fn):
        """Forward pass, then reverse with ``G = loss_grad_fn(output)``.

        ``loss_grad_fn`` returns ``(loss, dloss/doutput)``; this returns
        ``(loss, grads)`` with grads ordered as ``self.arrays()``.
        """
        Y, X, uniq, inv = self._inputs(Y, t, X)
        feats = sinusoidal_features(uniq, self.embed.dim)
        E, ecache = mlp_forward_cached(self.embed.head, feats)
        out, bcache = mlp_forward_cached(self.backbone, np.hstack([Y, E[inv], X]))
        loss, G = loss_grad_fn(out)
        bgrads, gin = backward_from_cache(self.backbone, bcache, G)
        gE = np.zeros_like(E)
        np.add.at(gE, inv, gin[:, self.d_y:self.d_y + self.embed.dim])
        egrads, _ = backward_from_cache(self.embed.head, ecache, gE)
        return loss, bgrads + egrads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: list
    v: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, arrays, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                   lr, beta1, beta2, eps)


def adam_step(state, arrays, grads):
    """Bias-corrected Adam update, in place on ``arrays``.

    Raises :class:`TrainingError` (leaving everything untouched) if any
    gradient is non-finite.
    """
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ShapeError("parameter / gradient / moment lists differ in length")
    for a, g in zip(arrays, grads):
        if a.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {a.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient; step aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        a -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
