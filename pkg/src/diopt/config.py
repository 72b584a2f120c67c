"""Run configuration: a flat ``key = value`` text format with typed fields.

Unknown keys, wrong types and out-of-range values raise
:class:`~diopt.errors.ConfigError` before any computation starts.  The
hash of the canonical text is stamped into every artifact header.
"""

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class RunConfig:
    # problem / dataset
    kind: str = "QP"
    n: int = 50
    n_eq: int = 25
    n_ineq: int = 50
    count: int = 1000
    alpha: float = 1.0
    data_seed: int = 0
    # DiOpt training
    N: int = 10000
    r_s: float = 0.2
    T: int = 5
    K_t: int = 16
    K: int = 32
    eta: float = 1.0
    beta_w: float = 1.0
    eps: float = 0.01
    lr: float = 1e-3
    batch_size: int = 256
    schedule: str = "vp"
    hidden: int = 512
    n_layers: int = 4
    t_dim: int = 32
    t_hidden: int = 512
    target: str = "WEIGHTED_ALL"
    weight_norm: str = "instance"
    sup_draws: int = 1
    seed_table_from_labels: bool = False
    val_count: int = 50
    log_every: int = 1
    log_K: int = 0
    checkpoint_every: int = 0
    seed: int = 0
    # DC3 / MLP baselines
    base_hidden: int = 512
    base_batch_norm: bool = True
    base_dropout: float = 0.2
    base_epochs: int = 1000
    base_lr: float = 1e-3
    lambda_g: float = 5.0
    lambda_h: float = 5.0
    corr_steps_train: int = 10
    corr_steps_test: int = 10
    corr_lr: float = 1e-3
    # model-based diffusion
    mbd_steps: int = 100
    mbd_samples: int = 256
    mbd_lambda_h: float = 10.0
    mbd_lambda_g: float = 10.0
    mbd_tau: float = 1.0
    mbd_weighting: str = "exp"
    mbd_completion: bool = True
    mbd_schedule: str = "linear"

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.kind in ("TOY2D", "QP", "QPSR", "CQP"), f"unknown kind {self.kind!r}")
        need(0 <= self.r_s <= 1, "r_s must lie in [0, 1]")
        need(self.K_t >= 1 and self.K >= 1, "K and K_t must be >= 1")
        need(self.eps > 0, "eps must be > 0")
        need(self.N >= 1 and self.T >= 1, "N and T must be >= 1")
        need(self.eta >= 0, "eta must be >= 0")
        need(self.kind == "TOY2D" or 0 <= self.n_eq < self.n, "need 0 <= n_eq < n")
        need(self.kind == "TOY2D" or self.n_ineq >= 1, "need n_ineq >= 1")
        need(self.count >= 0, "count must be >= 0")
        need(self.target in ("WEIGHTED_ALL", "ARGMAX"), f"unknown target {self.target!r}")
        need(self.weight_norm in ("instance", "none"), f"unknown weight_norm {self.weight_norm!r}")
        need(self.schedule in ("linear", "vp", "cosine"), f"unknown schedule {self.schedule!r}")
        need(self.mbd_schedule in ("linear", "vp", "cosine"), "unknown mbd_schedule")
        need(self.mbd_weighting in ("exp", "raw"), f"unknown mbd_weighting {self.mbd_weighting!r}")
        need(self.batch_size >= 1 and self.sup_draws >= 1, "batch_size and sup_draws must be >= 1")
        need(self.hidden >= 1 and self.n_layers >= 2, "network needs hidden >= 1 and n_layers >= 2")
        need(0 <= self.base_dropout < 1, "base_dropout must lie in [0, 1)")
        need(self.lr > 0 and self.base_lr > 0, "learning rates must be > 0")
        need(self.mbd_steps >= 1 and self.mbd_samples >= 1, "mbd_steps and mbd_samples must be >= 1")
        return self

    @property
    def eval_K(self):
        return self.log_K or self.K

    def replace(self, **kw):
        return dataclasses.replace(self, **kw).validate()

    def to_text(self):
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text):
        return cls.from_dict(parse_kv(text))

    @classmethod
    def from_dict(cls, d):
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            kw[k] = _coerce(k, v, types[k])
        return cls(**kw).validate()

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key, value, typ):
    if not isinstance(value, str):
        return value
    try:
        if typ in (bool, "bool"):
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None


def parse_kv(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in out:
            raise ConfigError(f"line {lineno}: duplicate key {k!r}")
        out[k] = v
    return out


def load_config(path):
    with open(path) as fh:
        return RunConfig.from_text(fh.read())


def save_config(path, cfg):
    with open(path, "w") as fh:
        fh.write(cfg.to_text())


PRESETS = {
    "toy2d-fast": dict(kind="TOY2D", n=2, n_eq=0, n_ineq=3, count=16, N=3000, r_s=0.2, T=5,
                       K_t=16, K=1, eta=1.0, hidden=128, t_hidden=128, batch_size=16,
                       val_count=0, log_every=100, lr=3e-5),
    "qp-desk": dict(kind="QP", n=50, n_eq=25, n_ineq=50, count=1000, N=2000, r_s=0.2, T=5,
                    K_t=16, K=32, hidden=512, t_hidden=512, batch_size=256, val_count=50),
    "full": dict(kind="QP", n=100, n_eq=50, n_ineq=100, count=10000, N=10000, r_s=0.2, T=5,
                  K_t=16, K=32, hidden=512, t_hidden=512),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig(**{**PRESETS[name], **overrides}).validate()
