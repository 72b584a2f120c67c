"""Parametric benchmark families and the dataset file format.

Every family has the form::

    min_y  f(y)  s.t.  A y = x,  G y <= h

with a diagonal quadratic ``f`` (plus ``alpha * p' sin(y)`` for QPSR) and
the instance parameter ``x`` on the equality right-hand side.  Equalities
are eliminated by *completion*: a fixed set of ``n_eq`` basic columns of
``A`` is solved for, given the remaining free variables ``z``, so that
``y = M z + N x`` satisfies ``A y = x`` exactly.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from .errors import CompletionError, GenerationError, ParseError, ShapeError, UnsupportedVersionError


class Kind(str, Enum):
    TOY2D = "TOY2D"
    QP = "QP"
    QPSR = "QPSR"
    CQP = "CQP"


@dataclass
class ProblemFamily:
    kind: Kind
    n: int
    n_eq: int
    n_ineq: int
    qdiag: np.ndarray
    p: np.ndarray
    A: np.ndarray
    G: np.ndarray
    h: np.ndarray
    alpha: float = 0.0
    seed: int = 0
    basis: np.ndarray = field(default=None)
    M: np.ndarray = field(init=False, repr=False)
    N: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.kind = Kind(self.kind)
        self.qdiag = np.asarray(self.qdiag, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64).reshape(self.n_eq, self.n)
        self.G = np.asarray(self.G, dtype=np.float64).reshape(self.n_ineq, self.n)
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.basis is None:
            self.basis = choose_basis(self.A)
        self.basis = np.asarray(self.basis, dtype=np.int64)
        self.M, self.N = _completion_maps(self.A, self.basis)

    @property
    def free(self):
        return np.setdiff1d(np.arange(self.n), self.basis)

    @property
    def n_free(self):
        return self.n - self.n_eq

    @property
    def sine(self):
        return self.kind == Kind.QPSR

    def anchor(self, x):
        """``A^+ x``: inequality-feasible for every ``x`` in ``[-1, 1]^n_eq``."""
        if self.n_eq == 0:
            return np.zeros(np.shape(x)[:-1] + (self.n,))
        return np.asarray(x) @ np.linalg.pinv(self.A).T

    def summary(self):
        return (f"{self.kind.value} family: n={self.n} n_eq={self.n_eq} n_ineq={self.n_ineq} "
                f"alpha={self.alpha} seed={self.seed}")


def choose_basis(A):
    """Greedy column-pivoted QR choice of ``n_eq`` well-conditioned basic columns."""
    if A.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    _, _, piv = scipy.linalg.qr(A, pivoting=True, mode="economic")
    return np.sort(piv[: A.shape[0]])


def _completion_maps(A, basis):
    n_eq, n = A.shape
    free = np.setdiff1d(np.arange(n), basis)
    M = np.zeros((n, len(free)))
    N = np.zeros((n, n_eq))
    M[free, np.arange(len(free))] = 1.0
    if n_eq:
        AB = A[:, basis]
        if np.linalg.cond(AB) > 1e12:
            raise CompletionError("basic submatrix of A is numerically singular")
        ABinv = np.linalg.inv(AB)
        M[basis] = -ABinv @ A[:, free]
        N[basis] = ABinv
    return M, N


def _toy_family():
    # min 1/2|y|^2 - 2(y1 + y2)  s.t.  y1 <= 1, y2 <= 1, -y1 - y2 <= 1
    # optimum at the vertex (1, 1) where the first two constraints are active
    return ProblemFamily(Kind.TOY2D, 2, 0, 3, qdiag=np.ones(2), p=np.array([-2.0, -2.0]),
                         A=np.zeros((0, 2)), G=np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]),
                         h=np.ones(3), alpha=0.0, seed=0)


def feasibility_rhs(G, A):
    """``h_i = sum_j |(G A^+)_ij|``."""
    return np.abs(np.asarray(G) @ np.linalg.pinv(np.asarray(A))).sum(axis=1)


def generate_family(kind, n=50, n_eq=25, n_ineq=50, seed=0, alpha=1.0):
    """Draw a benchmark family.

    ``A`` and ``G`` are standard normal; ``Q`` diagonal and ``p`` are uniform
    on ``[0, 1]`` (QP, QPSR) or ``[-1, 0]`` (CQP); ``h`` makes ``A^+ x``
    feasible for all ``x`` in the unit box.  ``alpha`` is only used by QPSR.
    ``TOY2D`` ignores the dimension arguments and the seed.
    """
    kind = Kind(kind)
    if kind == Kind.TOY2D:
        return _toy_family()
    if not 0 <= n_eq < n:
        raise GenerationError(f"need 0 <= n_eq < n (got n_eq={n_eq}, n={n})")
    if n_ineq < 1:
        raise GenerationError("need n_ineq >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = (-1.0, 0.0) if kind == Kind.CQP else (0.0, 1.0)
    qdiag = rng.uniform(lo, hi, n)
    p = rng.uniform(lo, hi, n)
    for _ in range(100):
        A = rng.standard_normal((n_eq, n))
        G = rng.standard_normal((n_ineq, n))
        if np.linalg.matrix_rank(A) < n_eq:
            continue
        h = feasibility_rhs(G, A)
        try:
            return ProblemFamily(kind, n, n_eq, n_ineq, qdiag, p, A, G, h,
                                 alpha=alpha if kind == Kind.QPSR else 0.0, seed=seed)
        except CompletionError:
            continue
    raise GenerationError("could not draw a full-row-rank A in 100 attempts")


def generate_instances(fam, count, seed):
    """Condition vectors ``x`` uniform on ``[-1, 1]^n_eq``, shape ``(count, n_eq)``."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(int(count), fam.n_eq))


# ---------------------------------------------------------------------------
# evaluation of objective / constraints (all accept leading batch axes)
# ---------------------------------------------------------------------------


def objective(fam, y):
    y = np.asarray(y, dtype=np.float64)
    quad = 0.5 * (y * y) @ fam.qdiag
    if fam.sine:
        return quad + fam.alpha * (np.sin(y) @ fam.p)
    return quad + y @ fam.p


def objective_grad(fam, y):
    y = np.asarray(y, dtype=np.float64)
    if fam.sine:
        return fam.qdiag * y + fam.alpha * fam.p * np.cos(y)
    return fam.qdiag * y + fam.p


def ineq_values(fam, y):
    return np.asarray(y, dtype=np.float64) @ fam.G.T - fam.h


def ineq_violations(fam, y):
    """Elementwise ``max(G y - h, 0)``."""
    return np.maximum(ineq_values(fam, y), 0.0)


def eq_residual(fam, y, x):
    """``A y - x``."""
    return np.asarray(y, dtype=np.float64) @ fam.A.T - np.asarray(x, dtype=np.float64)


def complete(fam, z, x, check=True):
    """Fill the basic variables so that ``A y = x``; ``z`` gives the free ones."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != fam.n_free:
        raise ShapeError(f"free-variable width {z.shape[-1]} != {fam.n_free}")
    x = np.asarray(x, dtype=np.float64)
    y = z @ fam.M.T
    if fam.n_eq:
        y = y + x @ fam.N.T
        if check:
            res = np.max(np.abs(eq_residual(fam, y, x)), initial=0.0)
            scale = max(1.0, float(np.max(np.abs(y), initial=0.0)))
            if not res <= 1e-8 * scale:
                raise CompletionError(f"equality residual {res:.3e} after completion")
    return y


def free_part(fam, y):
    return np.asarray(y)[..., fam.free]


# ---------------------------------------------------------------------------
# dataset file
# ---------------------------------------------------------------------------

MAGIC = b"DIOPTDS\x00"
VERSION = 1
_PRE = struct.Struct("<8sII")


@dataclass
class Dataset:
    family: ProblemFamily
    X: np.ndarray
    Y: np.ndarray = None
    F: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.X)

    @property
    def labeled(self):
        return self.Y is not None

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.family, self.X[idx],
                       None if self.Y is None else self.Y[idx],
                       None if self.F is None else self.F[idx], dict(self.meta))


def save_dataset(path, ds):
    """Write the versioned binary dataset format (see README)."""
    fam = ds.family
    header = {
        "kind": fam.kind.value, "n": fam.n, "n_eq": fam.n_eq, "n_ineq": fam.n_ineq,
        "seed": int(fam.seed), "alpha": float(fam.alpha), "count": len(ds),
        "labeled": ds.labeled, "basis": [int(b) for b in fam.basis], "meta": ds.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    arrays = [fam.qdiag, fam.p, fam.A, fam.G, fam.h, ds.X]
    if ds.labeled:
        arrays += [ds.Y, ds.F]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    with open(path, "wb") as fh:
        fh.write(_PRE.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(hbytes + payload)))


def load_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _PRE.size:
        raise ParseError("file shorter than the fixed preamble", len(buf))
    magic, version, hlen = _PRE.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ParseError("bad magic bytes", 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"dataset version {version} (this build reads {VERSION})")
    off = _PRE.size
    if len(buf) < off + hlen:
        raise ParseError("truncated header", len(buf))
    try:
        header = json.loads(buf[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed header: {exc}", off) from None
    hbytes = buf[off:off + hlen]
    off += hlen
    n, ne, ni, cnt = header["n"], header["n_eq"], header["n_ineq"], header["count"]
    shapes = [(n,), (n,), (ne, n), (ni, n), (ni,), (cnt, ne)]
    if header["labeled"]:
        shapes += [(cnt, n), (cnt,)]
    arrays = []
    start = off
    for shp in shapes:
        nbytes = 8 * int(np.prod(shp))
        if len(buf) < off + nbytes:
            raise ParseError(f"truncated array of shape {shp}", len(buf))
        arrays.append(np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off)
                      .reshape(shp).astype(np.float64))
        off += nbytes
    if len(buf) < off + 4:
        raise ParseError("missing checksum", len(buf))
    (crc,) = struct.unpack_from("<I", buf, off)
    if crc != zlib.crc32(hbytes + buf[start:off]):
        raise ParseError("checksum mismatch", off)
    if len(buf) != off + 4:
        raise ParseError("trailing bytes after checksum", off + 4)
    fam = ProblemFamily(Kind(header["kind"]), n, ne, ni, arrays[0], arrays[1], arrays[2],
                        arrays[3], arrays[4], alpha=header["alpha"], seed=header["seed"],
                        basis=np.array(header["basis"], dtype=np.int64))
    Y, F = (arrays[6], arrays[7]) if header["labeled"] else (None, None)
    return Dataset(fam, arrays[5], Y, F, header.get("meta", {}))
