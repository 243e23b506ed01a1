"""Demand-side probability objects: popularity, per-user preferences, request counts.

The central abstractions are a catalog-wide popularity vector, a per-user
demand profile (active levels plus conditional file preferences), and a
sparse matrix of observed request counts.  A synthetic generator produces
profiles whose user heterogeneity is controlled by a single similarity knob
while the aggregate popularity stays exactly Zipf.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

SUM_TOL = 1e-12

# Kernel exponents above this are evaluated in log space to avoid
# overflow/underflow in the direct power.
_LOG_KERNEL_EXPONENT = 50.0


class DemandError(ValueError):
    """Invalid demand object or operation input."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _check_unit_interval(a: np.ndarray, name: str) -> None:
    if a.size and (a.min() < -SUM_TOL or a.max() > 1.0 + SUM_TOL):
        raise DemandError(f"{name} entries must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class PopularityVector:
    """Catalog-wide request probabilities, one entry per file."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise DemandError("popularity must be a non-empty 1-d vector")
        _check_unit_interval(p, "popularity")
        if abs(p.sum() - 1.0) > SUM_TOL:
            raise DemandError("popularity must sum to 1")
        object.__setattr__(self, "p", _readonly(p))

    @property
    def F(self) -> int:
        return self.p.size

    def __len__(self) -> int:
        return self.p.size


@dataclass(frozen=True, eq=False)
class DemandProfile:
    """Per-user demand: active levels ``w`` and preference rows ``Q``.

    ``w[k]`` is the probability that the next request in the area comes from
    user ``k``; ``Q[k, f]`` is the probability that user ``k`` requests file
    ``f`` given that it requests at all.  Rows of ``Q`` are stochastic.
    """

    w: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        Q = np.asarray(self.Q, dtype=np.float64)
        if w.ndim != 1 or Q.ndim != 2 or Q.shape[0] != w.size:
            raise DemandError("need w of shape (K,) and Q of shape (K, F)")
        if w.size == 0 or Q.shape[1] == 0:
            raise DemandError("profile must have at least one user and file")
        _check_unit_interval(w, "active level")
        _check_unit_interval(Q, "preference")
        if abs(w.sum() - 1.0) > SUM_TOL:
            raise DemandError("active levels must sum to 1")
        err = np.abs(Q.sum(axis=1) - 1.0).max()
        if err > SUM_TOL:
            raise DemandError(f"preference rows must sum to 1 (off by {err:.3e})")
        object.__setattr__(self, "w", _readonly(w))
        object.__setattr__(self, "Q", _readonly(Q))

    @property
    def K(self) -> int:
        return self.w.size

    @property
    def F(self) -> int:
        return self.Q.shape[1]


@dataclass(frozen=True, eq=False)
class LatentFeatures:
    """Scalar user/file features behind a synthesized profile.

    ``regenerations`` counts how many times the features had to be perturbed
    to escape a numerically degenerate draw (all-zero kernel column or user).
    """

    X: np.ndarray
    Y: np.ndarray
    alpha: float
    regenerations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "X", _readonly(np.asarray(self.X, dtype=np.float64)))
        object.__setattr__(self, "Y", _readonly(np.asarray(self.Y, dtype=np.float64)))


class RequestMatrix:
    """Sparse K x F matrix of nonnegative integer request counts.

    Row, column and grand totals are computed once at construction and
    reused by estimators.  Optional ``user_ids``/``file_ids`` keep the
    external identities of rows and columns when the matrix is a slice of a
    larger dataset.
    """

    def __init__(self, counts, user_ids=None, file_ids=None):
        m = sp.csr_array(counts)
        if m.ndim != 2:
            raise DemandError("request counts must be 2-d")
        if m.nnz and m.data.min() < 0:
            raise DemandError("request counts must be nonnegative")
        data = m.data
        if data.size and not np.all(data == np.floor(data)):
            raise DemandError("request counts must be integers")
        m = sp.csr_array(m.astype(np.int64))
        m.eliminate_zeros()
        self.counts = m
        self.user_totals = np.asarray(m.sum(axis=1)).ravel().astype(np.int64)
        self.file_totals = np.asarray(m.sum(axis=0)).ravel().astype(np.int64)
        self.total = int(self.user_totals.sum())
        self.user_ids = None if user_ids is None else tuple(user_ids)
        self.file_ids = None if file_ids is None else tuple(file_ids)
        if self.user_ids is not None and len(self.user_ids) != self.K:
            raise DemandError("user_ids length must match row count")
        if self.file_ids is not None and len(self.file_ids) != self.F:
            raise DemandError("file_ids length must match column count")

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def F(self) -> int:
        return self.counts.shape[1]

    @classmethod
    def from_dense(cls, arr, user_ids=None, file_ids=None) -> "RequestMatrix":
        return cls(sp.csr_array(np.asarray(arr)), user_ids, file_ids)

    @classmethod
    def from_pairs(cls, shape, users, files, counts=None,
                   user_ids=None, file_ids=None) -> "RequestMatrix":
        """Build from parallel index arrays; duplicate pairs accumulate."""
        users = np.asarray(users, dtype=np.int64)
        files = np.asarray(files, dtype=np.int64)
        if counts is None:
            counts = np.ones(users.size, dtype=np.int64)
        m = sp.coo_array((counts, (users, files)), shape=shape)
        return cls(m.tocsr(), user_ids, file_ids)

    def nonzero(self):
        """Return (user_idx, file_idx, count) arrays for the nonzero cells."""
        coo = self.counts.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data

    def to_dense(self) -> np.ndarray:
        return self.counts.toarray()


def zipf_popularity(F: int, beta: float) -> PopularityVector:
    """Zipf popularity over ``F`` files, most popular first.

    ``p[f] = (f+1)**-beta / sum_j (j+1)**-beta`` using 1-based ranks.
    """
    if F <= 0:
        raise DemandError("catalog must contain at least one file")
    if beta < 0:
        raise DemandError("zipf exponent must be nonnegative")
    ranks = np.arange(1, F + 1, dtype=np.float64)
    weights = ranks ** (-beta)
    return PopularityVector(weights / weights.sum())


def power_kernel(x, y, alpha):
    """Similarity kernel ``(1 - |x - y|)**(1/alpha**3 - 1)`` on [0, 1] features.

    ``alpha`` in (0, 1] tunes how sharply preference mass concentrates around
    a user's feature; ``alpha = 1`` makes the kernel identically 1.  Large
    exponents are evaluated in log space.
    """
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise DemandError("alpha must lie in (0, 1]")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if (x < 0).any() or (x > 1).any() or (y < 0).any() or (y > 1).any():
        raise DemandError("features must lie in [0, 1]")
    exponent = 1.0 / alpha**3 - 1.0
    base = 1.0 - np.abs(x - y)
    if exponent == 0.0:
        return np.ones_like(base) if base.ndim else 1.0
    if exponent > _LOG_KERNEL_EXPONENT:
        with np.errstate(divide="ignore"):
            out = np.exp(exponent * np.log(base))
    else:
        out = base ** exponent
    return out if out.ndim else float(out)


def synthesize_demand(F: int, K: int, alpha: float, beta: float,
                      seed: int) -> tuple[DemandProfile, LatentFeatures]:
    """Draw a synthetic demand profile with exact Zipf aggregate popularity.

    User features are drawn before file features from separate child streams
    of the seed, so enlarging the catalog never changes user features.  The
    joint cell mass is ``P[k, f] = p[f] * g(X[k], Y[f]) / sum_k' g(X[k'], Y[f])``,
    from which active levels are row sums and preferences are normalized rows.
    Degenerate draws (a kernel column or row underflowing to zero mass) are
    retried with perturbed features and counted in the returned features.
    """
    if K <= 0:
        raise DemandError("need at least one user")
    root = np.random.SeedSequence(seed)
    user_ss, file_ss, retry_ss = root.spawn(3)
    X = np.random.Generator(np.random.PCG64(user_ss)).uniform(0.0, 1.0, K)
    Y = np.random.Generator(np.random.PCG64(file_ss)).uniform(0.0, 1.0, F)
    pop = zipf_popularity(F, beta)
    retry_gen = np.random.Generator(np.random.PCG64(retry_ss))

    regenerations = 0
    while True:
        G = power_kernel(X[:, None], Y[None, :], alpha)
        col = G.sum(axis=0)
        if col.min() > 0.0:
            P = pop.p[None, :] * G / col[None, :]
            w = P.sum(axis=1)
            if w.min() > 0.0:
                break
        regenerations += 1
        if regenerations > 100:
            raise DemandError(
                "could not synthesize a non-degenerate profile; alpha too extreme")
        X = np.clip(X + retry_gen.uniform(-0.05, 0.05, K), 0.0, 1.0)
        Y = np.clip(Y + retry_gen.uniform(-0.05, 0.05, F), 0.0, 1.0)

    Q = P / w[:, None]
    profile = DemandProfile(w, Q)
    feats = LatentFeatures(X, Y, alpha, regenerations)
    return profile, feats


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two nonnegative vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DemandError("similarity needs two vectors of equal length")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DemandError("similarity of a zero vector is undefined")
    return float(a @ b / (na * nb))


def average_similarity(Q) -> float:
    """Mean pairwise cosine similarity over all unordered row pairs of ``Q``."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] < 2:
        raise DemandError("need at least two preference rows")
    norms = np.linalg.norm(Q, axis=1)
    if norms.min() == 0.0:
        raise DemandError("similarity of a zero vector is undefined")
    Qn = Q / norms[:, None]
    gram = Qn @ Qn.T
    iu = np.triu_indices(Q.shape[0], k=1)
    return float(gram[iu].mean())


def aggregate_popularity(profile: DemandProfile) -> PopularityVector:
    """Collapse a profile into catalog popularity: ``p = w @ Q``."""
    return PopularityVector(profile.w @ profile.Q)


def ml_estimates(requests: RequestMatrix) -> tuple[PopularityVector, DemandProfile]:
    """Frequency estimates of popularity and per-user demand.

    ``p[f] = n_f / N``, ``w[k] = n_k / N``, ``Q[k, f] = n_kf / n_k``; users
    with no requests get a uniform preference row.
    """
    if requests.total == 0:
        raise DemandError("cannot estimate from an empty request history")
    N = float(requests.total)
    p = requests.file_totals / N
    w = requests.user_totals / N
    Q = requests.to_dense().astype(np.float64)
    nk = requests.user_totals.astype(np.float64)
    active = nk > 0
    Q[active] /= nk[active, None]
    Q[~active] = 1.0 / requests.F
    return PopularityVector(p), DemandProfile(w, Q)


# ---------------------------------------------------------------------------
# Serialization.  Every artifact is a CSV next to a small JSON envelope.

def _float_cell(x: float) -> str:
    return repr(float(x))


def _write_envelope(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _read_envelope(path: Path) -> dict:
    return json.loads(path.read_text())


def save_popularity(pop: PopularityVector, base, *, beta=None, seed=None) -> tuple[Path, Path]:
    """Write ``<base>.csv`` (header of file ids, one value row) and ``<base>.json``."""
    base = Path(base)
    csv_path = base.with_suffix(".csv")
    ids = range(1, pop.F + 1)
    lines = [",".join(f"f{i}" for i in ids),
             ",".join(_float_cell(v) for v in pop.p)]
    csv_path.write_text("\n".join(lines) + "\n")
    env = {"K": None, "F": pop.F, "alpha": None, "beta": beta, "seed": seed}
    json_path = base.with_suffix(".json")
    _write_envelope(json_path, env)
    return csv_path, json_path


def load_popularity(base) -> tuple[PopularityVector, dict]:
    base = Path(base)
    lines = base.with_suffix(".csv").read_text().splitlines()
    values = np.array([float(v) for v in lines[1].split(",")])
    return PopularityVector(values), _read_envelope(base.with_suffix(".json"))


def save_profile(profile: DemandProfile, base, *, alpha=None, beta=None,
                 seed=None) -> tuple[Path, Path]:
    """Write ``<base>.csv`` (one row per user) and a ``<base>.json`` envelope.

    Columns are ``user_id``, ``active_level`` and one preference column per
    file id.
    """
    base = Path(base)
    csv_path = base.with_suffix(".csv")
    header = "user_id,active_level," + ",".join(f"f{i}" for i in range(1, profile.F + 1))
    rows = [header]
    for k in range(profile.K):
        cells = [str(k + 1), _float_cell(profile.w[k])]
        cells.extend(_float_cell(v) for v in profile.Q[k])
        rows.append(",".join(cells))
    csv_path.write_text("\n".join(rows) + "\n")
    env = {"K": profile.K, "F": profile.F, "alpha": alpha, "beta": beta, "seed": seed}
    json_path = base.with_suffix(".json")
    _write_envelope(json_path, env)
    return csv_path, json_path


def load_profile(base) -> tuple[DemandProfile, dict]:
    base = Path(base)
    lines = base.with_suffix(".csv").read_text().splitlines()
    w = []
    Q = []
    for line in lines[1:]:
        cells = line.split(",")
        w.append(float(cells[1]))
        Q.append([float(v) for v in cells[2:]])
    return DemandProfile(np.array(w), np.array(Q)), _read_envelope(base.with_suffix(".json"))


def save_requests(requests: RequestMatrix, base) -> tuple[Path, Path]:
    """Write nonzero cells as ``user,file,count`` triplets plus a dims envelope."""
    base = Path(base)
    csv_path = base.with_suffix(".csv")
    ks, fs, ns = requests.nonzero()
    rows = ["user,file,count"]
    rows.extend(f"{k + 1},{f + 1},{n}" for k, f, n in zip(ks, fs, ns))
    csv_path.write_text("\n".join(rows) + "\n")
    json_path = base.with_suffix(".json")
    _write_envelope(json_path, {"K": requests.K, "F": requests.F,
                                "total": requests.total})
    return csv_path, json_path


def load_requests(base) -> RequestMatrix:
    base = Path(base)
    env = _read_envelope(base.with_suffix(".json"))
    lines = base.with_suffix(".csv").read_text().splitlines()
    ks, fs, ns = [], [], []
    for line in lines[1:]:
        k, f, n = line.split(",")
        ks.append(int(k) - 1)
        fs.append(int(f) - 1)
        ns.append(int(n))
    return RequestMatrix.from_pairs((env["K"], env["F"]), ks, fs, ns)
