"""Latent-topic demand learning from request counts.

Models each user's preference as a mixture over latent topics: the joint
request probability is ``P(u, f) = P(u) * sum_j P(f | z_j) * P(z_j | u)``.
Fitting maximizes the count log-likelihood by EM over the nonzero cells of
the request matrix; the dense K x F x Z posterior tensor is never
materialized.  A prior-knowledge variant keeps per-user topic preferences
fixed and learns only the per-topic file distributions, optionally
restricted to known per-topic file supports.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .demand import DemandProfile, DemandError, RequestMatrix, _readonly, ml_estimates

LOG_FLOOR = 1e-12
_ROW_TOL = 1e-10
_CHUNK = 1 << 18


class LearnerError(ValueError):
    """Invalid learner input or an observation the model cannot explain."""


@dataclass(frozen=True, eq=False)
class PlsaModel:
    """Fitted mixture: active levels, per-user topic weights, per-topic file laws."""

    Z: int
    active: np.ndarray
    topic_pref: np.ndarray
    file_given_topic: np.ndarray

    def __post_init__(self):
        active = np.asarray(self.active, dtype=np.float64)
        tp = np.asarray(self.topic_pref, dtype=np.float64)
        fgt = np.asarray(self.file_given_topic, dtype=np.float64)
        if tp.shape != (active.size, self.Z) or fgt.shape[0] != self.Z:
            raise LearnerError("inconsistent model dimensions")
        if abs(active.sum() - 1.0) > 1e-12 or active.min() < 0:
            raise LearnerError("active levels must be a distribution")
        for name, m in (("topic_pref", tp), ("file_given_topic", fgt)):
            if m.min() < 0 or np.abs(m.sum(axis=1) - 1.0).max() > _ROW_TOL:
                raise LearnerError(f"{name} rows must be distributions")
        object.__setattr__(self, "active", _readonly(active))
        object.__setattr__(self, "topic_pref", _readonly(tp))
        object.__setattr__(self, "file_given_topic", _readonly(fgt))

    @property
    def K(self) -> int:
        return self.active.size

    @property
    def F(self) -> int:
        return self.file_given_topic.shape[1]


@dataclass(frozen=True)
class TopicCatalog:
    """Named topics with their file memberships (column indices)."""

    labels: tuple
    members: tuple

    def __post_init__(self):
        if len(self.labels) != len(self.members):
            raise LearnerError("labels and members must align")
        object.__setattr__(self, "members",
                           tuple(tuple(sorted(set(map(int, m)))) for m in self.members))

    @property
    def Z(self) -> int:
        return len(self.labels)

    def mask(self, F: int) -> np.ndarray:
        """Boolean (Z, F) membership mask."""
        out = np.zeros((self.Z, F), dtype=bool)
        for j, files in enumerate(self.members):
            idx = np.asarray(files, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= F):
                raise LearnerError(f"topic {self.labels[j]!r} references files outside the catalog")
            out[j, idx] = True
        return out

    @classmethod
    def full_catalog(cls, labels, F: int) -> "TopicCatalog":
        """Catalog where every topic spans every file (no support restriction)."""
        allf = tuple(range(F))
        return cls(tuple(labels), tuple(allf for _ in labels))


@dataclass(frozen=True)
class EmConfig:
    Z: int
    seed: int = 0
    tol: float = 1e-4
    max_iter: int = 200

    def __post_init__(self):
        if self.Z < 1:
            raise LearnerError("need at least one topic")
        if self.tol < 0 or self.max_iter < 1:
            raise LearnerError("tolerance must be nonnegative and max_iter positive")


def estimate_active(requests: RequestMatrix) -> np.ndarray:
    """Per-user share of all observed requests."""
    if requests.total == 0:
        raise LearnerError("cannot estimate from an empty request history")
    return requests.user_totals / float(requests.total)


def _cells(requests: RequestMatrix):
    ks, fs, ns = requests.nonzero()
    return ks, fs, ns.astype(np.float64)


def _mix_loglik(active, tp, fgt, ks, fs, ns):
    """Count log-likelihood; ``active=None`` drops the per-user factor.

    Probabilities are floored at ``LOG_FLOOR`` inside the logarithm only, so
    transient underflow cannot produce infinities.
    """
    total = 0.0
    for lo in range(0, ks.size, _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        kc, fc, nc = ks[sl], fs[sl], ns[sl]
        cell = (tp[kc, :] * fgt[:, fc].T).sum(axis=1)
        if active is not None:
            cell = cell * active[kc]
        total += float(nc @ np.log(np.maximum(cell, LOG_FLOOR)))
    return total


def log_likelihood(model: PlsaModel, requests: RequestMatrix) -> float:
    """Log-likelihood of the observed counts under the model.

    Returns ``-inf`` (with a warning naming the first such cell) when the
    model assigns exactly zero probability to an observed request.
    """
    if requests.K != model.K or requests.F != model.F:
        raise LearnerError("request matrix does not match the model dimensions")
    ks, fs, ns = _cells(requests)
    for lo in range(0, ks.size, _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        kc, fc = ks[sl], fs[sl]
        cell = (model.topic_pref[kc, :] * model.file_given_topic[:, fc].T).sum(axis=1)
        cell = cell * model.active[kc]
        dead = np.flatnonzero(cell == 0.0)
        if dead.size:
            k, f = int(kc[dead[0]]), int(fc[dead[0]])
            warnings.warn(f"model gives zero probability to observed cell ({k}, {f})")
            return float("-inf")
    return _mix_loglik(model.active, model.topic_pref, model.file_given_topic, ks, fs, ns)


def _accumulate(tp, fgt, ks, fs, ns, K, F, Z):
    """One E-step pass: per-user and per-topic posterior-weighted count sums."""
    tp_num = np.zeros((K, Z))
    fgt_num = np.zeros((Z, F))
    for lo in range(0, ks.size, _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        kc, fc, nc = ks[sl], fs[sl], ns[sl]
        numer = tp[kc, :] * fgt[:, fc].T
        denom = numer.sum(axis=1)
        scale = nc / np.where(denom > 0.0, denom, 1.0)
        weighted = numer * scale[:, None]
        for j in range(Z):
            tp_num[:, j] += np.bincount(kc, weights=weighted[:, j], minlength=K)
            fgt_num[j, :] += np.bincount(fc, weights=weighted[:, j], minlength=F)
    return tp_num, fgt_num


def _init_rows(gen, shape, mask=None):
    rows = gen.uniform(0.0, 1.0, shape)
    if mask is not None:
        rows = rows * mask
    sums = rows.sum(axis=1, keepdims=True)
    if (sums == 0).any():
        raise LearnerError("cannot initialize a distribution over an empty support")
    return rows / sums


def _normalize_fgt(fgt_num, mask, resets):
    Z, F = fgt_num.shape
    out = np.empty_like(fgt_num)
    for j in range(Z):
        s = fgt_num[j].sum()
        if s > 0.0:
            out[j] = fgt_num[j] / s
        else:
            resets.append(j)
            if mask is None:
                out[j] = 1.0 / F
            else:
                out[j] = mask[j] / mask[j].sum()
    return out


def _check_support(requests, mask):
    covered = mask.any(axis=0)
    fs = np.flatnonzero(requests.file_totals > 0)
    missing = fs[~covered[fs]]
    if missing.size:
        raise LearnerError(
            f"requested files outside every topic support: {missing[:5].tolist()}")


def em_fit(requests: RequestMatrix, config: EmConfig,
           support: TopicCatalog | None = None,
           on_iteration=None) -> tuple[PlsaModel, list]:
    """Fit the mixture by EM; returns the model and its log-likelihood trace.

    Initialization draws normalized-uniform rows from the seeded generator,
    topic preferences first.  Iteration stops when the absolute likelihood
    improvement drops to ``config.tol`` or ``config.max_iter`` is reached.
    With ``support``, per-topic file laws are zero outside the given
    memberships (the M-step preserves this automatically); a topic whose
    update collapses to zero mass is reset to uniform over its support.
    """
    if requests.total == 0:
        raise LearnerError("cannot fit on an empty request history")
    K, F, Z = requests.K, requests.F, config.Z
    if Z > F:
        warnings.warn("more topics than files; some topics are redundant")
    mask = None
    if support is not None:
        if support.Z != Z:
            raise LearnerError("catalog topic count disagrees with config")
        empty = [support.labels[j] for j in range(Z) if not support.members[j]]
        if empty:
            raise LearnerError(f"topics without any files: {empty[:5]}")
        mask = support.mask(F)
        _check_support(requests, mask)

    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    tp = _init_rows(gen, (K, Z))
    fgt = _init_rows(gen, (Z, F), mask)
    active = estimate_active(requests)
    ks, fs, ns = _cells(requests)

    trace = []
    prev = 0.0
    for _ in range(config.max_iter):
        tp_num, fgt_num = _accumulate(tp, fgt, ks, fs, ns, K, F, Z)
        resets = []
        fgt = _normalize_fgt(fgt_num, mask, resets)
        if resets:
            warnings.warn(f"reset {len(resets)} empty topic(s) to uniform")
        # Row sums of tp_num equal the user totals up to roundoff (and up to
        # dropped mass if a posterior cell underflowed), so renormalize
        # explicitly; zero-activity users keep a uniform topic preference.
        rs = tp_num.sum(axis=1)
        tp = np.where(rs[:, None] > 0, tp_num / np.where(rs > 0, rs, 1.0)[:, None],
                      1.0 / Z)
        L = _mix_loglik(active, tp, fgt, ks, fs, ns)
        trace.append(L)
        if on_iteration is not None:
            on_iteration(PlsaModel(Z, active, tp, fgt))
        if abs(L - prev) <= config.tol:
            break
        prev = L
    return PlsaModel(Z, active, tp, fgt), trace


def predict_preferences(model: PlsaModel) -> DemandProfile:
    """Collapse the mixture into a demand profile: ``Q = topic_pref @ file_given_topic``."""
    Q = model.topic_pref @ model.file_given_topic
    Q /= Q.sum(axis=1, keepdims=True)
    return DemandProfile(model.active, Q)


def prior_fit(requests: RequestMatrix, topic_pref: np.ndarray,
              catalog: TopicCatalog, config: EmConfig,
              active: np.ndarray | None = None,
              on_iteration=None) -> tuple[DemandProfile, list]:
    """EM with known per-user topic preferences and per-topic file supports.

    Only the per-topic file distributions are learned; ``topic_pref`` stays
    fixed throughout.  The trace records the mixture term of the likelihood
    (the part the iteration can change).  Requests impossible under the
    given knowledge (the requester's topics all exclude the file) are
    rejected up front, since they would pin the likelihood at ``-inf``.
    ``active`` overrides the frequency estimate when long-run activity is
    already known.
    """
    if requests.total == 0:
        raise LearnerError("cannot fit on an empty request history")
    K, F, Z = requests.K, requests.F, config.Z
    tp = np.asarray(topic_pref, dtype=np.float64)
    if tp.shape != (K, Z) or catalog.Z != Z:
        raise LearnerError("topic_pref / catalog dimensions disagree with the data")
    if tp.min() < 0 or np.abs(tp.sum(axis=1) - 1.0).max() > 1e-9:
        raise LearnerError("topic_pref rows must be distributions")
    tp = tp / tp.sum(axis=1, keepdims=True)
    empty = [catalog.labels[j] for j in range(Z) if not catalog.members[j]]
    if empty:
        raise LearnerError(f"topics without any files: {empty[:5]}")
    mask = catalog.mask(F)
    _check_support(requests, mask)

    ks, fs, ns = _cells(requests)
    reachable = (tp[ks, :] * mask[:, fs].T).sum(axis=1)
    dead = np.flatnonzero(reachable == 0.0)
    if dead.size:
        k, f = int(ks[dead[0]]), int(fs[dead[0]])
        raise LearnerError(
            f"observed cell ({k}, {f}) is impossible under the prior knowledge; "
            "likelihood would be -inf")

    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    fgt = _init_rows(gen, (Z, F), mask)
    if active is None:
        active = estimate_active(requests)
    else:
        active = np.asarray(active, dtype=np.float64)
        if active.shape != (K,):
            raise LearnerError("active must have one entry per user")

    trace = []
    prev = 0.0
    for _ in range(config.max_iter):
        _, fgt_num = _accumulate(tp, fgt, ks, fs, ns, K, F, Z)
        resets = []
        fgt = _normalize_fgt(fgt_num, mask, resets)
        if resets:
            warnings.warn(f"reset {len(resets)} empty topic(s) to uniform over support")
        L = _mix_loglik(None, tp, fgt, ks, fs, ns)
        trace.append(L)
        if on_iteration is not None:
            on_iteration(PlsaModel(Z, active, tp, fgt))
        if abs(L - prev) <= config.tol:
            break
        prev = L
    model = PlsaModel(Z, active, tp, fgt)
    return predict_preferences(model), trace


def baseline_fit(requests: RequestMatrix) -> DemandProfile:
    """Plain frequency estimate of the demand profile (no latent structure)."""
    _, profile = ml_estimates(requests)
    return profile


# ---------------------------------------------------------------------------
# Serialization

def _write_matrix(path: Path, m: np.ndarray) -> None:
    path.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in m) + "\n")


def _read_matrix(path: Path) -> np.ndarray:
    return np.array([[float(v) for v in line.split(",")]
                     for line in path.read_text().splitlines()])


def save_plsa(model: PlsaModel, base, *, seed=None, iterations=None,
              final_likelihood=None) -> Path:
    """Write a JSON envelope plus CSV matrices next to ``base``."""
    base = Path(base)
    env = {"Z": model.Z, "K": model.K, "F": model.F, "seed": seed,
           "iterations": iterations, "final_likelihood": final_likelihood}
    base.with_suffix(".json").write_text(json.dumps(env, sort_keys=True, indent=2) + "\n")
    _write_matrix(base.parent / (base.name + "_active.csv"), model.active[None, :])
    _write_matrix(base.parent / (base.name + "_topic_pref.csv"), model.topic_pref)
    _write_matrix(base.parent / (base.name + "_file_given_topic.csv"),
                  model.file_given_topic)
    return base.with_suffix(".json")


def load_plsa(base) -> tuple[PlsaModel, dict]:
    base = Path(base)
    env = json.loads(base.with_suffix(".json").read_text())
    active = _read_matrix(base.parent / (base.name + "_active.csv"))[0]
    tp = _read_matrix(base.parent / (base.name + "_topic_pref.csv"))
    fgt = _read_matrix(base.parent / (base.name + "_file_given_topic.csv"))
    return PlsaModel(env["Z"], active, tp, fgt), env


def save_trace(trace, path) -> Path:
    path = Path(path)
    rows = ["iteration,log_likelihood"]
    rows.extend(f"{i + 1},{repr(float(v))}" for i, v in enumerate(trace))
    path.write_text("\n".join(rows) + "\n")
    return path
