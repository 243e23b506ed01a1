"""MovieLens-format ingestion and the dataset analyses behind the model.

Covers parsing of ``ratings.dat``/``movies.dat``, conversion of ratings to
binary request histories, a release-year split of the catalog, the
users-vs-distinct-files curve with parametric fits, and the temporal
stability of learned topic preferences across the two halves.
"""

from __future__ import annotations

import hashlib
import json
import re
import urllib.request
import warnings
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .demand import RequestMatrix
from .learner import EmConfig, TopicCatalog, em_fit, estimate_active

#: The documented MovieLens-1M genre vocabulary, in its canonical order.
GENRES = (
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical",
    "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)

MOVIELENS_1M_URL = "https://files.grouplens.org/datasets/movielens/ml-1m.zip"
#: Published md5 of ml-1m.zip; pass ``checksum=None`` to skip verification.
MOVIELENS_1M_MD5 = "c4d9eecfca2ab87c1945afe126590906"

_YEAR_RE = re.compile(r"\((\d{4})\)\s*$")


class ParseError(ValueError):
    """Raised when an input file is unreadable or mostly malformed."""


@dataclass(frozen=True)
class RatingRecord:
    user_id: int
    movie_id: int
    rating: int
    timestamp: int


@dataclass(frozen=True)
class MovieRecord:
    movie_id: int
    title: str
    year: int | None
    genres: tuple


@dataclass(frozen=True)
class FitResult:
    family: str
    params: dict
    r_squared: float
    degenerate: bool = False


def _iter_lines(source):
    """Yield decoded lines from a path, bytes, or binary file-like source."""
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            data = fh.read()
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif hasattr(source, "read"):
        data = source.read()
        if isinstance(data, str):
            data = data.encode("latin-1")
    else:
        raise ParseError(f"unreadable source {type(source).__name__}")
    text = data.decode("latin-1")
    for line in text.splitlines():
        yield line


def _finish(records, rejects, total):
    if total and len(rejects) / total > 0.01:
        raise ParseError(
            f"{len(rejects)} of {total} lines malformed; input looks corrupt")
    return records, rejects


def parse_ratings(source) -> tuple[list, list]:
    """Parse ``UserID::MovieID::Rating::Timestamp`` lines.

    Returns ``(records, rejects)`` where rejects are ``(line_no, line,
    reason)`` triples.  More than 1% malformed lines is treated as a corrupt
    input and raises.
    """
    records, rejects = [], []
    total = 0
    for no, line in enumerate(_iter_lines(source), start=1):
        if not line.strip():
            continue
        total += 1
        parts = line.split("::")
        if len(parts) != 4:
            rejects.append((no, line, "expected 4 fields"))
            continue
        try:
            uid, mid, rating, ts = (int(p) for p in parts)
        except ValueError:
            rejects.append((no, line, "non-integer field"))
            continue
        if uid < 1 or mid < 1:
            rejects.append((no, line, "ids must be positive"))
            continue
        if not 1 <= rating <= 5:
            rejects.append((no, line, "rating outside 1..5"))
            continue
        if ts < 0:
            rejects.append((no, line, "negative timestamp"))
            continue
        records.append(RatingRecord(uid, mid, rating, ts))
    return _finish(records, rejects, total)


def parse_movies(source) -> tuple[list, list]:
    """Parse ``MovieID::Title (Year)::Genre|Genre`` lines.

    A movie without a trailing ``(YYYY)`` in its title is kept with
    ``year=None``.  Lines with genres outside the documented vocabulary are
    rejected.
    """
    records, rejects = [], []
    total = 0
    genre_set = set(GENRES)
    for no, line in enumerate(_iter_lines(source), start=1):
        if not line.strip():
            continue
        total += 1
        parts = line.split("::")
        if len(parts) != 3:
            rejects.append((no, line, "expected 3 fields"))
            continue
        try:
            mid = int(parts[0])
        except ValueError:
            rejects.append((no, line, "non-integer movie id"))
            continue
        title = parts[1]
        genres = tuple(g for g in parts[2].split("|") if g)
        if not genres:
            rejects.append((no, line, "no genres"))
            continue
        unknown = [g for g in genres if g not in genre_set]
        if unknown:
            rejects.append((no, line, f"unknown genre {unknown[0]!r}"))
            continue
        m = _YEAR_RE.search(title)
        year = int(m.group(1)) if m else None
        records.append(MovieRecord(mid, title, year, genres))
    return _finish(records, rejects, total)


def format_rating(r: RatingRecord) -> str:
    return f"{r.user_id}::{r.movie_id}::{r.rating}::{r.timestamp}"


def format_movie(m: MovieRecord) -> str:
    return f"{m.movie_id}::{m.title}::{'|'.join(m.genres)}"


def to_request_matrix(ratings, user_ids=None, movie_ids=None) -> tuple[RequestMatrix, int]:
    """Binary request history: each (user, movie) rating counts once.

    Returns the matrix and the number of duplicate (user, movie) pairs that
    were collapsed.  Universes default to the ids observed in the ratings;
    ratings outside a supplied universe are ignored.
    """
    if user_ids is None:
        user_ids = sorted({r.user_id for r in ratings})
    if movie_ids is None:
        movie_ids = sorted({r.movie_id for r in ratings})
    uidx = {u: i for i, u in enumerate(user_ids)}
    midx = {m: i for i, m in enumerate(movie_ids)}
    pairs = [(uidx[r.user_id], midx[r.movie_id]) for r in ratings
             if r.user_id in uidx and r.movie_id in midx]
    K, F = len(user_ids), len(movie_ids)
    if not pairs:
        return RequestMatrix.from_pairs((K, F), [], [],
                                        user_ids=user_ids, file_ids=movie_ids), 0
    flat = np.array([k * F + f for k, f in pairs], dtype=np.int64)
    unique = np.unique(flat)
    duplicates = flat.size - unique.size
    ks, fs = np.divmod(unique, F)
    matrix = RequestMatrix.from_pairs((K, F), ks, fs,
                                      user_ids=user_ids, file_ids=movie_ids)
    return matrix, duplicates


def release_order(movies) -> list:
    """Movies sorted by release year ascending, missing years last, ties by id."""
    return sorted(movies, key=lambda m: (m.year is None, m.year or 0, m.movie_id))


def split_by_release(movies, ratings, user_ids=None) -> tuple[RequestMatrix, RequestMatrix]:
    """Split the catalog into an older and a newer half by release year.

    Both request matrices share the user universe; each keeps its own film
    columns (in release order) with external ids attached.  The first half
    takes the extra film when the total is odd.
    """
    ordered = release_order(movies)
    if not ordered:
        raise ParseError("cannot split an empty movie list")
    cut = (len(ordered) + 1) // 2
    ids1 = [m.movie_id for m in ordered[:cut]]
    ids2 = [m.movie_id for m in ordered[cut:]]
    if user_ids is None:
        user_ids = sorted({r.user_id for r in ratings})
    n1, _ = to_request_matrix(ratings, user_ids, ids1)
    n2, _ = to_request_matrix(ratings, user_ids, ids2)
    return n1, n2


def catalog_size_curve(requests: RequestMatrix, user_counts, trials: int = 50,
                       seed: int = 0) -> np.ndarray:
    """Mean number of distinct requested files over random user subsets.

    Sampling is nested: each trial fixes one permutation of the users and
    every requested subset size takes a prefix of it, so the per-trial curve
    (and hence the mean) is non-decreasing in the subset size.
    """
    counts = np.asarray(user_counts, dtype=np.int64)
    if counts.size == 0 or counts.min() < 1 or counts.max() > requests.K:
        raise ParseError("user counts must lie in [1, K]")
    if np.any(np.diff(counts) <= 0):
        raise ParseError("user counts must be strictly increasing")
    ks, fs, _ = requests.nonzero()
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    sums = np.zeros(counts.size)
    for _ in range(trials):
        perm = gen.permutation(requests.K)
        rank = np.empty(requests.K, dtype=np.int64)
        rank[perm] = np.arange(requests.K)
        first_seen = np.full(requests.F, requests.K, dtype=np.int64)
        np.minimum.at(first_seen, fs, rank[ks])
        first_seen.sort()
        sums += np.searchsorted(first_seen, counts, side="left")
    return sums / trials


# ---------------------------------------------------------------------------
# Parametric curve fitting

def _model(family):
    if family == "zipf":
        return (lambda x, p: p[0] * x ** (-p[1]),
                lambda x, p: np.stack([x ** (-p[1]),
                                       -p[0] * np.log(x) * x ** (-p[1])], axis=1))
    if family == "exponential":
        return (lambda x, p: p[0] * np.exp(-p[1] * x),
                lambda x, p: np.stack([np.exp(-p[1] * x),
                                       -p[0] * x * np.exp(-p[1] * x)], axis=1))
    if family == "weibull":
        def f(x, p):
            a, b = p
            return a * b * x ** (b - 1.0) * np.exp(-a * x ** b)

        def J(x, p):
            a, b = p
            xb = x ** b
            core = np.exp(-a * xb) * x ** (b - 1.0)
            da = b * core * (1.0 - a * xb)
            db = a * core * (1.0 + b * np.log(x) * (1.0 - a * xb))
            return np.stack([da, db], axis=1)
        return f, J
    if family == "power":
        return (lambda x, p: p[0] * x ** p[1] + p[2],
                lambda x, p: np.stack([x ** p[1],
                                       p[0] * np.log(x) * x ** p[1],
                                       np.ones_like(x)], axis=1))
    if family == "log":
        return (lambda x, p: p[0] * np.log(p[1] * x),
                lambda x, p: np.stack([np.log(p[1] * x),
                                       np.full_like(x, 1.0) * p[0] / p[1]], axis=1))
    raise ParseError(f"unknown fit family {family!r}")


_PARAM_NAMES = {"zipf": ("a", "beta"), "exponential": ("a", "b"),
                "weibull": ("a", "b"), "power": ("a", "b", "c"),
                "log": ("a", "b")}


def _loglinear_seed(x, y, family):
    ok = (y > 0) & (x > 0)
    if ok.sum() < 2:
        return (1.0, 1.0)
    if family == "zipf":
        slope, inter = np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)
        return (float(np.exp(inter)), float(-slope))
    slope, inter = np.polyfit(x[ok], np.log(y[ok]), 1)
    return (float(np.exp(inter)), float(-slope))


def _start_grid(x, y, family):
    """Deterministic grid of 27 starting points for the local search."""
    xm = float(np.mean(x))
    ym = float(np.mean(np.abs(y))) or 1.0
    if family in ("zipf", "exponential"):
        a0, b0 = _loglinear_seed(x, y, family)
        bases = [(a0, b0), (ym, 1.0), (ym, 0.1)]
    elif family == "log":
        lx = np.log(x[x > 0]) if (x > 0).any() else np.array([1.0])
        a0 = float(np.polyfit(lx, y[x > 0], 1)[0]) if lx.size >= 2 else 1.0
        a0 = a0 or 1.0
        bases = [(a0, 1.0), (a0, 1.0 / max(xm, 1e-6)), (ym, 1.0)]
    elif family == "weibull":
        bases = [(1.0 / max(xm, 1e-6), 1.0), (1.0 / max(xm, 1e-6), 1.5),
                 (1.0 / max(float(np.max(x)), 1e-6), 0.8)]
    elif family == "power":
        cands = []
        ymin = float(np.min(y))
        for c0 in (0.0, 0.5 * ymin, 0.9 * ymin):
            shifted = y - c0
            ok = (shifted > 0) & (x > 0)
            if ok.sum() >= 2:
                slope, inter = np.polyfit(np.log(x[ok]), np.log(shifted[ok]), 1)
                cands.append((float(np.exp(inter)), float(slope), c0))
            else:
                cands.append((ym, 0.5, c0))
        bases = cands
    else:
        raise ParseError(f"unknown fit family {family!r}")

    scales = (0.5, 1.0, 2.0)
    starts = []
    for base in bases:
        if len(base) == 2:
            for s1 in scales:
                for s2 in scales:
                    starts.append((base[0] * s1, base[1] * s2))
        else:
            for s1 in scales:
                for s2 in scales:
                    starts.append((base[0] * s1, base[1] * s2, base[2]))
    return starts[:27]


def _refine(fun, jac, x, y, p0, iters=80):
    """Damped Gauss-Newton descent on the residual sum of squares."""
    p = np.array(p0, dtype=np.float64)
    with np.errstate(all="ignore"):
        r = y - fun(x, p)
        if not np.all(np.isfinite(r)):
            return p, np.inf
        best = float(r @ r)
        if not np.isfinite(best):
            return p, np.inf
        lam = 1e-3
        for _ in range(iters):
            J = jac(x, p)
            if not np.all(np.isfinite(J)):
                break
            g = J.T @ r
            H = J.T @ J
            H = H + lam * np.diag(np.diag(H) + 1e-12)
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                break
            r_new = y - fun(x, p + step)
            ss_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if ss_new < best:
                p = p + step
                r = r_new
                best = ss_new
                lam = max(lam * 0.3, 1e-12)
            else:
                lam *= 10.0
                if lam > 1e12:
                    break
    return p, best


def fit_curve(x, y, family: str) -> FitResult:
    """Least-squares fit of one named family; deterministic multistart.

    Families with a log-linearization are seeded by linear regression and
    refined; the rest run a damped Gauss-Newton from a fixed grid of starts.
    Constant targets leave R^2 undefined and set the ``degenerate`` flag.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape or x.size < 2:
        raise ParseError("need matching x/y vectors with at least two points")
    fun, jac = _model(family)
    best_p, best_ss = None, np.inf
    for p0 in _start_grid(x, y, family):
        p, ss = _refine(fun, jac, x, y, p0)
        if ss < best_ss:
            best_p, best_ss = p, ss
    ss_tot = float(((y - y.mean()) ** 2).sum())
    names = _PARAM_NAMES[family]
    params = {n: float(v) for n, v in zip(names, best_p)}
    if ss_tot == 0.0:
        return FitResult(family, params, float("nan"), degenerate=True)
    return FitResult(family, params, 1.0 - best_ss / ss_tot)


# ---------------------------------------------------------------------------
# Temporal stability of topic preferences

@dataclass(frozen=True, eq=False)
class TemporalSimilarity:
    """Per-user cosine similarity of topic preferences across two periods.

    ``topic_labels`` names the aligned topics when the fits were anchored to
    a catalog; it is None for free-topic fits.
    """

    similarities: np.ndarray
    included_users: np.ndarray
    excluded_users: int
    active_similarity: float
    topic_labels: tuple | None = None

    def fraction_above(self, threshold: float) -> float:
        return float((self.similarities > threshold).mean())

    def cdf(self) -> tuple[np.ndarray, np.ndarray]:
        values = np.sort(self.similarities)
        fractions = np.arange(1, values.size + 1) / values.size
        return values, fractions


def temporal_topic_similarity(n1: RequestMatrix, n2: RequestMatrix, Z: int,
                              config: EmConfig | None = None,
                              catalogs=None) -> TemporalSimilarity:
    """Fit topic models on two halves and compare per-user topic weights.

    Both fits use the same seed and topic count.  ``catalogs`` optionally
    anchors the topics of each half to known file supports so that topic j
    means the same thing in both fits; topics with no files in one of the
    halves are dropped from both (a distribution over an empty support is
    ill-posed) and the retained labels are reported.  Users with no requests
    in either half are excluded from the comparison and counted.
    """
    if n1.K != n2.K:
        raise ParseError("halves must share the user universe")
    if config is None:
        config = EmConfig(Z)
    labels = None
    sup1, sup2 = catalogs if catalogs is not None else (None, None)
    if sup1 is not None:
        if sup1.labels != sup2.labels:
            raise ParseError("catalogs must list the same topics in the same order")
        if sup1.Z != Z:
            raise ParseError("catalog topic count disagrees with Z")
        keep = [j for j in range(Z) if sup1.members[j] and sup2.members[j]]
        if not keep:
            raise ParseError("no topic has files in both halves")
        labels = tuple(sup1.labels[j] for j in keep)
        sup1 = TopicCatalog(labels, tuple(sup1.members[j] for j in keep))
        sup2 = TopicCatalog(labels, tuple(sup2.members[j] for j in keep))
        Z = len(keep)
    if config.Z != Z:
        config = EmConfig(Z, seed=config.seed, tol=config.tol, max_iter=config.max_iter)
    model1, _ = em_fit(n1, config, support=sup1)
    model2, _ = em_fit(n2, config, support=sup2)
    both = (n1.user_totals > 0) & (n2.user_totals > 0)
    excluded = int((~both).sum())
    t1 = model1.topic_pref[both]
    t2 = model2.topic_pref[both]
    dots = (t1 * t2).sum(axis=1)
    norms = np.linalg.norm(t1, axis=1) * np.linalg.norm(t2, axis=1)
    sims = dots / norms
    active_sim = float(estimate_active(n1) @ estimate_active(n2)
                       / (np.linalg.norm(estimate_active(n1))
                          * np.linalg.norm(estimate_active(n2))))
    return TemporalSimilarity(sims, np.flatnonzero(both), excluded, active_sim,
                              labels)


def genre_catalog(movies, movie_ids) -> TopicCatalog:
    """Topic catalog over the given film columns, one topic per genre."""
    col = {m: i for i, m in enumerate(movie_ids)}
    members = {g: [] for g in GENRES}
    for m in movies:
        if m.movie_id in col:
            for g in m.genres:
                members[g].append(col[m.movie_id])
    return TopicCatalog(GENRES, tuple(members[g] for g in GENRES))


# ---------------------------------------------------------------------------
# Acquisition

def fetch_movielens(dest_dir, url: str = MOVIELENS_1M_URL,
                    checksum: str | None = MOVIELENS_1M_MD5) -> Path:
    """Download and extract the MovieLens-1M archive; returns the data dir.

    The archive md5 is verified unless ``checksum`` is None.  Already
    extracted data is reused.
    """
    dest = Path(dest_dir)
    data_dir = dest / "ml-1m"
    if (data_dir / "ratings.dat").exists():
        return data_dir
    dest.mkdir(parents=True, exist_ok=True)
    archive = dest / "ml-1m.zip"
    if not archive.exists():
        with urllib.request.urlopen(url) as resp, open(archive, "wb") as out:
            while True:
                block = resp.read(1 << 20)
                if not block:
                    break
                out.write(block)
    if checksum is not None:
        digest = hashlib.md5(archive.read_bytes()).hexdigest()
        if digest != checksum:
            raise ParseError(f"checksum mismatch: {digest} != {checksum}")
    with zipfile.ZipFile(archive) as z:
        z.extractall(dest)
    if not (data_dir / "ratings.dat").exists():
        raise ParseError("archive did not contain ml-1m/ratings.dat")
    return data_dir


def excerpt_dir() -> Path:
    """Directory of the bundled 50-user x 200-movie offline excerpt."""
    return Path(__file__).resolve().parent / "_data" / "ml1m_excerpt"


def load_excerpt() -> tuple[list, list]:
    """Parsed (ratings, movies) of the bundled offline excerpt."""
    d = excerpt_dir()
    ratings, bad_r = parse_ratings(d / "ratings.dat")
    movies, bad_m = parse_movies(d / "movies.dat")
    if bad_r or bad_m:
        warnings.warn("bundled excerpt contains malformed lines")
    return ratings, movies


def locate_movielens() -> Path | None:
    """Best-effort location of a full ml-1m directory, or None."""
    import os

    cand = os.environ.get("MOVIELENS_1M_DIR")
    paths = [Path(cand)] if cand else []
    paths += [Path("data/ml-1m"), Path.home() / ".cache" / "ml-1m"]
    for p in paths:
        if p and (p / "ratings.dat").exists():
            return p
    return None


def save_curve(user_counts, means, path) -> Path:
    path = Path(path)
    rows = ["users,mean_distinct_files"]
    rows.extend(f"{int(u)},{repr(float(m))}" for u, m in zip(user_counts, means))
    path.write_text("\n".join(rows) + "\n")
    return path


def save_fits(fits, path) -> Path:
    path = Path(path)
    payload = [{"family": f.family, "params": f.params, "r_squared": f.r_squared,
                "degenerate": f.degenerate} for f in fits]
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path
