"""End-to-end evaluation scenarios: demand, contacts, learning, placement.

A scenario pins every knob of one experiment: the demand source (synthetic
or a MovieLens-format dataset), the contact process, the learning schemes to
compare, and the request checkpoints at which placements are recomputed.
Per-user schemes (S1-*) optimize against a per-user profile; aggregate
schemes (S2-*) optimize against catalog popularity alone.  Every reported
point is the offloading probability of the scheme's placement under the true
demand profile.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .demand import (DemandProfile, PopularityVector, RequestMatrix,
                     aggregate_popularity, ml_estimates, synthesize_demand)
from .dataset import (genre_catalog, load_excerpt, parse_movies, parse_ratings,
                      release_order, to_request_matrix, GENRES)
from .learner import (EmConfig, TopicCatalog, baseline_fit, em_fit,
                      predict_preferences, prior_fit)
from .mobility import MobilityConfig, random_walk_contacts, static_contacts
from .optimizer import alternating_optimize, offloading_probability, popularity_policy


SCHEME_TAGS = ("S1-perfect", "S2-perfect", "S1-EM", "S2-EM",
               "S1-prior", "S2-prior", "S1-baseline", "S2-baseline")


class ScenarioError(ValueError):
    """Invalid scenario definition."""


@dataclass(frozen=True)
class Scenario:
    """One experiment definition; field names carry their units."""

    users: int = 100
    files: int = 3000
    cache_size: int = 5
    alpha: float = 0.36
    beta: float = 0.6
    r_c_m: float = 30.0
    area_side_m: float = 500.0
    v_max_mps: float = 0.0
    period_s: float = 7200.0
    leg_duration_s: float = 100.0
    time_step_s: float = 1.0
    topics: int = 20
    seed: int = 0
    schemes: tuple = ("S1-perfect", "S2-perfect")
    checkpoints: tuple = (1000, 2000, 4000)
    source: str = "synthetic"
    em_tol: float = 1e-4
    em_max_iter: int = 200
    prior_requests: int = 50000
    prior_topic_source: str = "reference"

    def __post_init__(self):
        if self.users < 1 or self.files < 1 or self.cache_size < 1:
            raise ScenarioError("users, files and cache_size must be positive")
        if self.cache_size > self.files:
            raise ScenarioError("cache_size cannot exceed the catalog size")
        if not self.schemes:
            raise ScenarioError("need at least one scheme")
        if not self.checkpoints or any(c < 1 for c in self.checkpoints):
            raise ScenarioError("checkpoints must be positive request counts")
        if any(b <= a for a, b in zip(self.checkpoints, self.checkpoints[1:])):
            raise ScenarioError("checkpoints must be strictly increasing")
        bad = [s for s in self.schemes if s not in SCHEME_TAGS]
        if bad:
            raise ScenarioError(f"unknown scheme tags {bad}")
        if self.prior_topic_source not in ("reference", "history_first_half"):
            raise ScenarioError("prior_topic_source must be reference or history_first_half")
        if not (self.source == "synthetic" or self.source == "excerpt"
                or self.source.startswith("movielens:")):
            raise ScenarioError(f"unknown source {self.source!r}")


@dataclass(frozen=True)
class SchemeResult:
    scheme: str
    checkpoints: tuple
    offloading: tuple
    seconds: dict


_INT_FIELDS = {"users", "files", "cache_size", "topics", "seed",
               "em_max_iter", "prior_requests"}
_FLOAT_FIELDS = {"alpha", "beta", "r_c_m", "area_side_m", "v_max_mps",
                 "period_s", "leg_duration_s", "time_step_s", "em_tol"}
_LIST_FIELDS = {"schemes", "checkpoints"}


def _convert_field(key: str, value: str):
    known = {f.name for f in dataclasses.fields(Scenario)}
    if key not in known:
        raise ScenarioError(f"unknown key {key!r}")
    if key in _INT_FIELDS:
        return int(value)
    if key in _FLOAT_FIELDS:
        return float(value)
    if key == "schemes":
        return tuple(s.strip() for s in value.split(",") if s.strip())
    if key == "checkpoints":
        return tuple(int(s) for s in value.split(",") if s.strip())
    return value


def override_scenario(scenario: Scenario, assignments) -> Scenario:
    """Apply ``key=value`` strings on top of an existing scenario."""
    fields = {}
    for item in assignments:
        if "=" not in item:
            raise ScenarioError(f"override {item!r}: expected key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        fields[key] = _convert_field(key, value)
    return dataclasses.replace(scenario, **fields)


def parse_scenario(path) -> Scenario:
    """Read a flat ``key = value`` scenario file; '#' starts a comment."""
    fields = {}
    for no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"line {no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            fields[key] = _convert_field(key, value)
        except ScenarioError as exc:
            raise ScenarioError(f"line {no}: {exc}") from None
    return Scenario(**fields)


def write_scenario(scenario: Scenario, path) -> Path:
    path = Path(path)
    lines = []
    for f in dataclasses.fields(Scenario):
        v = getattr(scenario, f.name)
        if f.name in _LIST_FIELDS:
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _subseeds(seed: int) -> dict:
    # One named integer seed per stochastic stage, all derived from the
    # scenario seed; the fixed order keeps runs reproducible.
    state = np.random.SeedSequence(seed).generate_state(8)
    names = ("demand", "contacts", "stream", "placement", "em",
             "ref_stream", "ref_em", "select")
    return {n: int(s) for n, s in zip(names, state)}


def _build_contacts(sc: Scenario, seed: int):
    if sc.v_max_mps > 0:
        config = MobilityConfig(sc.area_side_m, sc.v_max_mps, sc.period_s,
                                sc.leg_duration_s, sc.time_step_s, seed)
        return random_walk_contacts(config, sc.users, sc.r_c_m)
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    positions = gen.uniform(0.0, sc.area_side_m, (sc.users, 2))
    return static_contacts(positions, sc.r_c_m)


class _Truth:
    """Ground-truth demand plus the request stream drawn from it."""

    def __init__(self, sc: Scenario, seeds: dict):
        self.scenario = sc
        if sc.source == "synthetic":
            self.profile, self.features = synthesize_demand(
                sc.files, sc.users, sc.alpha, sc.beta, seeds["demand"])
            self.popularity = aggregate_popularity(self.profile)
            joint = (self.profile.w[:, None] * self.profile.Q).ravel()
            joint = joint / joint.sum()
            gen = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(seeds["stream"])))
            self.stream = gen.choice(sc.users * sc.files,
                                     size=sc.checkpoints[-1], p=joint)
            self.movies = None
            self.file_ids = None
        else:
            ratings, movies = _load_source(sc.source)
            gen = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(seeds["select"])))
            full, _ = to_request_matrix(ratings)
            users = list(full.user_ids)
            if len(users) > sc.users:
                users = [users[i] for i in
                         sorted(gen.choice(len(users), sc.users, replace=False))]
            by_count = np.argsort(-full.file_totals, kind="stable")
            file_ids = [full.file_ids[i] for i in by_count[:sc.files]]
            sub, _ = to_request_matrix(ratings, users, file_ids)
            if sub.total < sc.checkpoints[-1]:
                raise ScenarioError(
                    f"dataset slice has {sub.total} requests, "
                    f"fewer than the last checkpoint {sc.checkpoints[-1]}")
            _, self.profile = ml_estimates(sub)
            self.popularity = PopularityVector(sub.file_totals / sub.total)
            ks, fs, _ = sub.nonzero()
            cells = ks * sub.F + fs
            stream_gen = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(seeds["stream"])))
            self.stream = cells[stream_gen.permutation(cells.size)]
            self.movies = [m for m in movies if m.movie_id in set(file_ids)]
            self.file_ids = file_ids
        self.K = self.profile.K
        self.F = self.profile.F

    def history(self, n: int) -> RequestMatrix:
        counts = np.bincount(self.stream[:n], minlength=self.K * self.F)
        return RequestMatrix.from_dense(counts.reshape(self.K, self.F))


def _load_source(source: str):
    if source == "excerpt":
        return load_excerpt()
    path = Path(source.split(":", 1)[1])
    ratings, _ = parse_ratings(path / "ratings.dat")
    movies, _ = parse_movies(path / "movies.dat")
    return ratings, movies


class _PriorKnowledge:
    """Topic preferences and activity carried over from a longer observation."""

    def __init__(self, sc: Scenario, truth: _Truth, seeds: dict):
        if sc.source == "synthetic" and sc.prior_topic_source == "reference":
            joint = (truth.profile.w[:, None] * truth.profile.Q).ravel()
            joint = joint / joint.sum()
            gen = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(seeds["ref_stream"])))
            cells = gen.choice(truth.K * truth.F, size=sc.prior_requests, p=joint)
            counts = np.bincount(cells, minlength=truth.K * truth.F)
            ref = RequestMatrix.from_dense(counts.reshape(truth.K, truth.F))
            config = EmConfig(sc.topics, seeds["ref_em"], sc.em_tol, sc.em_max_iter)
            model, _ = em_fit(ref, config)
            self.topic_pref = model.topic_pref
            self.active = model.active
            self.catalog = TopicCatalog.full_catalog(
                tuple(f"z{j + 1}" for j in range(sc.topics)), truth.F)
            self.Z = sc.topics
        else:
            if truth.movies is None:
                raise ScenarioError(
                    "history_first_half prior knowledge needs a dataset source")
            ordered = release_order(truth.movies)
            cut = (len(ordered) + 1) // 2
            older = [m.movie_id for m in ordered[:cut]]
            col = {mid: i for i, mid in enumerate(truth.file_ids)}
            older_cols = np.array(sorted(col[m] for m in older), dtype=np.int64)
            older_ids = [truth.file_ids[i] for i in older_cols]
            counts = truth.history(len(truth.stream)).to_dense()[:, older_cols]
            half = RequestMatrix.from_dense(counts, file_ids=older_ids)
            # genres with no film in the older half cannot be learned there
            cat_half = genre_catalog(truth.movies, older_ids)
            cat_all = genre_catalog(truth.movies, truth.file_ids)
            keep = [j for j in range(len(GENRES)) if cat_half.members[j]]
            labels = tuple(GENRES[j] for j in keep)
            cat_half = TopicCatalog(labels,
                                    tuple(cat_half.members[j] for j in keep))
            members = [set(cat_all.members[j]) for j in keep]
            # a file outside every kept genre gets an uninformative
            # membership in all topics, otherwise its requests would be
            # impossible under the carried-over knowledge
            covered = set().union(*members) if members else set()
            uncovered = set(range(truth.F)) - covered
            self.catalog = TopicCatalog(
                labels, tuple(tuple(m | uncovered) for m in members))
            config = EmConfig(len(keep), seeds["ref_em"], sc.em_tol, sc.em_max_iter)
            model, _ = em_fit(half, config, support=cat_half)
            # smooth away the hard zeros EM can learn, so no future request
            # is impossible merely because a topic went unused in the past
            eps = 1e-3
            self.topic_pref = (1.0 - eps) * model.topic_pref + eps / len(keep)
            self.active = model.active
            self.Z = len(keep)


def run_scenario(sc: Scenario) -> list:
    """Evaluate every scheme of the scenario at every checkpoint.

    Learning schemes re-fit from scratch on the accumulated history at each
    checkpoint; the request stream is drawn once up front, so histories are
    prefix-consistent regardless of the checkpoint schedule.  Placements come
    from the alternating optimizer with a shared seeded initialization.
    Every emitted probability is re-validated with a fresh evaluation of the
    stored placement under the true profile.
    """
    seeds = _subseeds(sc.seed)
    truth = _Truth(sc, seeds)
    contacts = _build_contacts(sc, seeds["contacts"])
    prior = None
    if any(s in ("S1-prior", "S2-prior") for s in sc.schemes):
        prior = _PriorKnowledge(sc, truth, seeds)

    results = []
    for scheme in sc.schemes:
        fit_s = opt_s = eval_s = 0.0
        points = []
        constant = scheme in ("S1-perfect", "S2-perfect")
        checkpoints = sc.checkpoints[:1] if constant else sc.checkpoints
        for n in checkpoints:
            t0 = time.perf_counter()
            profile, popularity = _fit_scheme(scheme, sc, truth, prior, n, seeds)
            t1 = time.perf_counter()
            if scheme.startswith("S1"):
                placement, _ = alternating_optimize(
                    profile, contacts, sc.cache_size, seed=seeds["placement"])
            else:
                placement, _ = popularity_policy(
                    popularity, contacts, sc.cache_size,
                    algorithm="alternating", seed=seeds["placement"])
            t2 = time.perf_counter()
            value = offloading_probability(truth.profile, contacts, placement)
            check = offloading_probability(truth.profile, contacts, placement)
            if check != value:
                raise ScenarioError("placement re-evaluation mismatch")
            t3 = time.perf_counter()
            fit_s += t1 - t0
            opt_s += t2 - t1
            eval_s += t3 - t2
            points.append(value)
        if constant:
            points = points * len(sc.checkpoints)
        results.append(SchemeResult(scheme, tuple(sc.checkpoints), tuple(points),
                                    {"fit": fit_s, "optimize": opt_s,
                                     "evaluate": eval_s}))
    return results


def _fit_scheme(scheme, sc, truth, prior, n, seeds):
    """Profile and popularity the scheme would act on after ``n`` requests."""
    if scheme in ("S1-perfect", "S2-perfect"):
        return truth.profile, truth.popularity
    history = truth.history(n)
    if scheme in ("S1-EM", "S2-EM"):
        config = EmConfig(sc.topics, seeds["em"], sc.em_tol, sc.em_max_iter)
        model, _ = em_fit(history, config)
        profile = predict_preferences(model)
        return profile, aggregate_popularity(profile)
    if scheme in ("S1-prior", "S2-prior"):
        config = EmConfig(prior.Z, seeds["em"], sc.em_tol, sc.em_max_iter)
        profile, _ = prior_fit(history, prior.topic_pref, prior.catalog, config,
                               active=prior.active)
        return profile, aggregate_popularity(profile)
    if scheme in ("S1-baseline", "S2-baseline"):
        profile = baseline_fit(history)
        popularity = PopularityVector(history.file_totals / history.total)
        return profile, popularity
    raise ScenarioError(f"unknown scheme {scheme!r}")


_SWEEP_FIELDS = {"alpha": "alpha", "beta": "beta", "M": "cache_size",
                 "r_c": "r_c_m", "v_max": "v_max_mps"}


def sweep(sc: Scenario, parameter: str, values) -> list:
    """Perfect-knowledge S1/S2 offloading as one scenario knob varies.

    Returns ``(value, s1, s2)`` rows; all other knobs (and seeds) are held
    fixed.
    """
    if parameter not in _SWEEP_FIELDS:
        raise ScenarioError(
            f"sweep parameter must be one of {sorted(_SWEEP_FIELDS)}")
    field = _SWEEP_FIELDS[parameter]
    rows = []
    for v in values:
        v = int(v) if field == "cache_size" else float(v)
        modified = dataclasses.replace(
            sc, **{field: v}, schemes=("S1-perfect", "S2-perfect"),
            checkpoints=(1,))
        res = {r.scheme: r.offloading[0] for r in run_scenario(modified)}
        rows.append((v, res["S1-perfect"], res["S2-perfect"]))
    return rows


def emit_results(results, dest, scenario: Scenario | None = None) -> list:
    """Write per-scheme CSVs, a manifest, and a timing sidecar.

    Everything except ``timings.json`` is a deterministic function of the
    scenario and its seed; wall times are segregated there so that repeated
    runs produce byte-identical data outputs.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for r in results:
        path = dest / f"{r.scheme}.csv"
        rows = ["checkpoint,offloading"]
        rows.extend(f"{c},{repr(float(p))}" for c, p in zip(r.checkpoints, r.offloading))
        path.write_text("\n".join(rows) + "\n")
        written.append(path)
    manifest = {
        "package_version": __version__,
        "scenario": None if scenario is None else dataclasses.asdict(scenario),
        "schemes": [r.scheme for r in results],
        "outputs": sorted(p.name for p in written),
    }
    mpath = dest / "manifest.json"
    mpath.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    written.append(mpath)
    timings = {r.scheme: r.seconds for r in results}
    tpath = dest / "timings.json"
    tpath.write_text(json.dumps(timings, sort_keys=True, indent=2) + "\n")
    written.append(tpath)
    return written


def save_sweep(rows, dest) -> Path:
    dest = Path(dest)
    lines = ["value,S1,S2"]
    lines.extend(f"{repr(float(v))},{repr(float(s1))},{repr(float(s2))}"
                 for v, s1, s2 in rows)
    dest.write_text("\n".join(lines) + "\n")
    return dest
