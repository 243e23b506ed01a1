"""Command line entry points.

Verbs mirror the library layers: ``synth`` and ``contacts`` generate inputs,
``optimize`` and ``learn`` act on saved inputs, ``analyze`` runs the dataset
study, ``run`` and ``sweep`` drive full scenarios.  All outputs except
``timings.json`` are deterministic given the flags, so re-running a command
with the same seed reproduces every data file byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .demand import (aggregate_popularity, average_similarity, load_profile,
                     load_requests, save_popularity, save_profile,
                     synthesize_demand)
from .dataset import (catalog_size_curve, fit_curve, load_excerpt,
                      locate_movielens, parse_movies, parse_ratings,
                      save_curve, save_fits, temporal_topic_similarity,
                      to_request_matrix, genre_catalog, split_by_release)
from .experiment import (emit_results, override_scenario, parse_scenario,
                         run_scenario, save_sweep, sweep)
from .learner import (EmConfig, TopicCatalog, baseline_fit, em_fit,
                      predict_preferences, prior_fit, save_plsa, save_trace)
from .mobility import MobilityConfig, load_contacts, random_walk_contacts, \
    save_contacts, static_contacts
from .optimizer import (alternating_optimize, greedy_optimize, load_caching,
                        offloading_probability, save_caching)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _cmd_synth(args) -> int:
    profile, features = synthesize_demand(args.files, args.users, args.alpha,
                                          args.beta, args.seed)
    out = _out_dir(args)
    save_profile(profile, out / "profile", alpha=args.alpha, beta=args.beta,
                 seed=args.seed)
    save_popularity(aggregate_popularity(profile), out / "popularity",
                    beta=args.beta)
    summary = {
        "users": args.users, "files": args.files,
        "alpha": args.alpha, "beta": args.beta, "seed": args.seed,
        "realized_similarity": float(average_similarity(profile.Q)),
        "feature_regenerations": features.regenerations,
    }
    _write_json(out / "summary.json", summary)
    print(f"profile {profile.K}x{profile.F} written to {out}; "
          f"average pairwise similarity {summary['realized_similarity']:.4f}")
    return 0


def _cmd_contacts(args) -> int:
    out = _out_dir(args)
    if args.v_max > 0:
        config = MobilityConfig(args.area_side, args.v_max, args.period,
                                args.leg_duration, args.time_step, args.seed)
        contacts = random_walk_contacts(config, args.users, args.r_c)
        period = args.period
    else:
        gen = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(args.seed)))
        positions = gen.uniform(0.0, args.area_side, (args.users, 2))
        contacts = static_contacts(positions, args.r_c)
        period = 0.0
    save_contacts(contacts, out / "contacts", period=period,
                  v_max=args.v_max, seed=args.seed)
    print(f"contact matrix {contacts.K}x{contacts.K} written to {out}; "
          f"mean off-diagonal contact "
          f"{_mean_offdiag(contacts.a):.4f}")
    return 0


def _mean_offdiag(A: np.ndarray) -> float:
    K = A.shape[0]
    if K < 2:
        return 0.0
    return float((A.sum() - np.trace(A)) / (K * (K - 1)))


def _cmd_optimize(args) -> int:
    profile, _ = load_profile(Path(args.profile))
    contacts, _ = load_contacts(Path(args.contacts))
    out = _out_dir(args)
    todo = ("greedy", "alternating") if args.algorithm == "both" \
        else (args.algorithm,)
    timings = {}
    for name in todo:
        if name == "greedy":
            caching, report = greedy_optimize(profile, contacts, args.budget)
        else:
            caching, report = alternating_optimize(profile, contacts,
                                                   args.budget, seed=args.seed)
        save_caching(caching, out / f"placement_{name}")
        _write_json(out / f"report_{name}.json", {
            "scheme": report.scheme,
            "iterations": report.iterations,
            "objective_trace": [repr(float(x)) for x in report.objective_trace],
            "offloading": repr(float(report.objective_trace[-1])),
        })
        timings[name] = report.seconds
        print(f"{name}: offloading {report.objective_trace[-1]:.6f} "
              f"after {report.iterations} iterations "
              f"({report.seconds:.3f} s)")
    _write_json(out / "timings.json", timings)
    return 0


def _cmd_learn(args) -> int:
    requests = load_requests(Path(args.requests))
    out = _out_dir(args)
    config = EmConfig(args.topics, seed=args.seed, tol=args.tol,
                      max_iter=args.max_iter)
    if args.method == "em":
        model, trace = em_fit(requests, config)
        profile = predict_preferences(model)
        save_plsa(model, out / "model", seed=args.seed, iterations=len(trace),
                  final_likelihood=trace[-1])
        save_trace(trace, out / "trace.csv")
    elif args.method == "prior":
        if not args.topic_pref or not args.catalog:
            raise SystemExit("learn --method prior needs --topic-pref and --catalog")
        topic_pref = np.loadtxt(args.topic_pref, delimiter=",", ndmin=2)
        payload = json.loads(Path(args.catalog).read_text())
        catalog = TopicCatalog(tuple(payload["labels"]),
                               tuple(tuple(m) for m in payload["members"]))
        active = None
        if args.active:
            active = np.loadtxt(args.active, delimiter=",")
        profile, trace = prior_fit(requests, topic_pref, catalog, config,
                                   active=active)
        save_trace(trace, out / "trace.csv")
    else:
        profile = baseline_fit(requests)
        trace = []
    save_profile(profile, out / "learned_profile", seed=args.seed)
    tail = f"; final objective {trace[-1]:.4f}" if trace else ""
    print(f"{args.method} profile {profile.K}x{profile.F} "
          f"written to {out}{tail}")
    return 0


def _locate_data(args):
    if args.offline:
        return None
    if args.data:
        return Path(args.data)
    return locate_movielens()


def _cmd_analyze(args) -> int:
    where = _locate_data(args)
    if where is None:
        ratings, movies = load_excerpt()
        source = "bundled excerpt"
    else:
        ratings, rej_r = parse_ratings(where / "ratings.dat")
        movies, rej_m = parse_movies(where / "movies.dat")
        source = str(where)
        if rej_r or rej_m:
            print(f"warning: {len(rej_r)} rating and {len(rej_m)} movie "
                  f"lines rejected", file=sys.stderr)
    out = _out_dir(args)
    requests, duplicates = to_request_matrix(ratings)
    stats = {
        "source": source,
        "ratings": len(ratings),
        "users": requests.K,
        "movies_rated": requests.F,
        "movies_listed": len(movies),
        "duplicate_pairs": duplicates,
    }

    counts = np.arange(args.curve_step, requests.K + 1, args.curve_step)
    if counts.size == 0:
        counts = np.array([requests.K])
    curve = catalog_size_curve(requests, counts, trials=args.trials,
                               seed=args.seed)
    save_curve(counts, curve, out / "curve.csv")
    fits = [fit_curve(counts.astype(float), curve, fam)
            for fam in ("zipf", "exponential", "weibull", "power", "log")]
    save_fits(fits, out / "curve_fits.json")
    best = max(fits, key=lambda f: f.r_squared)
    stats["best_curve_family"] = best.family
    stats["best_curve_r_squared"] = best.r_squared

    older, newer = split_by_release(movies, ratings)
    # one topic per genre; the anchoring fixes the topic count
    cat_old = genre_catalog(movies, older.file_ids)
    cat_new = genre_catalog(movies, newer.file_ids)
    config = EmConfig(cat_old.Z, seed=args.seed, tol=args.tol,
                      max_iter=args.max_iter)
    sim = temporal_topic_similarity(older, newer, cat_old.Z, config,
                                    catalogs=(cat_old, cat_new))
    lines = ["user_index,topic_similarity"]
    lines.extend(f"{int(k)},{repr(float(s))}"
                 for k, s in zip(sim.included_users, sim.similarities))
    (out / "topic_similarity.csv").write_text("\n".join(lines) + "\n")
    stats["temporal_users_compared"] = int(sim.included_users.size)
    stats["temporal_users_excluded"] = sim.excluded_users
    stats["activity_similarity"] = sim.active_similarity
    stats["topic_similarity_above_0.8"] = sim.fraction_above(0.8)
    _write_json(out / "stats.json", stats)
    print(f"analyzed {source}: {stats['ratings']} ratings, "
          f"{stats['users']} users, {stats['movies_rated']} movies; "
          f"best curve fit {best.family} (R^2 {best.r_squared:.4f}); "
          f"activity similarity {sim.active_similarity:.4f}")
    return 0


def _cmd_run(args) -> int:
    scenario = parse_scenario(Path(args.scenario))
    if args.set:
        scenario = override_scenario(scenario, args.set)
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)
    results = run_scenario(scenario)
    out = _out_dir(args)
    emit_results(results, out, scenario)
    for r in results:
        tail = " ".join(f"{p:.4f}" for p in r.offloading)
        print(f"{r.scheme}: {tail}")
    return 0


def _cmd_sweep(args) -> int:
    scenario = parse_scenario(Path(args.scenario))
    if args.set:
        scenario = override_scenario(scenario, args.set)
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    rows = sweep(scenario, args.param, values)
    out = _out_dir(args)
    save_sweep(rows, out / "sweep.csv")
    for v, s1, s2 in rows:
        print(f"{args.param}={v:g}: S1 {s1:.4f}  S2 {s2:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="d2dcache",
        description="Per-user content placement in cache-enabled D2D networks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic demand profile")
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--files", type=int, default=3000)
    p.add_argument("--alpha", type=float, default=0.36)
    p.add_argument("--beta", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("contacts", help="generate a contact probability matrix")
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--r-c", type=float, default=30.0)
    p.add_argument("--area-side", type=float, default=500.0)
    p.add_argument("--v-max", type=float, default=0.0)
    p.add_argument("--period", type=float, default=7200.0)
    p.add_argument("--leg-duration", type=float, default=100.0)
    p.add_argument("--time-step", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_contacts)

    p = sub.add_parser("optimize", help="place files given a profile and contacts")
    p.add_argument("--profile", required=True,
                   help="basename of a saved profile (.csv/.json pair)")
    p.add_argument("--contacts", required=True,
                   help="basename of a saved contact matrix")
    p.add_argument("--budget", type=int, default=5)
    p.add_argument("--algorithm", choices=("greedy", "alternating", "both"),
                   default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("learn", help="estimate a demand profile from requests")
    p.add_argument("--requests", required=True,
                   help="basename of a saved request matrix")
    p.add_argument("--method", choices=("em", "prior", "baseline"),
                   default="em")
    p.add_argument("--topics", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--topic-pref", help="CSV of fixed user topic preferences")
    p.add_argument("--catalog", help="JSON with topic labels and file members")
    p.add_argument("--active", help="CSV with fixed user activity levels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_learn)

    p = sub.add_parser("analyze", help="run the rating-dataset study")
    p.add_argument("--data", help="directory holding ratings.dat and movies.dat")
    p.add_argument("--offline", action="store_true",
                   help="use the small bundled excerpt")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--curve-step", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("run", help="run a scenario file end to end")
    p.add_argument("--scenario", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scenario field (repeatable)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the scenario seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="vary one scenario knob, perfect knowledge")
    p.add_argument("--scenario", required=True)
    p.add_argument("--param", required=True,
                   choices=("alpha", "beta", "M", "r_c", "v_max"))
    p.add_argument("--values", required=True,
                   help="comma separated values, e.g. 1,2,5,10")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scenario field (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
