"""Per-user content placement for cache-enabled device-to-device networks.

The package splits into demand modeling (synthetic profiles with a tunable
user-similarity knob), contact modeling (static or random-walk mobility),
placement optimization (greedy and alternating best-response), demand
learning from request counts (latent-topic EM with optional prior
knowledge), rating-dataset analysis, and an experiment driver tying them
together.
"""

__version__ = "0.1.0"

from .demand import (
    DemandError,
    DemandProfile,
    LatentFeatures,
    PopularityVector,
    RequestMatrix,
    aggregate_popularity,
    average_similarity,
    cosine_similarity,
    load_popularity,
    load_profile,
    load_requests,
    ml_estimates,
    power_kernel,
    save_popularity,
    save_profile,
    save_requests,
    synthesize_demand,
    zipf_popularity,
)
from .mobility import (
    ContactMatrix,
    MobilityConfig,
    MobilityError,
    contacts_from_trajectory,
    load_contacts,
    random_walk_contacts,
    save_contacts,
    simulate_random_walk,
    static_contacts,
)
from .optimizer import (
    CachingMatrix,
    OptimizerError,
    OptimizerReport,
    alternating_optimize,
    best_response,
    brute_force_optimize,
    greedy_optimize,
    incremental_gain,
    load_caching,
    miss_products,
    offloading_probability,
    popularity_offloading,
    popularity_policy,
    random_placement,
    save_caching,
    save_report,
)
from .learner import (
    EmConfig,
    LearnerError,
    PlsaModel,
    TopicCatalog,
    baseline_fit,
    em_fit,
    estimate_active,
    load_plsa,
    log_likelihood,
    predict_preferences,
    prior_fit,
    save_plsa,
    save_trace,
)
from .dataset import (
    GENRES,
    FitResult,
    MovieRecord,
    ParseError,
    RatingRecord,
    TemporalSimilarity,
    catalog_size_curve,
    fetch_movielens,
    fit_curve,
    genre_catalog,
    load_excerpt,
    parse_movies,
    parse_ratings,
    release_order,
    save_curve,
    save_fits,
    split_by_release,
    temporal_topic_similarity,
    to_request_matrix,
)
from .experiment import (
    Scenario,
    ScenarioError,
    SchemeResult,
    emit_results,
    override_scenario,
    parse_scenario,
    run_scenario,
    save_sweep,
    sweep,
    write_scenario,
)

__all__ = [name for name in dir() if not name.startswith("_")]
