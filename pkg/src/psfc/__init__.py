"""Order-private sequential evaluation of public linear functions.

A client evaluates a secret composition order of K public invertible
matrices on M inputs using N non-colluding servers, keeping the order
hidden from every server.  The package contains the protocol engine
(scheduler, client, servers, transports), a brute-force correctness
oracle, and an audit suite that checks correctness, privacy, query
counts, and rate against the exact formulas.
"""

from .field import (
    DEFAULT_MODULUS,
    DimensionMismatch,
    InversionOfZero,
    PrimeModulus,
    SingularMatrix,
    mat_inv,
    mat_mul,
    mat_vec_mul,
    rank,
    sample_invertible_matrix,
    sample_uniform_vector,
    vec_add,
    vec_sub,
)
from .protocol import (
    Answer,
    InvalidPermutation,
    KTooLarge,
    MarginalQueryList,
    Permutation,
    Query,
    RunConfig,
    TaskRef,
    compose_reference,
    enumerate_permutations,
    inverse_permutation,
    random_permutation,
)
from .rand import Rng
from .scheduler import (
    BlockPlan,
    InvalidRegime,
    MaskLedger,
    PlannedQuery,
    QueryPlan,
    build_blocks,
    build_plan,
    check_feasibility,
    expr_to_doc,
    plan_to_json,
    plan_vectors,
    query_count,
    schedule_chain,
    schedule_fallback,
)
from .runtime import (
    ChannelClosed,
    MalformedFrame,
    Server,
    SimTransport,
    TcpServerHost,
    TcpTransport,
    UnknownFunction,
    WireMessage,
    decode_message,
    encode_message,
    generate_functions,
    generate_inputs,
    make_servers,
    marginal_fingerprint,
)
from .client import (
    DependencyViolation,
    MissingValue,
    RunReport,
    ValueStore,
    outputs_to_bytes,
    run_protocol,
    unmask,
)
from .audit import (
    AttackCampaignResult,
    ConverseResult,
    FingerprintResult,
    GuardExceeded,
    PrivacyVerdict,
    RankDecayResult,
    RateVerdict,
    UniformityResult,
    attack_campaign,
    converse_counts,
    fingerprint_invariance,
    naive_chain_run,
    rank_decay_experiment,
    rate_report,
    sigma_attack,
    uniformity_test,
)

__version__ = "0.1.0"
