"""Conservative lower bounds on language-model parameter counts, inferred
black-box from next-word recall of widely memorized texts."""

from .assumption import (
    AgreementSummary,
    AssumptionReport,
    MannWhitneyResult,
    agreement_matrix,
    check_assumptions,
    mann_whitney_one_sided,
    rank_texts,
    spearman_rho,
)
from .config import (
    CorpusConfig,
    InferenceSettings,
    ModelEntry,
    RunConfig,
    SimulatorConfig,
    TransportConfig,
    load_config,
    parse_config,
    validate_config,
)
from .corpus import (
    PrefixSample,
    SamplingPlan,
    TextDocument,
    TextKind,
    load_manifest,
    read_corpus,
    sample_prefixes,
    tokenize,
)
from .errors import (
    AnalysisError,
    AssemblyError,
    CompatibilityError,
    ConfigError,
    CorpusError,
    DegenerateDataError,
    FitError,
    MeasurementError,
    ReplayMissError,
    SizeboundError,
    StorageError,
    UndefinedCorrelationError,
)
from .latent_scaling import (
    FitArtifact,
    LooCvResult,
    PrincipalAxis,
    ScalingLawFit,
    absolute_lower_bound,
    first_component,
    fit_scaling_law,
    loo_cv,
    round_half_up,
    score_new_model,
)
from .model_client import (
    DEFAULT_TEMPLATES,
    HttpTransport,
    ModelClient,
    ModelSpec,
    PromptTemplate,
    QueryCache,
    QueryRecord,
    SimulatedModel,
    SimulatorLink,
    TokenBucket,
    judge_correct,
    normalize_answer,
    render_prompt,
)
from .pairwise import (
    BlockScores,
    PairwiseResult,
    TauPoint,
    block_scores,
    relative_lower_bound,
    sign_permutation_test,
    tau_sweep_evaluation,
)
from .pipeline import (
    BoundRow,
    CostEstimate,
    combine_bounds,
    estimate_cost,
    run_bound,
    run_evaluate,
    run_fit,
    run_measure,
    run_report,
)
from .profiles import (
    AccuracyCell,
    AccuracyProfile,
    BaselineCurve,
    baseline_accuracy,
    build_profile,
    lifted_accuracy,
    raw_accuracy,
)

__version__ = "0.1.0"
