"""Bayesian multilevel models with compositional predictors.

The pieces compose in pipeline order: simplex operations
(:mod:`codamlm.composition`), ilr bases (:mod:`codamlm.basis`), clustered
data ingestion and the between/within split (:mod:`codamlm.data`), model
fitting (:mod:`codamlm.model`), posterior summaries
(:mod:`codamlm.posterior`), convergence and prior-sensitivity checks
(:mod:`codamlm.diagnostics`), reallocation analysis
(:mod:`codamlm.substitution`) and the Monte Carlo study engine
(:mod:`codamlm.simulate`).  The ``codamlm`` command line drives the same
pipeline in batch.
"""

from .basis import (
    IlrCoords,
    OrthonormalBasis,
    SBP,
    build_basis,
    default_sbp,
    ilr,
    ilr_inverse,
    read_sbp,
    validate_sbp,
)
from .composition import (
    Composition,
    closure,
    geometric_mean_composition,
    inner_product,
    neutral,
    perturb,
    power,
)
from .data import (
    DecomposedCoords,
    IngestReport,
    LongTable,
    between_within_split,
    coordinates_of,
    from_arrays,
    ingest,
)
from .diagnostics import (
    DiagnosticsReport,
    SensitivityResult,
    diagnose,
    ess,
    power_scale_sensitivity,
    split_rhat,
)
from .errors import CodamlmError, DataError, DesignError, SamplingError
from .model import (
    Design,
    HalfStudentT,
    ModelSpec,
    PriorSpec,
    SamplerConfig,
    StudentT,
    build_design,
    default_priors,
    fit,
)
from .posterior import (
    PosteriorDraws,
    Summary,
    draws_from_csv,
    draws_to_csv,
    predict_expectation,
    summarize,
)
from .simulate import (
    ConditionCell,
    ConditionGrid,
    DGPParams,
    MetricsSummary,
    collapse,
    default_study_config,
    generate,
    metrics,
    run_condition,
    run_study,
)
from .substitution import (
    ReferenceComposition,
    SubstitutionGrid,
    SubstitutionResult,
    default_grid,
    estimate_delta,
    reallocate,
    reference,
)

__version__ = "0.1.0"
