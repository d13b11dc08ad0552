"""Subgroup-shift analysis toolkit.

Quantifies how the choice of subgroup partition limits bias mitigation under
spurious-correlation shift: exact minimum-divergence tables over a small
discrete outcome space, plus a synthetic-data harness that trains mitigation
methods against the same partitions and correlates their test performance
with the divergence bound.
"""

from .dist_core import (
    Atom,
    Distribution,
    DivergenceReport,
    N_ATOMS,
    atom_index,
    biased_distribution,
    divergence_report,
    kl_divergence,
    make_distribution,
    pinsker_bound,
    reweighted_distribution,
    tv_distance,
    uniform_distribution,
)
from .errors import (
    DegenerateInput,
    DimensionMismatch,
    EmptyGroup,
    InsufficientSchemes,
    InvalidScheme,
    MissingCell,
    NonNormalizable,
    OutOfRange,
    SingleClass,
    SubshiftError,
    SupportMismatch,
    TooManyGroups,
    YBasedGrouping,
)
from .grouping import (
    GroupingScheme,
    NOISE_LEVELS,
    SoftGrouping,
    annotate_samples,
    atom_grouping,
    is_y_free,
    model_based_schemes,
    refine,
    reweighting_schemes,
)
from .harness import ExperimentSpec, RunRecord, REFERENCE_TABLE, main, run_sweep, spec_hash
from .metrics import EvalReport, accuracy, auc, evaluate, pearson
from .mitigation import TrainConfig, TrainedModel, history_to_csv, train
from .reweight_opt import (
    MinKlRow,
    OptimizationResult,
    WeightVector,
    brute_force_min_kl,
    min_kl_table,
    optimal_weights,
    resampling_weights,
    table_to_csv,
)
from .synth_data import Dataset, FeatureConfig, Sample, make_splits, read_dataset_csv, sample_dataset, write_dataset_csv

__version__ = "0.1.0"
