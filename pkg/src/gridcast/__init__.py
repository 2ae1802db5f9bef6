"""gridcast: probabilistic interpolation of point-sampled variables.

Pairs each observation with a centre-normalised window of a gridded
auxiliary variable and a standardised location triple, trains a two-branch
network on the Gaussian negative log-likelihood with always-on dropout,
and produces posterior predictive maps with separated aleatoric and
epistemic uncertainty via Monte Carlo dropout.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import (
    BuildResult,
    DatasetSplit,
    Observation,
    SampleSet,
    StandardScaler,
    assign_folds,
    build_dataset,
    read_observations,
    write_observations,
    zero_patches,
)
from .errors import (
    DataError,
    GridcastError,
    NodataError,
    NumericError,
    ParseError,
    SupportError,
)
from .grid import (
    Patch,
    Raster,
    bicubic_sample,
    extract_patch,
    normalize_patch,
    read_raster,
    write_raster,
)
from .metrics import (
    ScoreReport,
    crps_ensemble,
    crps_gaussian,
    crps_mixture,
    evaluate,
    interval_coverage,
    log_score,
    r_squared,
)
from .model import (
    build_network,
    build_default_network,
    describe,
    describe_json,
    describe_rows,
    shape_chain,
)
from .nn import (
    DropoutMask,
    GaussianPrediction,
    NetworkSpec,
    WeightSet,
    backward,
    forward,
    init_weights,
    nll_loss,
    param_count,
    sample_mask,
)
from .predict import (
    PredictiveEnsemble,
    PredictiveSummary,
    cross_section,
    mc_predict,
    mixture_cdf,
    mixture_quantile,
    nearby_observations,
    predict_map,
    summarize,
)
from .synth import SynthWorld, make_world, oracle_scores, sample_observations
from .train import TrainConfig, TrainLog, TuneResult, adam_step, train, tune_dropout

__version__ = "0.1.0"
