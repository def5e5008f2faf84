"""Next-step prediction for multivariate binary event sequences.

Trains a population-level recurrent predictor, adapts it online to each
test patient (to the patient's own history, to similar patients retrieved
from a memory bank, or both), and switches per step or per event type
between the population and adapted models based on their recent errors.
"""

__version__ = "0.1.0"

from .adaptation import (
    AdaptConfig,
    AdaptResult,
    adapt_combined,
    adapt_self,
    adapt_subpopulation,
    discount_kernel,
)
from .errors import (
    ConfigError,
    EmptyLogError,
    EvseqError,
    FormatError,
    NoKnownEventsError,
    NonFiniteError,
    ParseError,
    TooShortError,
    VersionError,
)
from .events import (
    EventSequence,
    EventVocabulary,
    RawEventLog,
    discretize,
    load_event_log,
    load_vocabulary,
    save_event_log,
    save_vocabulary,
    split_train_test,
)
from .memory import MemoryBank, Neighborhood, build_memory, knn, load_bank, save_bank
from .metrics import (
    MetricReport,
    PredictionRecord,
    auprc,
    evaluate,
    performance_gain_table,
    selection_ratio,
    split_repetitive,
)
from .model import (
    ModelConfig,
    ModelState,
    backward,
    bce,
    clone_model,
    forward_step,
    init_model,
    load_model,
    optimizer_step,
    save_model,
    sequence_loss,
)
from .switching import (
    STRATEGIES,
    PoolBuilder,
    SwitchConfig,
    SwitchTrace,
    discounted_model_loss,
    run_patient,
    select_global,
    select_per_event,
)
from .synthetic import SyntheticSpec, generate_synthetic, make_synthetic_vocabulary
from .training import TrainConfig, TrainReport, grid_select_l2, train_population
