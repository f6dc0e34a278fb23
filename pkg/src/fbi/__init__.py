"""Fingerprinting black-box image classifiers from benign top-k queries."""

from . import corpus, distance, errors, family_sim, open_world, walled_garden
from .corpus import FamilyPartition, PredictionTable, load_table, save_table, select_inputs
from .distance import (
    BoundInput,
    DistanceReport,
    SurjectedSeq,
    channel_mi,
    compound_distance,
    empirical_mi,
    model_distance,
    pairwise_distance_matrix,
    surject,
    surject_column,
    theory_lower_bound,
)
from .family_sim import (
    ChannelSpec,
    VanillaSpec,
    VariantSpec,
    gen_ensemble,
    gen_vanilla,
    gen_variant,
    identity_channel,
    nested_flip_channel,
    retain_channel,
)
from .open_world import (
    CalibratedTest,
    calibrate_threshold,
    choose_delegate,
    detect_variant,
    identify_family,
    identify_variation,
    run_protocol,
)
from .walled_garden import (
    Verdict,
    detect,
    identify,
    replay_oracle,
    sequential_expected_queries,
)

__version__ = "0.1.0"
