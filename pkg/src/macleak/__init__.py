"""Simulation and CPA toolkit for pruning-based MAC-skipping countermeasures.

Synthesizes power traces of a quantized first-layer neuron whose
non-important MACs are randomly skipped, implements the pattern-matching
preprocessing that re-synchronizes such traces, and evaluates correlation
weight recovery with guessing-entropy curves across the unprotected,
protected and circumvented configurations.
"""

from .simulate import (
    IaPAM,
    ImportanceLabel,
    NeuronConfig,
    PruningVariant,
    SimConfig,
    SkipTable,
    Trace,
    TraceSet,
    generate_images,
    hamming_weight32,
    simulate_experiment,
    simulate_trace,
)
from .patterns import (
    ClassifiedSequence,
    MatchConfig,
    Metric,
    PatternLibrary,
    PatternTemplate,
    calibrate_templates,
    classify_trace,
    default_library,
    default_match_config,
    similarity,
)
from .preprocess import (
    AlignedTraceSet,
    apply_masks,
    build_pixel_masks,
    concatenate_important,
    derive_iapam,
    partition_and_retain,
)
from .cpa import (
    AttackConfig,
    CorrelationAccumulator,
    GECurve,
    ScoreMatrix,
    adjacency_study,
    correlate,
    guessing_entropy,
    hypotheses,
    recover_weight,
)
from .experiments import ExperimentSpec, default_spec, geometric_schedule

__version__ = "0.1.0"
