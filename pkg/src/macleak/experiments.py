"""Experiment specification and end-to-end study drivers.

One spec describes a desk-scale reproduction run: a first layer of
quantized neurons, the pruning configuration, the number of independent
experiments (fresh image sets), a trace budget and the checkpoint schedule
for guessing-entropy curves. The drivers evaluate the three use cases on
identical image sets: countermeasure disabled, enabled, and enabled but
circumvented by the classification/filter/concatenate preprocessing. The
protected and circumvented evaluations share the same simulated traces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import cpa, patterns, preprocess
from .cpa import GECurve
from .patterns import ClassifiedSequence, MatchConfig, PatternLibrary
from .preprocess import AlignedTraceSet
from .simulate import (
    IaPAM,
    ImportanceLabel,
    NeuronConfig,
    PruningVariant,
    SimConfig,
    TraceSet,
    derive_seed,
    generate_images,
    simulate_experiment,
)

__all__ = [
    "MODERATE_NOISE_SIGMA",
    "TARGET_WEIGHTS",
    "DEFAULT_IAPAM_BASE",
    "ExperimentSpec",
    "geometric_schedule",
    "default_iapam",
    "make_neurons",
    "default_spec",
    "CircumventionResult",
    "circumvent_traceset",
    "per_mac_error_rate",
    "sequence_match_rate",
    "run_unprotected_study",
    "run_protected_study",
    "run_cff_study",
    "important_targets",
    "early_important_positions",
    "late_positions",
]

# Noise level used by the "moderate noise" evaluations. Chosen by a pilot
# sweep (see demos/noise_sweep.py): large enough that the disabled-pruning
# recovery needs on the order of a thousand traces per weight, small enough
# that segment classification stays essentially error-free.
MODERATE_NOISE_SIGMA = 12.0

# Recovery targets per neuron: weights w1..w7 (w0 is excluded from recovery
# but its true value feeds every accumulator prefix).
TARGET_WEIGHTS = tuple(range(1, 8))

# First nine importance bits follow the reference layout used throughout
# the analysis; wider maps tile the same base pattern.
DEFAULT_IAPAM_BASE = (0, 1, 1, 1, 1, 0, 1, 0, 1)

_STREAM_IMAGES = 11
_STREAM_WEIGHTS = 12
_STREAM_EXPERIMENT = 13


def geometric_schedule(start: int, stop: int, points_per_decade: int = 10) -> list[int]:
    """Strictly increasing trace-count checkpoints, log-spaced."""
    if not 2 <= start <= stop:
        raise ValueError("need 2 <= start <= stop")
    n_points = max(2, int(math.ceil(points_per_decade * math.log10(stop / start))) + 1)
    pts = np.unique(
        np.round(np.logspace(math.log10(start), math.log10(stop), n_points)).astype(int)
    )
    pts[-1] = stop
    return [int(p) for p in np.unique(pts)]


def default_iapam(pixel_count: int = 32) -> IaPAM:
    """Tile the base importance pattern out to ``pixel_count`` positions."""
    base = DEFAULT_IAPAM_BASE
    return IaPAM([base[i % len(base)] for i in range(pixel_count)])


def make_neurons(count: int, pixel_count: int, seed: int) -> list[NeuronConfig]:
    """Deterministic random 8-bit weight vectors, one per neuron."""
    rng = np.random.default_rng([int(seed), _STREAM_WEIGHTS])
    return [
        NeuronConfig(weights=rng.integers(-128, 128, size=pixel_count, dtype=np.int64))
        for _ in range(count)
    ]


@dataclass(frozen=True)
class ExperimentSpec:
    """A reproducible multi-experiment evaluation plan.

    Image sets and per-experiment simulation seeds derive deterministically
    from ``sim.rng_seed``, and do not depend on the variant, so all three
    use cases observe identical inputs.
    """

    neurons: list[NeuronConfig]
    sim: SimConfig
    trace_count: int
    experiment_count: int = 5
    schedule: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.neurons:
            raise ValueError("spec needs at least one neuron")
        pix = self.neurons[0].pixel_count
        if any(n.pixel_count != pix for n in self.neurons):
            raise ValueError("all neurons must share the pixel count")
        if len(self.sim.iapam) != pix:
            raise ValueError("IaPAM length must equal the pixel count")
        if self.trace_count < 2:
            raise ValueError("trace_count must be >= 2")
        if self.experiment_count < 1:
            raise ValueError("experiment_count must be >= 1")
        sched = tuple(int(t) for t in self.schedule) or (int(self.trace_count),)
        if list(sched) != sorted(set(sched)) or sched[-1] > self.trace_count:
            raise ValueError("schedule must be strictly increasing and within trace_count")
        object.__setattr__(self, "schedule", sched)
        object.__setattr__(self, "neurons", list(self.neurons))

    @property
    def pixel_count(self) -> int:
        return self.neurons[0].pixel_count

    def image_seed(self, experiment: int) -> int:
        return derive_seed(self.sim.rng_seed, _STREAM_IMAGES, experiment)

    def images_for(self, experiment: int) -> np.ndarray:
        return generate_images(self.trace_count, self.pixel_count, self.image_seed(experiment))

    def sim_for(self, experiment: int, neuron_index: int, variant=None) -> SimConfig:
        seed = derive_seed(self.sim.rng_seed, _STREAM_EXPERIMENT, experiment, neuron_index)
        return dataclasses.replace(
            self.sim, rng_seed=seed, variant=variant or self.sim.variant
        )

    def to_dict(self) -> dict:
        return {
            "pixel_count": self.pixel_count,
            "neurons": [
                {"weights": [int(w) for w in n.weights], "bias": int(n.bias)}
                for n in self.neurons
            ],
            "iapam": self.sim.iapam.to_list(),
            "activation_ratio": float(self.sim.activation_ratio),
            "noise_sigma": float(self.sim.noise_sigma),
            "extended_leakage": bool(self.sim.extended_leakage),
            "variant": self.sim.variant.value,
            "rng_seed": int(self.sim.rng_seed),
            "trace_count": int(self.trace_count),
            "experiment_count": int(self.experiment_count),
            "schedule": [int(t) for t in self.schedule],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        pix = int(data["pixel_count"])
        if "neurons" in data:
            neurons = [
                NeuronConfig(weights=np.asarray(n["weights"], dtype=np.int64), bias=int(n.get("bias", 0)))
                for n in data["neurons"]
            ]
        else:
            neurons = make_neurons(int(data["neuron_count"]), pix, int(data["weights_seed"]))
        iapam = data.get("iapam", "default")
        sim = SimConfig(
            iapam=default_iapam(pix) if iapam == "default" else IaPAM(iapam),
            activation_ratio=float(data.get("activation_ratio", 0.5)),
            noise_sigma=float(data.get("noise_sigma", 0.0)),
            extended_leakage=bool(data.get("extended_leakage", False)),
            variant=PruningVariant(data.get("variant", "branched")),
            rng_seed=int(data.get("rng_seed", 0)),
        )
        schedule = data.get("schedule")
        if isinstance(schedule, dict):
            schedule = geometric_schedule(
                int(schedule["start"]),
                int(schedule.get("stop", data["trace_count"])),
                int(schedule.get("points_per_decade", 10)),
            )
        return cls(
            neurons=neurons,
            sim=sim,
            trace_count=int(data["trace_count"]),
            experiment_count=int(data.get("experiment_count", 5)),
            schedule=tuple(schedule) if schedule else (),
        )

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def default_spec(
    trace_count: int = 10000,
    noise_sigma: float = MODERATE_NOISE_SIGMA,
    neuron_count: int = 5,
    pixel_count: int = 32,
    experiment_count: int = 5,
    rng_seed: int = 20240,
    extended_leakage: bool = False,
    activation_ratio: float = 0.5,
    schedule=None,
    iapam: IaPAM | None = None,
) -> ExperimentSpec:
    """The desk-scale reference configuration: 5 neurons, 32-pixel images."""
    if schedule is None:
        schedule = geometric_schedule(min(100, trace_count), trace_count)
    return ExperimentSpec(
        neurons=make_neurons(neuron_count, pixel_count, rng_seed),
        sim=SimConfig(
            iapam=iapam or default_iapam(pixel_count),
            activation_ratio=activation_ratio,
            noise_sigma=noise_sigma,
            extended_leakage=extended_leakage,
            variant=PruningVariant.BRANCHED,
            rng_seed=rng_seed,
        ),
        trace_count=trace_count,
        experiment_count=experiment_count,
        schedule=tuple(schedule),
    )


def important_targets(iapam: IaPAM, targets=TARGET_WEIGHTS) -> tuple[int, ...]:
    return tuple(w for w in targets if iapam[w])


def early_important_positions(iapam: IaPAM, targets=TARGET_WEIGHTS) -> tuple[int, ...]:
    """Important targets preceded by at most one skippable position.

    These see minimal desynchronization, so pruning only slows their
    recovery down instead of blocking it.
    """
    out = []
    skippable_before = 0
    for i in range(len(iapam)):
        if iapam[i]:
            if i in targets and skippable_before <= 1:
                out.append(i)
        else:
            skippable_before += 1
    return tuple(out)


def late_positions(iapam: IaPAM, targets=TARGET_WEIGHTS) -> tuple[int, ...]:
    """Targets at/after the first non-important position, minus the early set."""
    non_imp = [i for i in range(len(iapam)) if not iapam[i]]
    if not non_imp:
        return ()
    first = non_imp[0]
    early = set(early_important_positions(iapam, targets))
    return tuple(w for w in targets if w >= first and w not in early)


def per_mac_error_rate(seqs: list[ClassifiedSequence], traces: TraceSet) -> float:
    """Fraction of MACs whose classified label differs from ground truth.

    A sequence whose entry count does not match the ground-truth length
    counts as fully misclassified.
    """
    errors = 0
    total = 0
    for seq, trace in zip(seqs, traces):
        truth = trace.ground_truth
        total += len(truth)
        if len(seq.entries) != len(truth):
            errors += len(truth)
        else:
            errors += sum(1 for e, g in zip(seq.entries, truth) if e.label is not g)
    return errors / total


def sequence_match_rate(seqs: list[ClassifiedSequence], traces: TraceSet) -> float:
    """Fraction of traces whose full label sequence equals ground truth."""
    hits = sum(1 for seq, trace in zip(seqs, traces) if seq.labels == trace.ground_truth)
    return hits / len(seqs)


@dataclass
class CircumventionResult:
    """Everything the circumvented attack consumes, plus audit counters."""

    aligned: AlignedTraceSet
    filtered_images: np.ndarray
    raw_images: np.ndarray
    retained_indices: list[int]
    key: tuple[int, ...]
    seqs: list[ClassifiedSequence]
    all_seqs: list[ClassifiedSequence]
    retained_fraction: float


def circumvent_traceset(
    traces: TraceSet,
    images: np.ndarray,
    lib: PatternLibrary,
    match_cfg: MatchConfig,
) -> CircumventionResult:
    """Run the preprocessing chain on one trace set.

    Classify every trace, keep the largest agreement partition, build
    per-trace processed-pixel masks, zero skipped pixels out of the images
    and concatenate the important-MAC segments into aligned rows.
    """
    seqs = patterns.classify_set(traces, lib, match_cfg)
    retained, key, _ = preprocess.partition_and_retain(seqs)
    seqs_kept = [seqs[i] for i in retained]
    masks = preprocess.build_pixel_masks(seqs_kept, images.shape[1])
    raw_kept = images[retained]
    filtered = preprocess.apply_masks(raw_kept, masks)
    aligned = preprocess.concatenate_important(traces.subset(retained), seqs_kept)
    return CircumventionResult(
        aligned=aligned,
        filtered_images=filtered,
        raw_images=raw_kept,
        retained_indices=retained,
        key=key,
        seqs=seqs_kept,
        all_seqs=seqs,
        retained_fraction=len(retained) / len(traces),
    )


def _merge_rank_trajectories(per_exp: list[np.ndarray], schedule) -> GECurve:
    m = min(len(r) for r in per_exp)
    return cpa.guessing_entropy(np.vstack([r[:m] for r in per_exp]), list(schedule)[:m])


@dataclass
class StudyResult:
    """GE curves keyed by (neuron index, weight index), plus audit stats."""

    curves: dict[tuple[int, int], GECurve]
    label_error_rate: float | None = None
    sequence_match: float | None = None
    retained_fraction: float | None = None
    circumvented: dict[tuple[int, int], GECurve] | None = None


def _attack_ranks(matrix, images, neuron, window, weight_index, schedule, candidates):
    cfg = cpa.AttackConfig(
        target_weight_index=weight_index,
        known_prefix=neuron.weights[:weight_index],
        window=window,
        candidate_values=candidates,
    )
    return cpa.ranks_over_schedule(
        matrix, images, cfg, schedule, int(neuron.weights[weight_index])
    )


def run_unprotected_study(spec: ExperimentSpec, lib: PatternLibrary, targets=TARGET_WEIGHTS) -> StudyResult:
    """GE curves with the countermeasure disabled.

    Every MAC emits the executed shape, so traces are rectangular and the
    per-MAC windows come straight from the fixed layout.
    """
    candidates = cpa.default_candidates()
    ranks: dict[tuple[int, int], list[np.ndarray]] = {}
    for e in range(spec.experiment_count):
        images = spec.images_for(e)
        for n, neuron in enumerate(spec.neurons):
            sim = spec.sim_for(e, n, variant=PruningVariant.UNPROTECTED)
            traces, _ = simulate_experiment(neuron, sim, images, lib)
            matrix = traces.to_matrix()
            for w in targets:
                window = cpa.nominal_window(
                    sim.iapam, sim.variant, lib, w, extended=sim.extended_leakage
                )
                ranks.setdefault((n, w), []).append(
                    _attack_ranks(matrix, images, neuron, window, w, spec.schedule, candidates)
                )
    curves = {k: _merge_rank_trajectories(v, spec.schedule) for k, v in ranks.items()}
    return StudyResult(curves=curves)


def run_protected_study(
    spec: ExperimentSpec,
    lib: PatternLibrary,
    match_cfg: MatchConfig | None = None,
    targets=TARGET_WEIGHTS,
    with_circumvention: bool = True,
) -> StudyResult:
    """GE curves with pruning enabled, optionally also circumvented.

    The plain protected attack pads the desynchronized traces to the
    no-skip layout, correlates against the nominal leak cycle of each MAC
    and uses hypotheses computed from the raw images (the attacker cannot
    know which MACs were skipped). The circumvented attack reuses the very
    same traces after preprocessing, with hypotheses from the filtered
    images. Important targets only for the circumvented curves;
    classification quality statistics are pooled over experiments.
    """
    if match_cfg is None:
        match_cfg = patterns.default_match_config()
    candidates = cpa.default_candidates()
    imp_targets = important_targets(spec.sim.iapam, targets)
    prot_ranks: dict[tuple[int, int], list[np.ndarray]] = {}
    circ_ranks: dict[tuple[int, int], list[np.ndarray]] = {}
    errors, matches, retained, pools = 0.0, 0.0, 0.0, 0

    nominal_width = sum(
        lib[ImportanceLabel.I].length if spec.sim.iapam[i] else lib[ImportanceLabel.E].length
        for i in range(spec.pixel_count)
    )

    for e in range(spec.experiment_count):
        images = spec.images_for(e)
        for n, neuron in enumerate(spec.neurons):
            sim = spec.sim_for(e, n, variant=PruningVariant.BRANCHED)
            traces, _ = simulate_experiment(neuron, sim, images, lib)
            matrix = traces.to_matrix(width=nominal_width)
            for w in targets:
                window = cpa.leak_window(
                    sim.iapam, sim.variant, lib, w, extended=sim.extended_leakage
                )
                prot_ranks.setdefault((n, w), []).append(
                    _attack_ranks(matrix, images, neuron, window, w, spec.schedule, candidates)
                )
            if not with_circumvention:
                continue
            result = circumvent_traceset(traces, images, lib, match_cfg)
            errors += per_mac_error_rate(result.all_seqs, traces)
            matches += sequence_match_rate(result.all_seqs, traces)
            retained += result.retained_fraction
            pools += 1
            sub_sched = [t for t in spec.schedule if t <= len(result.retained_indices)]
            for w in imp_targets:
                window = [result.aligned.block_range(w)]
                circ_ranks.setdefault((n, w), []).append(
                    _attack_ranks(
                        result.aligned.samples,
                        result.filtered_images,
                        neuron,
                        window,
                        w,
                        sub_sched,
                        candidates,
                    )
                )

    prot_curves = {k: _merge_rank_trajectories(v, spec.schedule) for k, v in prot_ranks.items()}
    circ_curves = {k: _merge_rank_trajectories(v, spec.schedule) for k, v in circ_ranks.items()}
    return StudyResult(
        curves=prot_curves,
        circumvented=circ_curves if with_circumvention else None,
        label_error_rate=(errors / pools) if pools else None,
        sequence_match=(matches / pools) if pools else None,
        retained_fraction=(retained / pools) if pools else None,
    )


@dataclass
class CffResult:
    """Importance-map derivation against the control-flow-free variant."""

    derived: IaPAM
    truth: IaPAM
    false_positive_bits: int
    exact_recovery_trace_count: int | None


def run_cff_study(
    spec: ExperimentSpec,
    lib: PatternLibrary,
    match_cfg: MatchConfig,
    neuron_index: int = 0,
    experiment: int = 0,
) -> CffResult:
    """Derive the importance map from executed/skipped classifications.

    Also reports the smallest trace-count prefix whose derived map already
    equals the true one (None when the budget never gets there).
    """
    neuron = spec.neurons[neuron_index]
    sim = spec.sim_for(experiment, neuron_index, variant=PruningVariant.CONTROL_FLOW_FREE)
    images = spec.images_for(experiment)
    traces, _ = simulate_experiment(neuron, sim, images, lib)
    seqs = patterns.classify_set(traces, lib, match_cfg)

    derived = preprocess.derive_iapam(seqs)
    truth = spec.sim.iapam
    fp = int(np.sum(derived.bits & ~truth.bits))

    exact_at = None
    for t in range(1, len(seqs) + 1):
        if preprocess.derive_iapam(seqs[:t]) == truth:
            exact_at = t
            break
    return CffResult(
        derived=derived,
        truth=truth,
        false_positive_bits=fp,
        exact_recovery_trace_count=exact_at,
    )
