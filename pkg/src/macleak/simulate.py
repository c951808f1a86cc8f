"""Synthetic power-trace generation for a pruned quantized-MLP first layer.

The simulator emits one pattern segment per MAC (multiply-accumulate) of a
single neuron. Which segment shape is emitted depends on the protection
variant and on the per-inference skip decisions:

* important MACs always execute,
* non-important MACs are skipped with probability ``activation_ratio``
  (``activation_ratio`` is the *skip* probability for non-important MACs;
  at 0.5 both readings of the ratio coincide),
* executed segments carry a data-dependent sample: the Hamming weight of
  the running 32-bit accumulator is added at the segment's leak offset,
* skipped segments are fully data-independent.

Ground truth (the emitted label sequence) is retained on every trace for
oracle tests only; attack code must never consume it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ImportanceLabel",
    "PruningVariant",
    "IaPAM",
    "NeuronConfig",
    "SimConfig",
    "SkipTable",
    "Trace",
    "TraceSet",
    "hamming_weight32",
    "generate_images",
    "simulate_trace",
    "simulate_experiment",
    "derive_seed",
]

_ACC_MASK = np.uint64(0xFFFFFFFF)

# Stream tags for deterministic sub-seed derivation (see derive_seed).
_STREAM_IMAGES = 1
_STREAM_SKIPS = 2
_STREAM_NOISE = 3
_STREAM_EXPERIMENT = 4


class ImportanceLabel(enum.Enum):
    """Per-MAC degree of importance as it appears on the trace."""

    I = "I"  # important MAC, always executed
    E = "E"  # non-important MAC, executed this inference
    S = "S"  # non-important MAC, skipped this inference


class PruningVariant(enum.Enum):
    UNPROTECTED = "unprotected"
    BRANCHED = "branched"
    CONTROL_FLOW_FREE = "control_flow_free"


class ConfigError(ValueError):
    """Invalid simulation or neuron configuration."""


def hamming_weight32(values) -> np.ndarray:
    """Hamming weight of the two's-complement 32-bit representation.

    Matches a 32-bit MCU datapath: the input is masked to its low 32 bits
    before counting, so negative accumulators get the weight of their
    two's-complement encoding.
    """
    v = np.asarray(values, dtype=np.int64)
    return np.bitwise_count(v.astype(np.uint64) & _ACC_MASK).astype(np.uint8)


def derive_seed(base_seed: int, *tags: int) -> int:
    """Derive an independent 64-bit sub-seed from a base seed and int tags."""
    ss = np.random.SeedSequence([int(base_seed), *[int(t) for t in tags]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class IaPAM:
    """Importance map: one bit per pixel position, set = important.

    Immutable for the duration of an experiment; the backing array is
    marked read-only.
    """

    def __init__(self, bits):
        arr = np.array([bool(b) for b in bits], dtype=bool)
        if arr.size == 0:
            raise ConfigError("IaPAM must cover at least one pixel")
        arr.setflags(write=False)
        self.bits = arr

    def __len__(self):
        return int(self.bits.size)

    def __getitem__(self, i):
        return bool(self.bits[i])

    def __eq__(self, other):
        if not isinstance(other, IaPAM):
            return NotImplemented
        return self.bits.size == other.bits.size and bool(np.all(self.bits == other.bits))

    def __hash__(self):
        return hash(self.bits.tobytes())

    def __repr__(self):
        return "IaPAM(%s)" % "".join("1" if b else "0" for b in self.bits)

    @property
    def positions(self) -> tuple[int, ...]:
        """Pixel indices of the important positions, in raster order."""
        return tuple(int(i) for i in np.flatnonzero(self.bits))

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def to_list(self) -> list[int]:
        return [int(b) for b in self.bits]


@dataclass(frozen=True)
class NeuronConfig:
    """First-layer neuron under attack: quantized weights plus bias.

    The bias is carried for completeness but applied after the attacked
    accumulation window, so it never enters the leaking value.
    """

    weights: np.ndarray
    bias: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.int64)
        if w.ndim != 1 or w.size < 1:
            raise ConfigError("weights must be a non-empty vector")
        if w.min() < -128 or w.max() > 127:
            raise ConfigError("weights must fit in signed 8 bits")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def pixel_count(self) -> int:
        return int(self.weights.size)


@dataclass(frozen=True)
class SimConfig:
    """Countermeasure and noise parameters for one simulated experiment.

    ``activation_ratio`` is the probability that a non-important MAC is
    *skipped* in a given inference (execute probability is its complement).
    ``extended_leakage`` additionally injects the Hamming weight of the
    previous accumulator value into every executed segment, reproducing
    the effect of weight i leaking during MAC #i+1 as well.
    """

    iapam: IaPAM
    activation_ratio: float = 0.5
    noise_sigma: float = 0.0
    extended_leakage: bool = False
    variant: PruningVariant = PruningVariant.BRANCHED
    rng_seed: int = 0

    def __post_init__(self):
        if not isinstance(self.iapam, IaPAM):
            object.__setattr__(self, "iapam", IaPAM(self.iapam))
        if not 0.0 <= float(self.activation_ratio) <= 1.0:
            raise ConfigError("activation_ratio must lie in [0, 1]")
        if float(self.noise_sigma) < 0.0:
            raise ConfigError("noise_sigma must be non-negative")
        if not isinstance(self.variant, PruningVariant):
            object.__setattr__(self, "variant", PruningVariant(self.variant))
        if int(self.rng_seed) < 0:
            raise ConfigError("rng_seed must be a non-negative integer")


@dataclass(frozen=True)
class SkipTable:
    """Per-inference execute/skip decisions, one row per trace.

    A set bit means the MAC executed; important positions are always set.
    """

    decisions: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.decisions, dtype=bool)
        if d.ndim != 2:
            raise ConfigError("decisions must be a (trace_count, pixel_count) matrix")
        d.setflags(write=False)
        object.__setattr__(self, "decisions", d)

    @property
    def trace_count(self) -> int:
        return int(self.decisions.shape[0])

    @property
    def pixel_count(self) -> int:
        return int(self.decisions.shape[1])


@dataclass
class Trace:
    """One simulated power measurement.

    ``ground_truth`` is the emitted label sequence (length = pixel_count);
    it exists for oracle tests and must never feed attack code paths.
    """

    samples: np.ndarray
    image_index: int = 0
    ground_truth: tuple[ImportanceLabel, ...] | None = None

    def __len__(self):
        return int(self.samples.size)


@dataclass
class TraceSet:
    """An ordered collection of traces from one experiment."""

    traces: list[Trace] = field(default_factory=list)

    def __len__(self):
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def __getitem__(self, i):
        return self.traces[i]

    def lengths(self) -> np.ndarray:
        return np.array([len(t) for t in self.traces], dtype=np.int64)

    def to_matrix(self, width: int | None = None, fill: float = 0.0) -> np.ndarray:
        """Right-pad all traces to a rectangular float32 matrix."""
        if not self.traces:
            raise ValueError("empty trace set")
        lengths = self.lengths()
        w = int(lengths.max()) if width is None else int(width)
        if w < lengths.max():
            raise ValueError("width smaller than the longest trace")
        out = np.full((len(self.traces), w), fill, dtype=np.float32)
        for row, t in zip(out, self.traces):
            row[: len(t)] = t.samples
        return out

    def subset(self, indices) -> "TraceSet":
        return TraceSet([self.traces[i] for i in indices])


def generate_images(count: int, pixel_count: int, seed: int) -> np.ndarray:
    """Generate a deterministic set of random input images.

    Returns a ``(count, pixel_count)`` matrix of unsigned 8-bit pixels drawn
    uniformly from [0, 255].
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if pixel_count < 1:
        raise ConfigError("pixel_count must be >= 1")
    rng = np.random.default_rng(int(seed))
    return rng.integers(0, 256, size=(count, pixel_count), dtype=np.uint8)


def _emitted_labels(sim: SimConfig, skip_row: np.ndarray) -> list[ImportanceLabel]:
    imp = sim.iapam.bits
    if sim.variant is PruningVariant.UNPROTECTED:
        return [ImportanceLabel.E] * imp.size
    labels = []
    for i in range(imp.size):
        if imp[i]:
            labels.append(
                ImportanceLabel.I
                if sim.variant is PruningVariant.BRANCHED
                else ImportanceLabel.E
            )
        elif skip_row[i]:
            labels.append(ImportanceLabel.E)
        else:
            labels.append(ImportanceLabel.S)
    return labels


def simulate_trace(
    neuron: NeuronConfig,
    sim: SimConfig,
    image: np.ndarray,
    skip_row: np.ndarray,
    templates,
    image_index: int = 0,
) -> Trace:
    """Simulate the power trace of one inference over one neuron.

    Parameters
    ----------
    neuron, sim : configuration objects.
    image : uint8 pixel vector of length ``neuron.pixel_count``.
    skip_row : execute-decision bits (set = executed) for this inference.
    templates : PatternLibrary providing one segment shape per label.
    image_index : index of ``image`` in its image set; also selects the
        per-trace noise stream so serial and parallel generation agree
        bit for bit.

    Each emitted segment is the label's template; executed segments get
    ``HW(a_i)`` added at the template's leak offset (plus ``HW(a_{i-1})``
    when extended leakage is on), where ``a_i`` is the running accumulator
    over executed MACs. Gaussian noise of ``sim.noise_sigma`` is then added
    to every sample.
    """
    pix = neuron.pixel_count
    if len(sim.iapam) != pix:
        raise ConfigError("IaPAM length does not match pixel_count")
    image = np.asarray(image, dtype=np.int64)
    skip_row = np.asarray(skip_row, dtype=bool)
    if image.size != pix or skip_row.size != pix:
        raise ConfigError("image and skip_row must have pixel_count entries")

    labels = _emitted_labels(sim, skip_row)
    executed = np.array([lab is not ImportanceLabel.S for lab in labels], dtype=bool)

    acc = np.cumsum(image * neuron.weights * executed)
    hw_now = hamming_weight32(acc).astype(np.float64)
    hw_prev = np.concatenate(([0.0], hw_now[:-1]))

    segs = [templates[lab].samples for lab in labels]
    seg_lengths = np.array([s.size for s in segs], dtype=np.int64)
    starts = np.concatenate(([0], np.cumsum(seg_lengths)[:-1]))
    body = np.concatenate(segs).astype(np.float64)

    offsets = np.array([templates[lab].leak_offset for lab in labels], dtype=np.int64)
    inject = starts[executed] + offsets[executed]
    body[inject] += hw_now[executed]
    if sim.extended_leakage:
        body[inject] += hw_prev[executed]

    if sim.noise_sigma > 0.0:
        rng = np.random.default_rng([sim.rng_seed, _STREAM_NOISE, int(image_index)])
        body += rng.normal(0.0, sim.noise_sigma, size=body.size)

    return Trace(
        samples=body.astype(np.float32),
        image_index=int(image_index),
        ground_truth=tuple(labels),
    )


def generate_skip_table(sim: SimConfig, trace_count: int) -> SkipTable:
    """Draw the per-inference execute/skip table for an experiment.

    Non-important positions execute independently with probability
    ``1 - activation_ratio``; important positions are forced to execute.
    """
    if trace_count < 1:
        raise ConfigError("trace_count must be >= 1")
    pix = len(sim.iapam)
    rng = np.random.default_rng([sim.rng_seed, _STREAM_SKIPS])
    decisions = rng.random((trace_count, pix)) >= sim.activation_ratio
    decisions[:, sim.iapam.bits] = True
    return SkipTable(decisions)


def simulate_experiment(
    neuron: NeuronConfig,
    sim: SimConfig,
    images: np.ndarray,
    templates,
) -> tuple[TraceSet, SkipTable]:
    """Simulate one trace per image, with a fresh skip row per inference.

    The returned SkipTable is ground truth for oracle use only.
    """
    images = np.asarray(images)
    if images.ndim != 2 or images.shape[0] < 1:
        raise ConfigError("images must be a non-empty (count, pixel_count) matrix")
    table = generate_skip_table(sim, images.shape[0])
    traces = [
        simulate_trace(neuron, sim, images[i], table.decisions[i], templates, image_index=i)
        for i in range(images.shape[0])
    ]
    return TraceSet(traces), table
