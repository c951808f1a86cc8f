"""Correlation-based weight recovery and guessing-entropy evaluation.

The attack targets the running accumulator of one MAC at a time: with all
earlier weights known, each candidate value for the target weight predicts
the accumulator's Hamming weight per input image, and the candidate whose
predictions correlate best with the trace samples inside the analysis
window wins. Correlation state is kept in a mergeable single-pass
accumulator so batches of traces can be processed independently and
combined exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .preprocess import AlignedTraceSet
from .simulate import IaPAM, ImportanceLabel, PruningVariant, TraceSet, hamming_weight32

__all__ = [
    "LeakageModel",
    "AttackConfig",
    "ScoreMatrix",
    "GECurve",
    "CorrelationAccumulator",
    "default_candidates",
    "hypotheses",
    "correlate",
    "recover_weight",
    "rank_of_true",
    "ranks_over_schedule",
    "guessing_entropy",
    "nominal_window",
    "leak_window",
    "measure_gap_skip_rate",
    "adjacency_study",
    "AdjacencyResult",
]


class LeakageModel(enum.Enum):
    HAMMING_WEIGHT = "hamming_weight"


def default_candidates() -> np.ndarray:
    """All 256 signed 8-bit weight values, ascending."""
    return np.arange(-128, 128, dtype=np.int64)


def _as_windows(window) -> list[tuple[int, int]]:
    if isinstance(window, tuple) and len(window) == 2 and all(np.isscalar(v) for v in window):
        window = [window]
    out = []
    for start, stop in window:
        start, stop = int(start), int(stop)
        if stop <= start or start < 0:
            raise ValueError("invalid window range (%d, %d)" % (start, stop))
        out.append((start, stop))
    if not out:
        raise ValueError("empty analysis window")
    return out


@dataclass(frozen=True)
class AttackConfig:
    """Everything needed to attack one weight.

    ``known_prefix`` holds the true values of all weights before the
    target, including w0: w0 is never a recovery target (telling its true
    value apart from equivalent candidates is a separate problem) but its
    value still feeds the accumulator of every later hypothesis.
    ``window`` is one or more (start, stop) sample ranges; extended
    analysis passes the ranges of MAC #i and MAC #i+1.
    """

    target_weight_index: int
    known_prefix: np.ndarray
    window: list
    candidate_values: np.ndarray = field(default_factory=default_candidates)
    leakage_model: LeakageModel = LeakageModel.HAMMING_WEIGHT

    def __post_init__(self):
        i = int(self.target_weight_index)
        if i < 1:
            raise ValueError("target_weight_index must be >= 1")
        prefix = np.asarray(self.known_prefix, dtype=np.int64)
        if prefix.size != i:
            raise ValueError("known_prefix must cover weights 0..%d" % (i - 1))
        cand = np.asarray(self.candidate_values, dtype=np.int64)
        if cand.size == 0:
            raise ValueError("candidate set is empty")
        if np.unique(cand).size != cand.size:
            raise ValueError("candidate set contains duplicates")
        if not isinstance(self.leakage_model, LeakageModel):
            object.__setattr__(self, "leakage_model", LeakageModel(self.leakage_model))
        prefix.setflags(write=False)
        cand.setflags(write=False)
        object.__setattr__(self, "known_prefix", prefix)
        object.__setattr__(self, "candidate_values", cand)
        object.__setattr__(self, "window", _as_windows(self.window))


@dataclass(frozen=True)
class ScoreMatrix:
    """Per-candidate, per-window-sample Pearson coefficients.

    Degenerate (constant) rows or columns score 0 instead of NaN so they
    can never poison a ranking. The per-candidate summary is the maximum
    absolute coefficient over the window.
    """

    candidates: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        c = np.asarray(self.candidates, dtype=np.int64)
        if v.ndim != 2 or v.shape[0] != c.size:
            raise ValueError("values must be (len(candidates), window_samples)")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "candidates", c)

    @property
    def summary(self) -> np.ndarray:
        return np.max(np.abs(self.values), axis=1)

    def ranking(self) -> tuple[np.ndarray, np.ndarray]:
        """Candidates sorted by descending score, ties by ascending value."""
        s = self.summary
        order = np.lexsort((self.candidates, -s))
        return self.candidates[order], s[order]


class CorrelationAccumulator:
    """Single-pass Pearson state over (hypothesis row, trace column) pairs.

    Keeps sums, sums of squares and cross-sums, so accumulators built from
    disjoint trace batches merge exactly into the state a single pass over
    the union would produce.
    """

    def __init__(self, n_rows: int, n_cols: int):
        self.count = 0
        self.row_sum = np.zeros(n_rows)
        self.row_sqsum = np.zeros(n_rows)
        self.col_sum = np.zeros(n_cols)
        self.col_sqsum = np.zeros(n_cols)
        self.cross_sum = np.zeros((n_rows, n_cols))

    def update(self, hyps: np.ndarray, traces: np.ndarray) -> None:
        """Fold in a batch: hyps is (rows, batch), traces is (batch, cols)."""
        h = np.asarray(hyps, dtype=np.float64)
        t = np.asarray(traces, dtype=np.float64)
        if h.ndim != 2 or t.ndim != 2 or h.shape[1] != t.shape[0]:
            raise ValueError("batch shapes do not agree")
        if h.shape[0] != self.row_sum.size or t.shape[1] != self.col_sum.size:
            raise ValueError("batch does not match accumulator dimensions")
        self.count += h.shape[1]
        self.row_sum += h.sum(axis=1)
        self.row_sqsum += (h * h).sum(axis=1)
        self.col_sum += t.sum(axis=0)
        self.col_sqsum += (t * t).sum(axis=0)
        self.cross_sum += h @ t

    def merge(self, other: "CorrelationAccumulator") -> None:
        if (
            self.row_sum.size != other.row_sum.size
            or self.col_sum.size != other.col_sum.size
        ):
            raise ValueError("cannot merge accumulators of different shapes")
        self.count += other.count
        self.row_sum += other.row_sum
        self.row_sqsum += other.row_sqsum
        self.col_sum += other.col_sum
        self.col_sqsum += other.col_sqsum
        self.cross_sum += other.cross_sum

    def correlation(self) -> np.ndarray:
        """Pearson r per (row, col); constant rows or columns give 0."""
        n = self.count
        if n < 2:
            raise ValueError("need at least 2 observations")
        row_var = n * self.row_sqsum - self.row_sum**2
        col_var = n * self.col_sqsum - self.col_sum**2
        num = n * self.cross_sum - np.outer(self.row_sum, self.col_sum)
        den = np.sqrt(np.outer(np.maximum(row_var, 0.0), np.maximum(col_var, 0.0)))
        out = np.zeros_like(num)
        ok = den > 0.0
        out[ok] = num[ok] / den[ok]
        return np.clip(out, -1.0, 1.0)


def hypotheses(images: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Leakage hypotheses matrix, one row per candidate, one column per image.

    Entry (k, n) is ``HW(a_prefix_n + candidate_k * x_n)`` over the 32-bit
    two's-complement accumulator, where ``a_prefix_n`` sums the known
    weights against image n's pixels. Images are expected pre-filtered for
    protected runs: zeroed skipped pixels contribute nothing to the prefix,
    matching the accumulator-unchanged-on-skip semantics.
    """
    images = np.asarray(images, dtype=np.int64)
    i = cfg.target_weight_index
    if images.ndim != 2 or images.shape[1] <= i:
        raise IndexError("images must have more than target_weight_index pixels")
    a_prev = images[:, :i] @ cfg.known_prefix
    vals = a_prev[None, :] + cfg.candidate_values[:, None] * images[:, i][None, :]
    return hamming_weight32(vals)


def _window_columns(trace_matrix: np.ndarray, window) -> np.ndarray:
    cols = []
    for start, stop in _as_windows(window):
        if stop > trace_matrix.shape[1]:
            raise ValueError("window (%d, %d) exceeds trace length %d" % (start, stop, trace_matrix.shape[1]))
        cols.append(trace_matrix[:, start:stop])
    return np.concatenate(cols, axis=1) if len(cols) > 1 else cols[0]


def _as_matrix(traces) -> np.ndarray:
    if isinstance(traces, AlignedTraceSet):
        return traces.samples
    if isinstance(traces, TraceSet):
        return traces.to_matrix()
    return np.asarray(traces)


def correlate(hyps: np.ndarray, traces, window) -> ScoreMatrix:
    """Pearson correlation of every hypothesis row with every window column."""
    matrix = _as_matrix(traces)
    hyps = np.asarray(hyps)
    if hyps.shape[1] != matrix.shape[0]:
        raise ValueError("hypothesis columns must equal trace count")
    if matrix.shape[0] < 2:
        raise ValueError("need at least 2 traces")
    cols = _window_columns(matrix, window)
    acc = CorrelationAccumulator(hyps.shape[0], cols.shape[1])
    acc.update(hyps, cols)
    return ScoreMatrix(candidates=np.arange(hyps.shape[0]), values=acc.correlation())


def recover_weight(traces, images: np.ndarray, cfg: AttackConfig):
    """Ranked candidate list for one weight; best candidate first.

    Returns ``(ranked_candidates, ranked_scores)``, sorted by descending
    max-|r| summary with ties broken by ascending candidate value.
    """
    hyps = hypotheses(images, cfg)
    scores = correlate(hyps, traces, cfg.window)
    sm = ScoreMatrix(candidates=cfg.candidate_values, values=scores.values)
    return sm.ranking()


def rank_of_true(ranked_candidates: np.ndarray, true_weight: int) -> int:
    """1-based rank of the true weight in a ranked candidate list."""
    hits = np.flatnonzero(np.asarray(ranked_candidates) == int(true_weight))
    if hits.size == 0:
        raise ValueError("true weight %d not in candidate set" % true_weight)
    return int(hits[0]) + 1


def ranks_over_schedule(traces, images: np.ndarray, cfg: AttackConfig, schedule, true_weight: int) -> np.ndarray:
    """True-weight rank after each trace-count checkpoint of one experiment.

    Single pass: traces enter the correlation accumulator in batches
    between checkpoints, and the ranking is snapshotted at each one.
    """
    schedule = [int(t) for t in schedule]
    if schedule != sorted(schedule) or len(set(schedule)) != len(schedule):
        raise ValueError("schedule must be strictly increasing")
    matrix = _as_matrix(traces)
    if schedule[-1] > matrix.shape[0]:
        raise ValueError("schedule exceeds available traces")
    hyps = hypotheses(images, cfg)
    cols = _window_columns(matrix, cfg.window)
    acc = CorrelationAccumulator(hyps.shape[0], cols.shape[1])
    ranks = np.empty(len(schedule), dtype=np.int64)
    prev = 0
    for m, t in enumerate(schedule):
        acc.update(hyps[:, prev:t], cols[prev:t])
        prev = t
        sm = ScoreMatrix(candidates=cfg.candidate_values, values=acc.correlation())
        ranked, _ = sm.ranking()
        ranks[m] = rank_of_true(ranked, true_weight)
    return ranks


@dataclass(frozen=True)
class GECurve:
    """Guessing entropy in bits versus trace count, averaged over experiments.

    ``ge_bits[m] = log2(mean rank of the true weight at trace_counts[m])``
    with 1-based ranks, so 0 bits means the true weight ranked first in
    every experiment.
    """

    trace_counts: tuple[int, ...]
    ge_bits: tuple[float, ...]
    experiment_count: int

    def __post_init__(self):
        tc = tuple(int(t) for t in self.trace_counts)
        if list(tc) != sorted(set(tc)):
            raise ValueError("trace_counts must be strictly increasing")
        ge = tuple(float(g) for g in self.ge_bits)
        if len(ge) != len(tc):
            raise ValueError("one GE value per trace count required")
        if any(g < 0 for g in ge):
            raise ValueError("guessing entropy cannot be negative")
        object.__setattr__(self, "trace_counts", tc)
        object.__setattr__(self, "ge_bits", ge)

    @property
    def final(self) -> float:
        return self.ge_bits[-1]

    def convergence_point(self) -> int | None:
        """Smallest checkpoint from which GE stays at exactly 0 bits."""
        point = None
        for t, g in zip(self.trace_counts, self.ge_bits):
            if g == 0.0:
                if point is None:
                    point = t
            else:
                point = None
        return point


def guessing_entropy(ranks: np.ndarray, trace_counts) -> GECurve:
    """Fold per-experiment rank trajectories into one GE curve.

    ``ranks`` is (experiments, checkpoints) of 1-based ranks.
    """
    r = np.asarray(ranks, dtype=np.float64)
    if r.ndim == 1:
        r = r[None, :]
    if r.shape[0] < 1:
        raise ValueError("need at least one experiment")
    if np.any(r < 1):
        raise ValueError("ranks are 1-based")
    ge = np.log2(r.mean(axis=0))
    return GECurve(
        trace_counts=tuple(int(t) for t in trace_counts),
        ge_bits=tuple(float(g) for g in ge),
        experiment_count=int(r.shape[0]),
    )


def nominal_window(
    iapam: IaPAM,
    variant: PruningVariant,
    lib,
    index: int,
    extended: bool = False,
) -> list[tuple[int, int]]:
    """Sample range(s) of MAC #index in the no-skip trace layout.

    Desynchronized traces can only shift segments earlier, so the nominal
    (everything-executed) layout is the canonical window reference; with
    extended analysis the range of MAC #index+1 joins the window.
    """
    if variant is PruningVariant.UNPROTECTED or variant is PruningVariant.CONTROL_FLOW_FREE:
        seg_lengths = [lib[ImportanceLabel.E].length] * len(iapam)
    else:
        seg_lengths = [
            lib[ImportanceLabel.I].length if iapam[i] else lib[ImportanceLabel.E].length
            for i in range(len(iapam))
        ]
    starts = np.concatenate(([0], np.cumsum(seg_lengths)))
    if not 0 <= index < len(iapam):
        raise IndexError("MAC index out of range")
    windows = [(int(starts[index]), int(starts[index + 1]))]
    if extended and index + 1 < len(iapam):
        windows.append((int(starts[index + 1]), int(starts[index + 2])))
    return windows


def measure_gap_skip_rate(seqs_sets, target_index: int, next_important_index: int) -> float:
    """Fraction of traces whose whole gap between the two MACs was skipped.

    The gap is positions ``target_index+1 .. next_important_index-1``; at
    skip probability one half the expected rate is ``2**-gap_size`` (an
    empty gap gives rate 1). Measured from classified sequences, so it is
    an attacker-side estimate.
    """
    j, i = int(target_index), int(next_important_index)
    if not j < i:
        raise ValueError("target index must precede next important index")
    gap = range(j + 1, i)
    hits = 0
    total = 0
    for seqs in seqs_sets:
        for seq in seqs:
            labels = seq.labels
            total += 1
            if all(labels[g] is ImportanceLabel.S for g in gap):
                hits += 1
    if total == 0:
        raise ValueError("no sequences given")
    return hits / total


def leak_window(
    iapam: IaPAM,
    variant: PruningVariant,
    lib,
    index: int,
    extended: bool = False,
) -> list[tuple[int, int]]:
    """Nominal position of MAC #index's leaking sample, as 1-sample range(s).

    An attacker who has profiled the platform well enough to build the
    segment templates also knows which cycle inside the segment carries the
    accumulator, so on desynchronized traces they correlate against exactly
    that column instead of averaging junk over the whole segment. Extended
    analysis adds MAC #index+1's leak sample.
    """
    segs = nominal_window(iapam, variant, lib, index, extended=extended)
    out = []
    for (start, _), idx in zip(segs, (index, index + 1)):
        if variant is PruningVariant.BRANCHED and iapam[idx]:
            offset = lib[ImportanceLabel.I].leak_offset
        else:
            offset = lib[ImportanceLabel.E].leak_offset
        out.append((start + offset, start + offset + 1))
    return out


@dataclass(frozen=True)
class AdjacencyResult:
    """Outcome of the processed-vs-skipped study for one non-important weight."""

    processed_ge: GECurve
    skipped_ge: GECurve
    gap_skip_rate: float
    processed_rate: float
    gap_size: int


def adjacency_study(
    aligned_sets: list[AlignedTraceSet],
    seqs_sets,
    raw_images_sets,
    filtered_images_sets,
    true_weights: np.ndarray,
    target_index: int,
    next_important_index: int,
    schedule,
    candidates: np.ndarray | None = None,
):
    """Quantify recovery of a non-important weight through its next important MAC.

    The leak of weight j rides on the first important MAC i after it
    whenever the k = i - j - 1 non-important MACs in between were all
    skipped. Traces split by whether MAC j itself executed: the processed
    set can recover w_j from MAC i's window, the skipped set cannot. The
    reported rate is the fraction of traces with the whole gap skipped
    (2^-k in expectation at skip probability one half).

    Hypotheses use the per-trace filtered prefix (exact accumulator) but
    the raw pixel value at position j, since the attacker always knows the
    images they submitted.
    """
    j, i = int(target_index), int(next_important_index)
    if not j < i:
        raise ValueError("target index must precede next important index")
    if candidates is None:
        candidates = default_candidates()
    true_weights = np.asarray(true_weights, dtype=np.int64)

    gap = range(j + 1, i)
    processed_total = 0
    total = 0
    proc_ranks, skip_ranks = [], []
    gap_rate = measure_gap_skip_rate(seqs_sets, j, i)

    for aligned, seqs, raw_images, filt_images in zip(
        aligned_sets, seqs_sets, raw_images_sets, filtered_images_sets
    ):
        labels = [seq.labels for seq in seqs]
        for lab in labels:
            if lab[j] is ImportanceLabel.I:
                raise ValueError("target MAC %d must be non-important" % j)
            if lab[i] is not ImportanceLabel.I:
                raise ValueError("MAC %d must be important" % i)
            if any(lab[g] is ImportanceLabel.I for g in gap):
                raise ValueError("gap between target and next important MAC must be non-important")
        executed_j = np.array([lab[j] is ImportanceLabel.E for lab in labels])
        total += len(labels)
        processed_total += int(executed_j.sum())

        proc_idx = np.flatnonzero(executed_j)
        skip_idx = np.flatnonzero(~executed_j)
        if proc_idx.size == 0 or skip_idx.size == 0:
            raise ValueError("degenerate split: one of the sets is empty")

        images = filt_images.astype(np.int64).copy()
        images[:, j] = raw_images[:, j]
        cfg = AttackConfig(
            target_weight_index=j,
            known_prefix=true_weights[:j],
            window=[aligned.block_range(i)],
            candidate_values=candidates,
        )
        # hypotheses() addresses pixel j as the target column; per-trace
        # filtered prefixes make a_{j-1} exact for every inference.
        for idx_set, sink in ((proc_idx, proc_ranks), (skip_idx, skip_ranks)):
            sub_sched = [t for t in schedule if t <= idx_set.size]
            if not sub_sched:
                raise ValueError("schedule has no checkpoint within the split size")
            sink.append(
                ranks_over_schedule(
                    aligned.samples[idx_set],
                    images[idx_set],
                    cfg,
                    sub_sched,
                    int(true_weights[j]),
                )
            )

    min_proc = min(len(r) for r in proc_ranks)
    min_skip = min(len(r) for r in skip_ranks)
    sched = [int(t) for t in schedule]
    processed_ge = guessing_entropy(np.vstack([r[:min_proc] for r in proc_ranks]), sched[:min_proc])
    skipped_ge = guessing_entropy(np.vstack([r[:min_skip] for r in skip_ranks]), sched[:min_skip])
    return AdjacencyResult(
        processed_ge=processed_ge,
        skipped_ge=skipped_ge,
        gap_skip_rate=gap_rate,
        processed_rate=processed_total / total,
        gap_size=len(gap),
    )
