"""Segment templates and sliding-window MAC classification.

A trace is parsed greedily: at the current sample, all three templates are
scored against the slice of their own length; the best-scoring template is
accepted if it clears the confidence threshold, consuming its length,
otherwise the cursor advances by one sample. Score ties prefer I over E
over S, so an ambiguous window is resolved toward keeping attack points.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .simulate import ImportanceLabel, Trace, TraceSet

__all__ = [
    "Metric",
    "PatternTemplate",
    "PatternLibrary",
    "MatchConfig",
    "Entry",
    "ClassifiedSequence",
    "similarity",
    "classify_trace",
    "classify_set",
    "calibrate_templates",
    "estimate_templates_from_traces",
    "default_library",
    "default_match_config",
]

# Fixed preference order for score ties; lower wins.
_TIE_PRIORITY = {ImportanceLabel.I: 0, ImportanceLabel.E: 1, ImportanceLabel.S: 2}

_NO_MATCH = -np.inf


class Metric(enum.Enum):
    NORMALIZED_CROSS_CORRELATION = "ncc"
    NEGATIVE_EUCLIDEAN = "neg_euclidean"


@dataclass(frozen=True)
class PatternTemplate:
    """Fixed-length reference segment for one importance label.

    ``leak_offset`` is the sample index inside the segment where the
    simulator injects the data-dependent Hamming-weight contribution.
    """

    label: ImportanceLabel
    samples: np.ndarray
    leak_offset: int = 0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("template samples must be a non-empty vector")
        if not np.all(np.isfinite(s)):
            raise ValueError("template samples must be finite")
        if np.ptp(s) == 0:
            raise ValueError("template must not be constant")
        if not 0 <= int(self.leak_offset) < s.size:
            raise ValueError("leak_offset out of range")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def length(self) -> int:
        return int(self.samples.size)


class PatternLibrary:
    """Exactly one template per label, fixed lengths per label."""

    def __init__(self, templates):
        by_label = {}
        for t in templates:
            if t.label in by_label:
                raise ValueError("duplicate template for label %s" % t.label.value)
            by_label[t.label] = t
        missing = [lab.value for lab in ImportanceLabel if lab not in by_label]
        if missing:
            raise ValueError("missing template(s) for label(s): %s" % ", ".join(missing))
        self._by_label = by_label

    def __getitem__(self, label: ImportanceLabel) -> PatternTemplate:
        return self._by_label[label]

    def __iter__(self):
        return iter(self._by_label.values())

    @property
    def templates(self) -> tuple[PatternTemplate, ...]:
        return tuple(self._by_label[lab] for lab in ImportanceLabel)

    @property
    def lengths(self) -> dict[ImportanceLabel, int]:
        return {lab: t.length for lab, t in self._by_label.items()}

    @property
    def min_length(self) -> int:
        return min(t.length for t in self)

    def pairwise_scores(self, metric: Metric = Metric.NORMALIZED_CROSS_CORRELATION):
        """Cross-similarity of every template pair, truncated to the shorter.

        Used to verify that the three shapes stay distinguishable under the
        configured metric at zero noise.
        """
        out = {}
        for a in self:
            for b in self:
                if a.label is b.label:
                    continue
                n = min(a.length, b.length)
                cut = PatternTemplate(b.label, b.samples[:n], leak_offset=0)
                out[(a.label, b.label)] = similarity(a.samples[:n], cut, metric)
        return out


@dataclass(frozen=True)
class MatchConfig:
    """Pattern-matching parameters: confidence threshold and metric."""

    threshold: float
    metric: Metric = Metric.NORMALIZED_CROSS_CORRELATION

    def __post_init__(self):
        if not isinstance(self.metric, Metric):
            object.__setattr__(self, "metric", Metric(self.metric))
        t = float(self.threshold)
        if self.metric is Metric.NORMALIZED_CROSS_CORRELATION and not -1.0 <= t <= 1.0:
            raise ValueError("NCC threshold must lie in [-1, 1]")
        if self.metric is Metric.NEGATIVE_EUCLIDEAN and t > 0.0:
            raise ValueError("negative-Euclidean threshold must be <= 0")


class Entry(NamedTuple):
    start: int
    label: ImportanceLabel
    length: int


@dataclass(frozen=True)
class ClassifiedSequence:
    """Ordered, non-overlapping matched segments of one trace."""

    entries: tuple[Entry, ...]
    unmatched_samples: int = 0

    @property
    def labels(self) -> tuple[ImportanceLabel, ...]:
        return tuple(e.label for e in self.entries)

    @property
    def i_positions(self) -> tuple[int, ...]:
        """Ordinal positions (entry indices) classified as important."""
        return tuple(k for k, e in enumerate(self.entries) if e.label is ImportanceLabel.I)

    def __len__(self):
        return len(self.entries)


def similarity(slice_, template: PatternTemplate, metric: Metric) -> float:
    """Score one trace slice against a template.

    Normalized cross-correlation lies in [-1, 1] and is invariant to
    positive affine amplitude transforms of the slice; negative Euclidean
    is minus the L2 distance. A zero-variance slice scores 0 under NCC.
    """
    x = np.asarray(slice_, dtype=np.float64)
    t = template.samples.astype(np.float64)
    if x.shape != t.shape:
        raise ValueError("slice length %d != template length %d" % (x.size, t.size))
    if metric is Metric.NEGATIVE_EUCLIDEAN:
        return float(-np.linalg.norm(x - t))
    xc = x - x.mean()
    tc = t - t.mean()
    den = np.sqrt((xc @ xc) * (tc @ tc))
    if den == 0.0:
        return 0.0
    return float(np.clip((xc @ tc) / den, -1.0, 1.0))


def _sliding_scores(samples: np.ndarray, template: PatternTemplate, metric: Metric) -> np.ndarray:
    """Template score at every start position; -inf where it cannot fit."""
    n = samples.size
    l = template.length
    out = np.full(n, _NO_MATCH, dtype=np.float64)
    if l > n:
        return out
    win = np.lib.stride_tricks.sliding_window_view(samples, l).astype(np.float64)
    t = template.samples.astype(np.float64)
    if metric is Metric.NEGATIVE_EUCLIDEAN:
        d = win - t
        out[: n - l + 1] = -np.sqrt(np.einsum("ij,ij->i", d, d))
        return out
    wc = win - win.mean(axis=1, keepdims=True)
    tc = t - t.mean()
    num = wc @ tc
    den = np.sqrt(np.einsum("ij,ij->i", wc, wc) * (tc @ tc))
    r = np.zeros(n - l + 1)
    ok = den > 0.0
    r[ok] = np.clip(num[ok] / den[ok], -1.0, 1.0)
    out[: n - l + 1] = r
    return out


def _select_match(scored: list[tuple[float, int, ImportanceLabel]]):
    """Argmax over (score, length, label) triples with the fixed tie order."""
    return max(scored, key=lambda t: (t[0], -_TIE_PRIORITY[t[2]]))


def _walk(score_by_label, length_by_label, n: int, threshold: float) -> ClassifiedSequence:
    entries = []
    unmatched = 0
    s = 0
    while s < n:
        best = _select_match(
            [(float(score_by_label[lab][s]), length_by_label[lab], lab) for lab in ImportanceLabel]
        )
        if best[0] >= threshold:
            entries.append(Entry(s, best[2], best[1]))
            s += best[1]
        else:
            unmatched += 1
            s += 1
    return ClassifiedSequence(entries=tuple(entries), unmatched_samples=unmatched)


def classify_trace(trace, lib: PatternLibrary, cfg: MatchConfig) -> ClassifiedSequence:
    """Greedy sliding-window classification of one trace.

    At each sample the three templates are scored against the slice of
    their own length (a template that no longer fits scores as
    non-matching). The highest-scoring template is accepted when its score
    reaches ``cfg.threshold``; the cursor then jumps past the matched
    segment, otherwise it advances one sample and that sample counts as
    unmatched.
    """
    samples = np.asarray(trace.samples if isinstance(trace, Trace) else trace, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("trace is empty")
    scores = {lab: _sliding_scores(samples, lib[lab], cfg.metric) for lab in ImportanceLabel}
    lengths = {lab: lib[lab].length for lab in ImportanceLabel}
    return _walk(scores, lengths, samples.size, float(cfg.threshold))


def classify_set(traces: TraceSet, lib: PatternLibrary, cfg: MatchConfig) -> list[ClassifiedSequence]:
    return [classify_trace(t, lib, cfg) for t in traces]


def _label_error(seq: ClassifiedSequence, truth) -> int:
    """Per-MAC label mismatches; a derailed parse counts fully wrong."""
    if len(seq.entries) != len(truth):
        return len(truth)
    return sum(1 for e, g in zip(seq.entries, truth) if e.label is not g)


def default_threshold_grid(metric: Metric, scores: np.ndarray | None = None) -> np.ndarray:
    """Calibration grid: fixed NCC steps, or score quantiles for distances."""
    if metric is Metric.NORMALIZED_CROSS_CORRELATION:
        return np.round(np.arange(0.05, 1.00, 0.05), 2)
    if scores is None or scores.size == 0:
        raise ValueError("negative-Euclidean grid needs observed scores")
    qs = np.quantile(scores, np.arange(0.05, 1.00, 0.05))
    return np.unique(np.minimum(qs, 0.0))


def calibrate_templates(
    training: TraceSet,
    lib: PatternLibrary,
    cfg: MatchConfig,
    thresholds=None,
) -> tuple[MatchConfig, float]:
    """Pick the threshold minimizing per-MAC label error on ground truth.

    Sweeps ``thresholds`` (default grid per metric), classifies every
    training trace at each value and compares against the simulator's
    ground-truth labels. Returns the best config and its error rate; when
    several thresholds tie, the median of the tied values wins, keeping
    the choice away from the edges of the usable band.
    """
    if len(training) == 0:
        raise ValueError("empty training set")
    if any(t.ground_truth is None for t in training):
        raise ValueError("training traces must carry ground truth")

    per_trace = []
    finite = []
    for t in training:
        samples = np.asarray(t.samples, dtype=np.float64)
        sc = {lab: _sliding_scores(samples, lib[lab], cfg.metric) for lab in ImportanceLabel}
        per_trace.append((sc, samples.size, t.ground_truth))
        for arr in sc.values():
            finite.append(arr[np.isfinite(arr)])
    if thresholds is None:
        thresholds = default_threshold_grid(cfg.metric, np.concatenate(finite))

    lengths = {lab: lib[lab].length for lab in ImportanceLabel}
    total = sum(len(truth) for _, _, truth in per_trace)
    rates = []
    for thr in np.sort(np.asarray(thresholds, dtype=np.float64)):
        errors = 0
        for sc, n, truth in per_trace:
            errors += _label_error(_walk(sc, lengths, n, float(thr)), truth)
        rates.append((errors / total, float(thr)))
    best_err = min(r for r, _ in rates)
    tied = [thr for r, thr in rates if r == best_err]
    best_thr = tied[len(tied) // 2]
    return MatchConfig(threshold=best_thr, metric=cfg.metric), float(best_err)


def estimate_templates_from_traces(training: TraceSet, lib: PatternLibrary) -> PatternLibrary:
    """Alternative template source: average labeled segments of real traces.

    Uses the ground-truth label sequence to cut each training trace at the
    library's segment lengths and averages all segments per label. Lengths
    and leak offsets are inherited from ``lib``.
    """
    if len(training) == 0:
        raise ValueError("empty training set")
    sums = {lab: np.zeros(lib[lab].length, dtype=np.float64) for lab in ImportanceLabel}
    counts = {lab: 0 for lab in ImportanceLabel}
    for t in training:
        if t.ground_truth is None:
            raise ValueError("training traces must carry ground truth")
        pos = 0
        for lab in t.ground_truth:
            l = lib[lab].length
            sums[lab] += t.samples[pos : pos + l]
            counts[lab] += 1
            pos += l
    estimated = []
    for lab in ImportanceLabel:
        if counts[lab] == 0:
            estimated.append(lib[lab])
        else:
            estimated.append(
                PatternTemplate(lab, (sums[lab] / counts[lab]).astype(np.float32), lib[lab].leak_offset)
            )
    return PatternLibrary(estimated)


# Canonical segment shapes. Executed shapes are longer than the skip shape,
# so every skipped MAC shortens the trace and desynchronizes what follows;
# shapes are pairwise dissimilar under NCC and have enough centered energy
# that per-sample noise leaves self-matches comfortably above threshold.
# Leak offsets sit early in the segment so that a one-skip shift moves the
# leaking sample out of the segment's nominal window. The important shape
# additionally keeps sample leak_offset+8 (one skip-shift past the leak)
# near the mean leaking level, so a single preceding skip desynchronizes
# the leak without flooding its column with amplitude jumps.
_IMAC_SHAPE = [12.0, 34.0, 78.0, 122.0, 148.0, 130.0, 32.0, 24.0,
               60.0, 118.0, 155.0, 140.0, 96.0, 64.0, 50.0, 10.0]
_EXEC_SHAPE = [8.0, 22.0, 45.0, 76.0, 105.0, 124.0, 250.0, 92.0,
               60.0, 34.0, 18.0, 10.0, 6.0, 4.0]
_SKIP_SHAPE = [95.0, 46.0, 10.0, 8.0, 44.0, 96.0]


def default_library() -> PatternLibrary:
    """Built-in template set: 16-sample I, 14-sample E, 6-sample S."""
    return PatternLibrary(
        [
            PatternTemplate(ImportanceLabel.I, np.array(_IMAC_SHAPE, dtype=np.float32), leak_offset=6),
            PatternTemplate(ImportanceLabel.E, np.array(_EXEC_SHAPE, dtype=np.float32), leak_offset=5),
            PatternTemplate(ImportanceLabel.S, np.array(_SKIP_SHAPE, dtype=np.float32), leak_offset=2),
        ]
    )


def default_match_config() -> MatchConfig:
    """NCC at 0.75, comfortably below the zero-noise self-match scores."""
    return MatchConfig(threshold=0.75)
