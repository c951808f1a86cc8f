"""Classification validation, pixel filtering and trace realignment.

The attacker-side steps between raw classification and the correlation
attack: keep only the traces whose classified important positions agree
(largest partition wins), mask out skipped pixels from the input images,
concatenate the important-MAC segments into vertically aligned rows, and,
for the control-flow-free variant, derive the importance map from
executed/skipped sequences alone.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .patterns import ClassifiedSequence
from .simulate import IaPAM, ImportanceLabel, TraceSet

__all__ = [
    "MalformedClassificationError",
    "AlignmentError",
    "AlignedTraceSet",
    "partition_sequences",
    "partition_and_retain",
    "build_pixel_masks",
    "apply_masks",
    "concatenate_important",
    "derive_iapam",
]


class MalformedClassificationError(ValueError):
    """A classified sequence does not cover the expected MAC count."""


class AlignmentError(ValueError):
    """Sequences disagree on important-MAC structure; rows cannot align."""


@dataclass(frozen=True)
class AlignedTraceSet:
    """Important-MAC segments concatenated per trace, vertically aligned.

    Column block ``k`` spans ``[k * block_length, (k+1) * block_length)``
    and holds the k-th important MAC (raster order) of every row.
    """

    samples: np.ndarray
    block_positions: tuple[int, ...]
    block_length: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32)
        if s.ndim != 2:
            raise AlignmentError("samples must be a 2-D matrix")
        if s.shape[1] != len(self.block_positions) * self.block_length:
            raise AlignmentError("row length must equal block count x block length")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def trace_count(self) -> int:
        return int(self.samples.shape[0])

    @property
    def block_count(self) -> int:
        return len(self.block_positions)

    def block_range(self, pixel_position: int) -> tuple[int, int]:
        """Column range of the block holding the given important pixel."""
        try:
            k = self.block_positions.index(int(pixel_position))
        except ValueError:
            raise KeyError("pixel %d is not an aligned important MAC" % pixel_position) from None
        return k * self.block_length, (k + 1) * self.block_length


def partition_sequences(seqs: list[ClassifiedSequence]) -> dict[tuple[int, ...], list[int]]:
    """Group trace indices by their classified important positions."""
    groups: dict[tuple[int, ...], list[int]] = defaultdict(list)
    for idx, seq in enumerate(seqs):
        groups[seq.i_positions].append(idx)
    return dict(groups)


def partition_and_retain(seqs: list[ClassifiedSequence]):
    """Keep the largest agreement class of important-position signatures.

    Returns ``(retained, key, discarded)``: the member trace indices of the
    largest partition, its important-position key, and everything else.
    Equal-sized partitions resolve to the lexicographically smallest key so
    repeated runs report identically.
    """
    if not seqs:
        raise ValueError("no sequences to partition")
    groups = partition_sequences(seqs)
    best_key = min(groups, key=lambda k: (-len(groups[k]), k))
    retained = sorted(groups[best_key])
    discarded = sorted(set(range(len(seqs))) - set(retained))
    return retained, best_key, discarded


def build_pixel_masks(seqs: list[ClassifiedSequence], pixel_count: int) -> np.ndarray:
    """Per-trace processed-pixel masks from classified sequences.

    Mask bit set = pixel was processed this inference (label I or E),
    clear = skipped. Raster-scan order is assumed: entry k describes
    pixel k, so every sequence must have exactly ``pixel_count`` entries.
    """
    masks = np.zeros((len(seqs), pixel_count), dtype=bool)
    for row, seq in zip(masks, seqs):
        if len(seq.entries) != pixel_count:
            raise MalformedClassificationError(
                "sequence has %d entries, expected %d" % (len(seq.entries), pixel_count)
            )
        row[:] = [e.label is not ImportanceLabel.S for e in seq.entries]
    return masks


def apply_masks(images: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Zero out skipped pixels; processed pixels pass through unchanged."""
    images = np.asarray(images)
    masks = np.asarray(masks, dtype=bool)
    if images.shape != masks.shape:
        raise ValueError("need one mask per image with matching pixel count")
    return np.where(masks, images, 0).astype(images.dtype)


def concatenate_important(traces: TraceSet, seqs: list[ClassifiedSequence]) -> AlignedTraceSet:
    """Concatenate the I-labeled sample ranges of each trace, in order.

    All sequences must report the same important positions with identical
    segment lengths (guaranteed after partitioning); rows then align
    column block by column block. Rejects mismatches instead of padding,
    since padding would silently corrupt the correlation columns.
    """
    if len(traces) != len(seqs):
        raise AlignmentError("need one classified sequence per trace")
    if not seqs:
        raise AlignmentError("nothing to concatenate")

    key = seqs[0].i_positions
    lengths = tuple(e.length for e in seqs[0].entries if e.label is ImportanceLabel.I)
    if len(set(lengths)) > 1:
        raise AlignmentError("important segments have heterogeneous lengths")
    block_length = lengths[0] if lengths else 0

    rows = np.empty((len(traces), len(key) * block_length), dtype=np.float32)
    for r, (trace, seq) in enumerate(zip(traces, seqs)):
        if seq.i_positions != key:
            raise AlignmentError("trace %d disagrees on important positions" % r)
        pieces = [
            trace.samples[e.start : e.start + e.length]
            for e in seq.entries
            if e.label is ImportanceLabel.I
        ]
        rows[r] = np.concatenate(pieces) if pieces else np.empty(0, dtype=np.float32)
    return AlignedTraceSet(samples=rows, block_positions=key, block_length=block_length)


def derive_iapam(seqs: list[ClassifiedSequence]) -> IaPAM:
    """Recover the importance map from executed/skipped sequences.

    For the control-flow-free variant only executed-vs-skipped is visible;
    a position is marked important iff it is executed in every sequence.
    The result can only over-approximate the true map (important MACs are
    never skipped), and converges to it as the trace count grows.
    """
    if not seqs:
        raise ValueError("no sequences given")
    width = len(seqs[0].entries)
    bits = np.ones(width, dtype=bool)
    for idx, seq in enumerate(seqs):
        if len(seq.entries) != width:
            raise MalformedClassificationError(
                "sequence %d has %d entries, expected %d" % (idx, len(seq.entries), width)
            )
        for k, e in enumerate(seq.entries):
            if e.label is ImportanceLabel.I:
                raise ValueError("control-flow-free sequences cannot contain I labels")
            if e.label is ImportanceLabel.S:
                bits[k] = False
    return IaPAM(bits)
