import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macleak.patterns import ClassifiedSequence, Entry, classify_set
from macleak.preprocess import (
    AlignmentError,
    MalformedClassificationError,
    apply_masks,
    build_pixel_masks,
    concatenate_important,
    derive_iapam,
    partition_and_retain,
    partition_sequences,
)
from macleak.simulate import (
    IaPAM,
    ImportanceLabel,
    PruningVariant,
    SimConfig,
    generate_images,
    simulate_experiment,
)

from conftest import reference_accumulator, reference_hw32

I, E, S = ImportanceLabel.I, ImportanceLabel.E, ImportanceLabel.S


def seq_from_labels(labels, lengths=None):
    entries = []
    pos = 0
    for k, lab in enumerate(labels):
        l = 4 if lengths is None else lengths[k]
        entries.append(Entry(pos, lab, l))
        pos += l
    return ClassifiedSequence(entries=tuple(entries))


class TestPartition:
    def test_single_partition_keeps_everything(self):
        seqs = [seq_from_labels([S, I, E])] * 5
        retained, key, discarded = partition_and_retain(seqs)
        assert retained == [0, 1, 2, 3, 4]
        assert key == (1,)
        assert discarded == []

    def test_majority_wins(self):
        good = [seq_from_labels([E, E, I, S, S, S, I, I, S]) for _ in range(99)]
        bad = [seq_from_labels([E, E, I, S, S, S, I, E, S])]
        retained, key, discarded = partition_and_retain(good + bad)
        assert key == (2, 6, 7)
        assert retained == list(range(99))
        assert discarded == [99]

    def test_tie_breaks_to_smallest_key(self):
        a = [seq_from_labels([I, E]), seq_from_labels([I, E])]
        b = [seq_from_labels([E, I]), seq_from_labels([E, I])]
        retained, key, _ = partition_and_retain(a + b)
        assert key == (0,)
        assert retained == [0, 1]

    def test_zero_noise_run_recovers_true_positions(self, neuron32, iapam32, lib, match_cfg):
        sim = SimConfig(iapam=iapam32, rng_seed=23)
        images = generate_images(80, 32, seed=23)
        traces, _ = simulate_experiment(neuron32, sim, images, lib)
        seqs = classify_set(traces, lib, match_cfg)
        retained, key, discarded = partition_and_retain(seqs)
        assert discarded == []
        assert key == iapam32.positions

    def test_grouping_is_order_independent(self):
        seqs = [seq_from_labels([I, E]), seq_from_labels([E, I]), seq_from_labels([I, E])]
        groups = partition_sequences(seqs)
        assert groups == {(0,): [0, 2], (1,): [1]}


class TestMasks:
    def test_reference_sequence_mask(self):
        seq = seq_from_labels([S, E, I, E, S, S, I, I, S])
        masks = build_pixel_masks([seq], 9)
        assert masks.astype(int).tolist() == [[0, 1, 1, 1, 0, 0, 1, 1, 0]]

    def test_all_important_gives_full_mask(self):
        masks = build_pixel_masks([seq_from_labels([I] * 6)], 6)
        assert masks.all()

    def test_malformed_sequence_rejected(self):
        with pytest.raises(MalformedClassificationError):
            build_pixel_masks([seq_from_labels([I, E])], 9)

    def test_apply_identity_and_zero(self):
        imgs = generate_images(4, 6, seed=1)
        assert np.array_equal(apply_masks(imgs, np.ones((4, 6), dtype=bool)), imgs)
        assert not apply_masks(imgs, np.zeros((4, 6), dtype=bool)).any()

    def test_apply_reference_example(self):
        out = apply_masks(np.array([[7, 9, 3, 5]], dtype=np.uint8), np.array([[1, 0, 1, 0]]))
        assert out.tolist() == [[7, 0, 3, 0]]
        assert out.dtype == np.uint8

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            apply_masks(np.zeros((2, 4)), np.zeros((3, 4)))

    @settings(max_examples=25)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_apply_masks_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        imgs = rng.integers(0, 256, size=(3, 8), dtype=np.uint8)
        masks = rng.random((3, 8)) < 0.5
        once = apply_masks(imgs, masks)
        assert np.array_equal(apply_masks(once, masks), once)


class TestConcatenate:
    def test_row_length_is_count_times_template_length(self, lib):
        from macleak.simulate import Trace, TraceSet

        labels = [E, I, S, I, E, I]
        lengths = [lib[lab].length for lab in labels]
        seq = seq_from_labels(labels, lengths)
        total = sum(lengths)
        traces = TraceSet([Trace(samples=np.arange(total, dtype=np.float32))])
        aligned = concatenate_important(traces, [seq])
        assert aligned.samples.shape == (1, 3 * lib[I].length)
        assert aligned.block_positions == (1, 3, 5)
        assert aligned.block_length == lib[I].length

    def test_no_important_entries_gives_empty_rows(self):
        from macleak.simulate import Trace, TraceSet

        seq = seq_from_labels([E, S, E])
        traces = TraceSet([Trace(samples=np.zeros(12, dtype=np.float32))])
        aligned = concatenate_important(traces, [seq])
        assert aligned.samples.shape == (1, 0)
        assert aligned.block_count == 0

    def test_disagreeing_positions_rejected(self):
        from macleak.simulate import Trace, TraceSet

        traces = TraceSet([Trace(samples=np.zeros(12, dtype=np.float32))] * 2)
        seqs = [seq_from_labels([I, E, E]), seq_from_labels([E, I, E])]
        with pytest.raises(AlignmentError):
            concatenate_important(traces, seqs)

    def test_zero_noise_blocks_carry_template_plus_leak(self, neuron32, iapam32, lib, match_cfg):
        # oracle replay: block k must equal the raw template with the
        # accumulator Hamming weight added at the leak offset
        sim = SimConfig(iapam=iapam32, rng_seed=29)
        images = generate_images(25, 32, seed=29)
        traces, table = simulate_experiment(neuron32, sim, images, lib)
        seqs = classify_set(traces, lib, match_cfg)
        aligned = concatenate_important(traces, seqs)
        t_i = lib[I]
        for r in range(len(traces)):
            accs = reference_accumulator(images[r], neuron32.weights, table.decisions[r])
            for k, pos in enumerate(aligned.block_positions):
                block = aligned.samples[r, k * t_i.length : (k + 1) * t_i.length]
                expected = t_i.samples.astype(np.float64).copy()
                expected[t_i.leak_offset] += reference_hw32(accs[pos])
                assert np.array_equal(block, expected.astype(np.float32))

    def test_equals_simulation_with_non_important_segments_deleted(
        self, neuron32, iapam32, lib, match_cfg
    ):
        # byte-level replay oracle built from ground truth alone
        sim = SimConfig(iapam=iapam32, rng_seed=31)
        images = generate_images(40, 32, seed=31)
        traces, _ = simulate_experiment(neuron32, sim, images, lib)
        seqs = classify_set(traces, lib, match_cfg)
        aligned = concatenate_important(traces, seqs)
        for r, tr in enumerate(traces):
            kept = []
            pos = 0
            for lab in tr.ground_truth:
                l = lib[lab].length
                if lab is I:
                    kept.append(tr.samples[pos : pos + l])
                pos += l
            assert aligned.samples[r].tobytes() == np.concatenate(kept).tobytes()

    def test_block_range_lookup(self, lib):
        from macleak.simulate import Trace, TraceSet

        labels = [E, I, S, I]
        lengths = [lib[lab].length for lab in labels]
        traces = TraceSet([Trace(samples=np.zeros(sum(lengths), dtype=np.float32))])
        aligned = concatenate_important(traces, [seq_from_labels(labels, lengths)])
        assert aligned.block_range(1) == (0, 16)
        assert aligned.block_range(3) == (16, 32)
        with pytest.raises(KeyError):
            aligned.block_range(0)


class TestDeriveIapam:
    def test_reference_two_sequence_example(self):
        seq1 = seq_from_labels([S, E, E, E, S, S, E, E, S])
        seq2 = seq_from_labels([E, E, E, S, S, E, E, E, S])
        assert derive_iapam([seq1, seq2]) == IaPAM([0, 1, 1, 0, 0, 0, 1, 1, 0])

    def test_single_all_executed_sequence(self):
        assert derive_iapam([seq_from_labels([E] * 5)]) == IaPAM([1] * 5)

    def test_important_labels_rejected(self):
        with pytest.raises(ValueError):
            derive_iapam([seq_from_labels([E, I, E])])

    def test_inconsistent_lengths_rejected(self):
        with pytest.raises(MalformedClassificationError):
            derive_iapam([seq_from_labels([E, E]), seq_from_labels([E, E, S])])

    def test_superset_of_true_map_on_zero_noise(self, neuron32, iapam32, lib, match_cfg):
        sim = SimConfig(iapam=iapam32, variant=PruningVariant.CONTROL_FLOW_FREE, rng_seed=37)
        images = generate_images(15, 32, seed=37)
        traces, _ = simulate_experiment(neuron32, sim, images, lib)
        seqs = classify_set(traces, lib, match_cfg)
        derived = derive_iapam(seqs)
        assert np.all(derived.bits[iapam32.bits])

    def test_false_positive_rate_tracks_execute_probability_power(self, neuron9, lib, match_cfg):
        # per non-important bit: P(falsely important) = (1-p)^T
        iapam = IaPAM([0, 1, 0, 0, 1, 0, 0, 0, 0])
        p = 0.5
        runs = 400
        for t_count in (1, 2, 4):
            fp = 0
            trials = 0
            for r in range(runs):
                sim = SimConfig(
                    iapam=iapam,
                    activation_ratio=p,
                    variant=PruningVariant.CONTROL_FLOW_FREE,
                    rng_seed=1000 + r + 10000 * t_count,
                )
                images = generate_images(t_count, 9, seed=r)
                traces, _ = simulate_experiment(neuron9, sim, images, lib)
                derived = derive_iapam(classify_set(traces, lib, match_cfg))
                fp += int(np.sum(derived.bits & ~iapam.bits))
                trials += int(np.sum(~iapam.bits))
            expected = (1 - p) ** t_count
            sigma = np.sqrt(expected * (1 - expected) / trials)
            assert abs(fp / trials - expected) < 4 * sigma + 1e-9
