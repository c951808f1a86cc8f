import numpy as np
import pytest

from macleak import tracestore
from macleak.patterns import default_library
from macleak.simulate import (
    ImportanceLabel,
    SimConfig,
    SkipTable,
    Trace,
    TraceSet,
    generate_images,
    simulate_experiment,
)
from macleak.tracestore import (
    BadMagicError,
    ConfigHashMismatchError,
    TraceStoreError,
    TrailingDataError,
    TruncatedPayloadError,
    VersionMismatchError,
    export_csv,
    export_ge_curves,
    iter_traces,
    read_images,
    read_skiptable,
    read_templates,
    read_traces,
    strip_ground_truth,
    write_images,
    write_skiptable,
    write_templates,
    write_traces,
)

I, E, S = ImportanceLabel.I, ImportanceLabel.E, ImportanceLabel.S


@pytest.fixture()
def ragged_set(neuron9, iapam9, lib):
    sim = SimConfig(iapam=iapam9, activation_ratio=0.5, noise_sigma=1.5, rng_seed=61)
    images = generate_images(12, 9, seed=61)
    traces, _ = simulate_experiment(neuron9, sim, images, lib)
    return traces


@pytest.fixture()
def fixed_set():
    rng = np.random.default_rng(62)
    return TraceSet(
        [
            Trace(samples=rng.normal(size=20).astype(np.float32), image_index=i, ground_truth=(I, E, S))
            for i in range(5)
        ]
    )


class TestTraceRoundTrip:
    def test_samples_survive_byte_identically(self, tmp_path, ragged_set):
        path = tmp_path / "t.mpbtrc"
        write_traces(ragged_set, path, metadata={"seed": "61"})
        res = read_traces(path)
        assert res.ragged
        assert res.metadata["seed"] == "61"
        assert res.metadata["ground_truth"] == "1"
        for a, b in zip(ragged_set, res.traces):
            assert a.samples.tobytes() == b.samples.tobytes()
            assert a.image_index == b.image_index
            assert a.ground_truth == b.ground_truth

    @pytest.mark.parametrize("gt", [True, False])
    def test_file_reproduces_byte_identically(self, tmp_path, ragged_set, gt):
        p1, p2 = tmp_path / "a.mpbtrc", tmp_path / "b.mpbtrc"
        write_traces(ragged_set, p1, metadata={"config_hash": "x"}, include_ground_truth=gt)
        res = read_traces(p1)
        write_traces(res.traces, p2, metadata={"config_hash": "x"}, ragged=res.ragged,
                     include_ground_truth=gt)
        assert p1.read_bytes() == p2.read_bytes()

    def test_fixed_length_mode(self, tmp_path, fixed_set):
        path = tmp_path / "f.mpbtrc"
        write_traces(fixed_set, path)
        res = read_traces(path)
        assert not res.ragged
        assert all(len(t) == 20 for t in res.traces)

    def test_fixed_mode_rejects_ragged_data(self, tmp_path, ragged_set):
        with pytest.raises(ValueError):
            write_traces(ragged_set, tmp_path / "x.mpbtrc", ragged=False)

    def test_golden_header_bytes(self, tmp_path):
        # pins endianness and field order of the on-disk format
        ts = TraceSet([Trace(samples=np.array([1.0, 2.0], dtype=np.float32), image_index=3)])
        path = tmp_path / "g.mpbtrc"
        write_traces(ts, path, metadata={})
        blob = path.read_bytes()
        assert blob[:8] == b"MPBTRC01"
        assert blob[8:10] == b"\x01\x00"          # version 1 LE
        assert blob[10:12] == b"\x00\x00"          # fixed, no ground truth
        assert blob[12:16] == b"\x01\x00\x00\x00"  # one trace
        assert blob[16:20] == b"\x00\x00\x00\x00"  # pixel_count 0
        meta = b"ground_truth=0\n"
        assert blob[20:24] == len(meta).to_bytes(4, "little")
        assert blob[24 : 24 + len(meta)] == meta
        rest = blob[24 + len(meta) :]
        assert rest[:4] == b"\x02\x00\x00\x00"     # sample count 2
        assert rest[4:12] == np.array([1.0, 2.0], dtype="<f4").tobytes()
        assert rest[12:16] == b"\x03\x00\x00\x00"  # image index 3


class TestTraceErrors:
    def test_bad_magic(self, tmp_path, fixed_set):
        path = tmp_path / "bad.mpbtrc"
        write_traces(fixed_set, path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            read_traces(path)

    def test_version_mismatch(self, tmp_path, fixed_set):
        path = tmp_path / "v.mpbtrc"
        write_traces(fixed_set, path)
        blob = bytearray(path.read_bytes())
        blob[8] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError):
            read_traces(path)

    def test_truncated_payload(self, tmp_path, fixed_set):
        path = tmp_path / "t.mpbtrc"
        write_traces(fixed_set, path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(TruncatedPayloadError):
            read_traces(path)

    def test_trailing_bytes(self, tmp_path, fixed_set):
        path = tmp_path / "x.mpbtrc"
        write_traces(fixed_set, path)
        path.write_bytes(path.read_bytes() + b"zz")
        with pytest.raises(TrailingDataError):
            read_traces(path)

    def test_errors_are_distinct_classes(self):
        classes = {BadMagicError, VersionMismatchError, TruncatedPayloadError, TrailingDataError}
        assert len(classes) == 4
        assert all(issubclass(c, TraceStoreError) for c in classes)

    def test_config_hash_check(self, tmp_path, fixed_set):
        path = tmp_path / "h.mpbtrc"
        write_traces(fixed_set, path, metadata={"config_hash": "aaa"})
        read_traces(path, expect_config_hash="aaa")
        with pytest.raises(ConfigHashMismatchError):
            read_traces(path, expect_config_hash="bbb")


class TestGroundTruthHandling:
    def test_strip_removes_section(self, tmp_path, ragged_set):
        full, lean = tmp_path / "full.mpbtrc", tmp_path / "lean.mpbtrc"
        write_traces(ragged_set, full, metadata={"config_hash": "c"})
        strip_ground_truth(full, lean)
        assert lean.stat().st_size < full.stat().st_size
        res = read_traces(lean)
        assert res.metadata["ground_truth"] == "0"
        assert all(t.ground_truth is None for t in res.traces)
        for a, b in zip(ragged_set, res.traces):
            assert a.samples.tobytes() == b.samples.tobytes()

    def test_attacker_view_read_skips_ground_truth(self, tmp_path, ragged_set):
        path = tmp_path / "t.mpbtrc"
        write_traces(ragged_set, path)
        res = read_traces(path, load_ground_truth=False)
        assert all(t.ground_truth is None for t in res.traces)


class TestStreaming:
    @pytest.mark.parametrize("fixture", ["ragged_set", "fixed_set"])
    def test_iter_matches_bulk_read(self, tmp_path, fixture, request):
        traces = request.getfixturevalue(fixture)
        path = tmp_path / "s.mpbtrc"
        write_traces(traces, path)
        streamed = list(iter_traces(path))
        assert len(streamed) == len(traces)
        for a, b in zip(traces, streamed):
            assert a.samples.tobytes() == b.samples.tobytes()
            assert a.image_index == b.image_index

    def test_paper_scale_roundtrip(self, tmp_path):
        # 50k ragged traces of ~32 segments stream back identically
        rng = np.random.default_rng(63)
        lengths = rng.integers(300, 480, size=50000)
        ts = TraceSet(
            [Trace(samples=np.zeros(int(l), dtype=np.float32), image_index=i)
             for i, l in enumerate(lengths)]
        )
        path = tmp_path / "big.mpbtrc"
        write_traces(ts, path)
        total = 0
        for i, tr in enumerate(iter_traces(path)):
            total += len(tr)
            assert len(tr) == int(lengths[i])
        assert total == int(lengths.sum())


class TestOtherContainers:
    def test_images_roundtrip(self, tmp_path):
        imgs = generate_images(64, 32, seed=64)
        path = tmp_path / "i.mpbimg"
        write_images(imgs, path)
        assert np.array_equal(read_images(path), imgs)
        blob = bytearray(path.read_bytes())
        blob[2] ^= 0x55
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            read_images(path)

    def test_templates_roundtrip(self, tmp_path, lib):
        path = tmp_path / "t.mpbtpl"
        write_templates(lib, path)
        back = read_templates(path)
        for lab in ImportanceLabel:
            assert np.array_equal(back[lab].samples, lib[lab].samples)
            assert back[lab].leak_offset == lib[lab].leak_offset

    @pytest.mark.parametrize("cols", [5, 8, 13])
    def test_skiptable_roundtrip(self, tmp_path, cols):
        rng = np.random.default_rng(65)
        table = SkipTable(rng.random((17, cols)) < 0.5)
        path = tmp_path / "s.mpbskp"
        write_skiptable(table, path)
        assert np.array_equal(read_skiptable(path).decisions, table.decisions)


class TestCsv:
    def test_empty_rows_give_header_only(self, tmp_path):
        path = tmp_path / "e.csv"
        export_csv(path, ("a", "b"), [])
        assert path.read_text() == "a,b\n"

    def test_ge_curve_rows(self, tmp_path):
        from macleak.cpa import GECurve

        curve = GECurve(trace_counts=(10, 20, 30), ge_bits=(1.5, 0.5, 0.0), experiment_count=5)
        path = tmp_path / "g.csv"
        export_ge_curves(path, {3: curve})
        lines = path.read_text().splitlines()
        assert lines[0] == "weight_index,trace_count,ge_bits,experiment_count"
        assert len(lines) == 4
        assert lines[3] == "3,30,0.0,5"

    def test_reexport_is_byte_identical(self, tmp_path):
        rows = [(1, 0.1 + 0.2, "x"), (2, 1e-9, "y")]
        p1, p2 = tmp_path / "1.csv", tmp_path / "2.csv"
        export_csv(p1, ("i", "v", "s"), rows)
        export_csv(p2, ("i", "v", "s"), rows)
        assert p1.read_bytes() == p2.read_bytes()
        assert p1.read_text().endswith("\n")
