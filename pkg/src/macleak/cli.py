"""Command-line pipeline: simulate, calibrate, classify, preprocess, attack,
report, cff-study.

Each stage reads the previous stage's artifacts from the output directory,
verifies they belong to the same configuration (config hash check) and
writes its own artifacts plus a CSV summary, so a full evaluation is a
sequence of independently re-runnable, idempotent steps::

    macleak simulate   -c config.json -o out/
    macleak calibrate  -o out/
    macleak classify   -o out/
    macleak preprocess -o out/
    macleak attack     -o out/ --mode protected
    macleak attack     -o out/ --mode unprotected
    macleak attack     -o out/ --mode circumvented
    macleak report     -o out/

Exit codes: 0 success, 2 invalid configuration or usage, 3 missing or
mismatched artifacts, 4 malformed container files, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import cpa, patterns, preprocess, tracestore
from .experiments import (
    ExperimentSpec,
    default_spec,
    important_targets,
    TARGET_WEIGHTS,
)
from .patterns import MatchConfig, Metric, default_library
from .simulate import ConfigError, ImportanceLabel, PruningVariant, simulate_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACTS = 3
EXIT_FORMAT = 4


class MissingArtifactError(FileNotFoundError):
    """A required upstream artifact is absent from the output directory."""


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_spec(args) -> ExperimentSpec:
    if args.config is None:
        spec = default_spec()
    else:
        spec = ExperimentSpec.from_json(Path(args.config).read_text())
    if getattr(args, "seed", None) is not None:
        spec = dataclasses.replace(
            spec, sim=dataclasses.replace(spec.sim, rng_seed=int(args.seed))
        )
    return spec


def _spec_from_manifest(outdir: Path) -> tuple[ExperimentSpec, dict]:
    manifest_path = outdir / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifactError("no manifest.json in %s; run `simulate` first" % outdir)
    manifest = json.loads(manifest_path.read_text())
    spec = ExperimentSpec.from_dict(manifest["config"])
    if spec.config_hash() != manifest["config_hash"]:
        raise tracestore.ConfigHashMismatchError("manifest config hash is inconsistent")
    return spec, manifest


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError("missing artifact %s" % path)
    return path


def _trace_path(outdir: Path, experiment: int, neuron: int) -> Path:
    return outdir / ("traces_e%d_n%d.mpbtrc" % (experiment, neuron))


def _match_config(outdir: Path) -> MatchConfig:
    path = _require(outdir / "match_config.json")
    data = json.loads(path.read_text())
    return MatchConfig(threshold=float(data["threshold"]), metric=Metric(data["metric"]))


def cmd_simulate(args) -> int:
    """Generate images, traces and skip tables for every experiment/neuron."""
    spec = _load_spec(args)
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    lib = default_library()
    chash = spec.config_hash()

    tracestore.write_templates(lib, outdir / "templates.mpbtpl")
    artifacts = {"templates.mpbtpl": _sha256(outdir / "templates.mpbtpl")}
    for e in range(spec.experiment_count):
        images = spec.images_for(e)
        img_path = outdir / ("images_e%d.mpbimg" % e)
        tracestore.write_images(images, img_path)
        artifacts[img_path.name] = _sha256(img_path)
        for n, neuron in enumerate(spec.neurons):
            sim = spec.sim_for(e, n)
            traces, skips = simulate_experiment(neuron, sim, images, lib)
            tpath = _trace_path(outdir, e, n)
            tracestore.write_traces(
                traces,
                tpath,
                metadata={"config_hash": chash, "experiment": str(e), "neuron": str(n),
                          "variant": spec.sim.variant.value, "seed": str(sim.rng_seed)},
            )
            spath = outdir / ("skips_e%d_n%d.mpbskp" % (e, n))
            tracestore.write_skiptable(skips, spath)
            artifacts[tpath.name] = _sha256(tpath)
            artifacts[spath.name] = _sha256(spath)
    manifest = {"config": spec.to_dict(), "config_hash": chash, "artifacts": artifacts}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print("simulated %d experiment(s) x %d neuron(s), %d traces each -> %s"
          % (spec.experiment_count, len(spec.neurons), spec.trace_count, outdir))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    """Pick the matching threshold that minimizes label error on training traces."""
    outdir = Path(args.output_dir)
    spec, _ = _spec_from_manifest(outdir)
    lib = tracestore.read_templates(_require(outdir / "templates.mpbtpl"))
    res = tracestore.read_traces(_trace_path(outdir, 0, 0), expect_config_hash=spec.config_hash())
    training = res.traces.subset(range(min(len(res.traces), int(args.training_traces))))
    cfg, err = patterns.calibrate_templates(training, lib, MatchConfig(0.0, Metric(args.metric)))
    (outdir / "match_config.json").write_text(
        json.dumps({"threshold": cfg.threshold, "metric": cfg.metric.value,
                    "training_error_rate": err}, indent=2, sort_keys=True) + "\n"
    )
    tracestore.export_csv(
        outdir / "calibration.csv",
        ("metric", "threshold", "training_error_rate", "training_traces"),
        [(cfg.metric.value, cfg.threshold, err, len(training))],
    )
    print("calibrated threshold %.4f (%s), training error %.5f" % (cfg.threshold, cfg.metric.value, err))
    return EXIT_OK


def cmd_classify(args) -> int:
    """Classify every trace of every experiment into I/E/S sequences."""
    outdir = Path(args.output_dir)
    spec, _ = _spec_from_manifest(outdir)
    lib = tracestore.read_templates(_require(outdir / "templates.mpbtpl"))
    mcfg = _match_config(outdir)
    chash = spec.config_hash()
    summary = []
    for e in range(spec.experiment_count):
        for n in range(len(spec.neurons)):
            res = tracestore.read_traces(_trace_path(outdir, e, n), load_ground_truth=False,
                                         expect_config_hash=chash)
            seqs = patterns.classify_set(res.traces, lib, mcfg)
            out = outdir / ("classified_e%d_n%d.jsonl" % (e, n))
            with open(out, "w", encoding="utf-8") as fh:
                for idx, seq in enumerate(seqs):
                    fh.write(json.dumps({
                        "trace": idx,
                        "entries": [[ent.start, ent.label.value, ent.length] for ent in seq.entries],
                        "unmatched": seq.unmatched_samples,
                    }) + "\n")
            full = sum(1 for s in seqs if len(s.entries) == spec.pixel_count)
            summary.append((e, n, len(seqs), full, sum(s.unmatched_samples for s in seqs)))
    tracestore.export_csv(
        outdir / "classification_summary.csv",
        ("experiment", "neuron", "traces", "full_length_sequences", "unmatched_samples"),
        summary,
    )
    print("classified %d trace set(s)" % len(summary))
    return EXIT_OK


def _read_sequences(path: Path) -> list[patterns.ClassifiedSequence]:
    seqs = []
    for line in _require(path).read_text().splitlines():
        rec = json.loads(line)
        entries = tuple(
            patterns.Entry(int(s), ImportanceLabel(lab), int(l)) for s, lab, l in rec["entries"]
        )
        seqs.append(patterns.ClassifiedSequence(entries=entries, unmatched_samples=int(rec["unmatched"])))
    return seqs


def cmd_preprocess(args) -> int:
    """Partition, filter images and build aligned important-MAC trace sets."""
    outdir = Path(args.output_dir)
    spec, _ = _spec_from_manifest(outdir)
    chash = spec.config_hash()
    summary = []
    for e in range(spec.experiment_count):
        images = tracestore.read_images(_require(outdir / ("images_e%d.mpbimg" % e)))
        for n in range(len(spec.neurons)):
            res = tracestore.read_traces(_trace_path(outdir, e, n), load_ground_truth=False,
                                         expect_config_hash=chash)
            seqs = _read_sequences(outdir / ("classified_e%d_n%d.jsonl" % (e, n)))
            retained, key, _ = preprocess.partition_and_retain(seqs)
            seqs_kept = [seqs[i] for i in retained]
            masks = preprocess.build_pixel_masks(seqs_kept, spec.pixel_count)
            filtered = preprocess.apply_masks(images[retained], masks)
            aligned = preprocess.concatenate_important(res.traces.subset(retained), seqs_kept)
            if aligned.block_count == 0:
                print("warning: e%d n%d has no important MACs; attack infeasible" % (e, n))
            tracestore.write_images(filtered, outdir / ("filtered_images_e%d_n%d.mpbimg" % (e, n)))
            tracestore.write_images(images[retained], outdir / ("retained_images_e%d_n%d.mpbimg" % (e, n)))
            np.save(outdir / ("aligned_e%d_n%d.npy" % (e, n)), aligned.samples)
            (outdir / ("aligned_meta_e%d_n%d.json" % (e, n))).write_text(
                json.dumps({"block_positions": list(aligned.block_positions),
                            "block_length": aligned.block_length,
                            "retained": retained, "config_hash": chash},
                           sort_keys=True) + "\n"
            )
            summary.append((e, n, len(seqs), len(retained), len(retained) / len(seqs),
                            " ".join(str(k) for k in key)))
    tracestore.export_csv(
        outdir / "preprocess_summary.csv",
        ("experiment", "neuron", "traces", "retained", "retained_fraction", "partition_key"),
        summary,
    )
    print("preprocessed %d trace set(s)" % len(summary))
    return EXIT_OK


def _load_aligned(outdir: Path, e: int, n: int, chash: str):
    meta = json.loads(_require(outdir / ("aligned_meta_e%d_n%d.json" % (e, n))).read_text())
    if meta["config_hash"] != chash:
        raise tracestore.ConfigHashMismatchError("aligned artifact built under another config")
    samples = np.load(_require(outdir / ("aligned_e%d_n%d.npy" % (e, n))))
    aligned = preprocess.AlignedTraceSet(
        samples=samples,
        block_positions=tuple(meta["block_positions"]),
        block_length=int(meta["block_length"]),
    )
    return aligned, meta["retained"]


def cmd_attack(args) -> int:
    """Per-weight CPA with guessing-entropy curves for one use case.

    The artifact directory's own variant decides what is attackable:
    ``unprotected`` mode needs artifacts simulated without the
    countermeasure, ``protected`` and ``circumvented`` need the branched
    variant (the circumvented run reuses the protected traces through the
    preprocessing artifacts).
    """
    outdir = Path(args.output_dir)
    spec, _ = _spec_from_manifest(outdir)
    lib = tracestore.read_templates(_require(outdir / "templates.mpbtpl"))
    chash = spec.config_hash()
    mode = args.mode
    candidates = cpa.default_candidates()
    schedule = list(spec.schedule)

    if mode == "unprotected":
        if spec.sim.variant is not PruningVariant.UNPROTECTED:
            raise ConfigError("unprotected attack needs artifacts with variant=unprotected")
        targets = TARGET_WEIGHTS
    elif mode == "protected":
        if spec.sim.variant is not PruningVariant.BRANCHED:
            raise ConfigError("protected attack needs artifacts with variant=branched")
        targets = TARGET_WEIGHTS
    else:
        if spec.sim.variant is not PruningVariant.BRANCHED:
            raise ConfigError("circumvented attack needs artifacts with variant=branched")
        targets = important_targets(spec.sim.iapam)

    nominal_width = sum(
        lib[ImportanceLabel.I].length if spec.sim.iapam[i] else lib[ImportanceLabel.E].length
        for i in range(spec.pixel_count)
    )

    rank_rows = []
    ranks_acc: dict[tuple[int, int], list[np.ndarray]] = {}
    sub_schedules: dict[tuple[int, int], list[int]] = {}
    for e in range(spec.experiment_count):
        images = tracestore.read_images(_require(outdir / ("images_e%d.mpbimg" % e)))
        for n, neuron in enumerate(spec.neurons):
            if mode == "circumvented":
                aligned, retained = _load_aligned(outdir, e, n, chash)
                filtered = tracestore.read_images(
                    _require(outdir / ("filtered_images_e%d_n%d.mpbimg" % (e, n)))
                )
                matrix, attack_images = aligned.samples, filtered
                sched = [t for t in schedule if t <= matrix.shape[0]]
            else:
                res = tracestore.read_traces(_trace_path(outdir, e, n),
                                             load_ground_truth=False,
                                             expect_config_hash=chash)
                width = None if mode == "unprotected" else nominal_width
                matrix = res.traces.to_matrix(width=width)
                attack_images = images
                sched = schedule
            for w in targets:
                if mode == "circumvented":
                    window = [aligned.block_range(w)]
                elif mode == "protected":
                    window = cpa.leak_window(
                        spec.sim.iapam,
                        spec.sim.variant,
                        lib,
                        w,
                        extended=spec.sim.extended_leakage,
                    )
                else:
                    window = cpa.nominal_window(
                        spec.sim.iapam,
                        spec.sim.variant,
                        lib,
                        w,
                        extended=spec.sim.extended_leakage,
                    )
                cfg = cpa.AttackConfig(
                    target_weight_index=w,
                    known_prefix=neuron.weights[:w],
                    window=window,
                    candidate_values=candidates,
                )
                ranks = cpa.ranks_over_schedule(
                    matrix, attack_images, cfg, sched, int(neuron.weights[w])
                )
                ranks_acc.setdefault((n, w), []).append(ranks)
                sub_schedules[(n, w)] = sched
                ranked, scores = cpa.recover_weight(
                    matrix[: sched[-1]], attack_images[: sched[-1]], cfg
                )
                rank_rows.append((mode, e, n, w, int(neuron.weights[w]), int(ranked[0]),
                                  float(scores[0]), int(ranks[-1])))

    ge_rows = []
    for (n, w), per_exp in sorted(ranks_acc.items()):
        m = min(len(r) for r in per_exp)
        curve = cpa.guessing_entropy(np.vstack([r[:m] for r in per_exp]), sub_schedules[(n, w)][:m])
        for t, g in zip(curve.trace_counts, curve.ge_bits):
            ge_rows.append((n, w, t, g, curve.experiment_count))
    tracestore.export_csv(
        outdir / ("ge_curves_%s.csv" % mode),
        ("neuron", "weight_index", "trace_count", "ge_bits", "experiment_count"),
        ge_rows,
    )
    tracestore.export_csv(
        outdir / ("attack_%s.csv" % mode),
        ("mode", "experiment", "neuron", "weight_index", "true_weight", "best_candidate",
         "best_score", "true_rank"),
        rank_rows,
    )
    recovered = sum(1 for r in rank_rows if r[5] == r[4])
    print("%s attack: %d/%d (experiment, weight) targets rank first"
          % (mode, recovered, len(rank_rows)))
    return EXIT_OK


def cmd_report(args) -> int:
    """Aggregate attack CSVs into a human-readable summary plus CSV."""
    outdir = Path(args.output_dir)
    spec, _ = _spec_from_manifest(outdir)
    imp = set(important_targets(spec.sim.iapam))
    lines = []
    rows = []
    any_results = False
    for mode in ("unprotected", "protected", "circumvented"):
        path = outdir / ("attack_%s.csv" % mode)
        if not path.exists():
            continue
        body = path.read_text().splitlines()[1:]
        if not body:
            lines.append("%s: no results" % mode)
            rows.append((mode, 0, 0, ""))
            continue
        any_results = True
        per_target: dict[tuple[int, int], list[bool]] = {}
        for line in body:
            parts = line.split(",")
            n, w = int(parts[2]), int(parts[3])
            per_target.setdefault((n, w), []).append(int(parts[7]) == 1)
        targets = sorted(per_target)
        recovered = [t for t in targets if all(per_target[t])]
        frac = len(recovered) / len(targets)
        lines.append(
            "%s: recovered %.1f%% of targeted weights (%d/%d, rank 1 in every experiment)"
            % (mode, 100 * frac, len(recovered), len(targets))
        )
        rows.append((mode, len(recovered), len(targets), "%.4f" % frac))
        imp_targets = [t for t in targets if t[1] in imp]
        if imp_targets:
            imp_rec = [t for t in imp_targets if all(per_target[t])]
            lines.append(
                "%s: recovered %.1f%% of the important weights (%d/%d)"
                % (mode, 100 * len(imp_rec) / len(imp_targets), len(imp_rec), len(imp_targets))
            )
    if not lines:
        lines.append("no attack results found: nothing to report")
    report = "\n".join(lines) + "\n"
    (outdir / "report.txt").write_text(report)
    tracestore.export_csv(outdir / "report.csv",
                          ("mode", "recovered", "targets", "recovered_fraction"), rows)
    sys.stdout.write(report)
    if not any_results:
        print("(no results)")
    return EXIT_OK


def cmd_cff_study(args) -> int:
    """Derive the importance map from a control-flow-free run."""
    outdir = Path(args.output_dir)
    spec, _ = _spec_from_manifest(outdir)
    if spec.sim.variant is not PruningVariant.CONTROL_FLOW_FREE:
        raise ConfigError("cff-study needs a control_flow_free config (got %s)"
                          % spec.sim.variant.value)
    lib = tracestore.read_templates(_require(outdir / "templates.mpbtpl"))
    mcfg = _match_config(outdir)
    chash = spec.config_hash()

    res = tracestore.read_traces(_trace_path(outdir, 0, 0), load_ground_truth=False,
                                 expect_config_hash=chash)
    seqs = patterns.classify_set(res.traces, lib, mcfg)
    derived = preprocess.derive_iapam(seqs)
    truth = spec.sim.iapam
    fp = int(np.sum(derived.bits & ~truth.bits))
    fn = int(np.sum(~derived.bits & truth.bits))
    exact_at = None
    for t in range(1, len(seqs) + 1):
        if preprocess.derive_iapam(seqs[:t]) == truth:
            exact_at = t
            break
    tracestore.export_csv(
        outdir / "cff_study.csv",
        ("derived_iapam", "true_iapam", "false_positive_bits", "false_negative_bits",
         "traces_for_exact_recovery"),
        [("".join(str(b) for b in derived.to_list()),
          "".join(str(b) for b in truth.to_list()),
          fp, fn, exact_at if exact_at is not None else -1)],
    )
    print("derived IaPAM: %s" % "".join(str(b) for b in derived.to_list()))
    print("true    IaPAM: %s" % "".join(str(b) for b in truth.to_list()))
    print("false-positive bits: %d, false-negative bits: %d" % (fp, fn))
    print("exact recovery after %s traces" % (exact_at if exact_at is not None else ">budget"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="macleak",
        description="Simulate pruning-protected first-layer traces and run CPA weight recovery.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=False):
        p.add_argument("-o", "--output-dir", required=True, help="artifact directory")
        if config:
            p.add_argument("-c", "--config", help="experiment spec JSON (default: built-in desk-scale config)")
            p.add_argument("--seed", type=int, help="override the base RNG seed")

    p = sub.add_parser("simulate", help="generate trace/image/skip-table artifacts")
    add_common(p, config=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="pick the pattern-matching threshold")
    add_common(p)
    p.add_argument("--metric", choices=[m.value for m in Metric], default=Metric.NORMALIZED_CROSS_CORRELATION.value)
    p.add_argument("--training-traces", type=int, default=200)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("classify", help="classify traces into I/E/S sequences")
    add_common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("preprocess", help="partition, filter images, align important MACs")
    add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("attack", help="CPA weight recovery with GE curves")
    add_common(p)
    p.add_argument("--mode", choices=["unprotected", "protected", "circumvented"], required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("report", help="aggregate attack results")
    add_common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("cff-study", help="derive the importance map (control-flow-free variant)")
    add_common(p)
    p.set_defaults(func=cmd_cff_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, json.JSONDecodeError) as exc:
        print("configuration error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, tracestore.ConfigHashMismatchError) as exc:
        print("artifact error: %s" % exc, file=sys.stderr)
        return EXIT_ARTIFACTS
    except tracestore.TraceStoreError as exc:
        print("container error: %s" % exc, file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
