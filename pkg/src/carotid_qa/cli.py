"""carotid-qa command line.

Every command reads the same JSON config and writes under its output
directory: ``cohort/``, ``model/``, ``segment/``, ``sweeps/`` and ``report/``.
Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric failure,
1 any other package error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, require
from .errors import CarotidQAError, ConfigError, MissingArtifact, NumericFailure
from .phantom import generate_cohort, participant_id, read_truth, write_truth
from .predictor import CNNPredictor, OraclePredictor, read_weights, train, write_train_log, write_weights
from .predictor.dataset import build_training_set
from .qa import correlation_table, fmt, read_records_csv, score_contour, write_correlation_csv, write_records_csv
from .report import merge_correlations, read_summary_csv, sweep_chart
from .sim import METHOD_MATRIX, records_for_slice, run_sweep, segment_slice
from .volume import preprocess_with_stats, read_volume, write_volume

log = logging.getLogger("carotid_qa")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _dump_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# cohort ----------------------------------------------------------------------

def cmd_gen_phantoms(cfg: RunConfig, args):
    out = cfg.cohort_dir
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (vol, truths) in enumerate(generate_cohort(cfg.cohort)):
        pid = participant_id(i)
        write_volume(vol, out / f"{pid}.vol")
        files = []
        for t in truths:
            name = f"{pid}_{t.vessel_id}.json"
            write_truth(t, out / name)
            files.append(name)
        entries.append({"participant_id": pid, "volume": f"{pid}.vol", "truth": files})
    manifest = {"cohort": cfg.cohort.to_dict(), "participants": entries}
    _dump_json(manifest, out / "manifest.json")
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def load_cohort(cfg: RunConfig):
    """The generated cohort from disk, in manifest order."""
    path = require(cfg.cohort_dir / "manifest.json", "cohort manifest (run gen-phantoms)")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    cohort = []
    for e in manifest["participants"]:
        vol = read_volume(require(cfg.cohort_dir / e["volume"], "phantom volume"))
        truths = [read_truth(require(cfg.cohort_dir / f, "truth annotation")) for f in e["truth"]]
        cohort.append((vol, truths))
    return cohort


# model -----------------------------------------------------------------------

def cmd_train(cfg: RunConfig, args):
    t0 = time.perf_counter()
    cohort = generate_cohort(cfg.train_cohort)
    ds = build_training_set(cohort, cfg.dataset.n_patches, cfg.dataset.max_offset,
                            cfg.dataset.noise_levels, cfg.train.seed)
    result = train(ds, cfg.predictor, cfg.train, groups=[s.participant_id for s in ds],
                   progress=lambda e, a, b: log.info("epoch %d train %.5f val %.5f", e, a, b))
    cfg.model_dir.mkdir(parents=True, exist_ok=True)
    write_weights(result.params, cfg.weights_path)
    write_train_log(result.log, cfg.model_dir / "train_log.csv")
    pred = CNNPredictor(cfg.predictor, read_weights(cfg.weights_path, cfg.predictor.dtype))
    val = [ds[i] for i in result.val_index]
    truth = {(t.participant_id, t.vessel_id): t for _, ts in cohort for t in ts}
    scores = np.array([score_contour(c, truth[(s.participant_id, s.vessel_id)], s.z)
                       for c, s in zip(pred.predict_batch([s.patch for s in val]), val)])
    info = {
        "predictor": cfg.predictor.to_dict(),
        "train": cfg.train.to_dict(),
        "best_epoch": result.best_epoch,
        "n_train": int(len(result.train_index)),
        "n_val": int(len(result.val_index)),
        "val_median_dice_lumen": float(fmt(np.median(scores[:, 0]))),
        "val_median_dice_wall": float(fmt(np.median(scores[:, 1]))),
    }
    _dump_json(info, cfg.model_dir / "model.json")
    log.info("trained in %.1f s; validation median Dice lumen %.3f wall %.3f", time.perf_counter() - t0,
             info["val_median_dice_lumen"], info["val_median_dice_wall"])
    return EXIT_OK


def load_predictor(cfg: RunConfig):
    if cfg.predictor.kind == "oracle":
        return OraclePredictor()
    params = read_weights(require(cfg.weights_path, "model weights (run train)"), cfg.predictor.dtype)
    return CNNPredictor(cfg.predictor, params)


def _methods_for(predictor, methods):
    if not getattr(predictor, "supports_dropout", False):
        bad = [m for m in methods if m.startswith("dropout")]
        if bad:
            raise ConfigError(f"methods {bad} need a predictor with dropout; the oracle has none")
    return tuple(methods)


# segmentation ----------------------------------------------------------------

def cmd_segment(cfg: RunConfig, args):
    cohort = load_cohort(cfg)
    predictor = load_predictor(cfg)
    methods = _methods_for(predictor, METHOD_MATRIX if predictor.supports_dropout else ("centers_polar",))
    ens = cfg.ensemble
    records, contours, dropped = [], [], []
    for vol, truths in cohort:
        v, stats = preprocess_with_stats(vol)
        pred = predictor.for_volume_stats(*stats) if hasattr(predictor, "for_volume_stats") else predictor
        for t in truths:
            for z in t.annotated_z:
                cx, cy = t.at(z).center
                try:
                    res = segment_slice(v, (cx, cy, z), pred, methods, ens.n_dropout, ens.base_seed,
                                        ens.include_original, not args.raw_uncertainty)
                except CarotidQAError as exc:  # same policy as the sweeps: drop and count
                    log.warning("%s/%s z=%d dropped: %s", t.participant_id, t.vessel_id, z, exc)
                    dropped.append({"participant_id": t.participant_id, "vessel_id": t.vessel_id, "z": z,
                                    "reason": f"{type(exc).__name__}: {exc}"})
                    continue
                records += records_for_slice(res, t, z)
                entry = {"participant_id": t.participant_id, "vessel_id": t.vessel_id, "z": z,
                         "single": res.single.to_json(), "aggregated": []}
                for agg in res.aggregated.values():
                    entry["aggregated"] += [agg.to_json("lumen"), agg.to_json("wall")]
                contours.append(entry)
    out = cfg.segment_dir
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(records, out / "records.csv")
    _dump_json({"contours": contours, "dropped": dropped}, out / "contours.json")
    log.info("segmented %d slices -> %s", len(contours), out)
    return EXIT_OK


def _sweep(cfg: RunConfig, args, sweep_cfg):
    cohort = load_cohort(cfg)
    predictor = load_predictor(cfg)
    _methods_for(predictor, sweep_cfg.methods)
    report = run_sweep(cohort, predictor, sweep_cfg, jobs=args.jobs)
    report.write(cfg.sweep_dir)
    log.info("%s sweep: %d levels -> %s", sweep_cfg.experiment, len(sweep_cfg.levels), cfg.sweep_dir)
    return EXIT_OK


def cmd_sweep_noise(cfg, args):
    return _sweep(cfg, args, cfg.sweep_noise)


def cmd_sweep_offset(cfg, args):
    return _sweep(cfg, args, cfg.sweep_offset)


def cmd_correlate(cfg: RunConfig, args):
    paths = [Path(p) for p in args.records] if args.records else [cfg.segment_dir / "records.csv"]
    records = []
    for p in paths:
        records += read_records_csv(require(p, "QA records CSV"), condition=str(p))
    methods = [m for m in METHOD_MATRIX if any(r.method == m for r in records)]
    if not methods:
        raise MissingArtifact(f"no ensemble records found in {', '.join(map(str, paths))}")
    rows = correlation_table(records, methods, args.experiment)
    out = Path(args.output) if args.output else cfg.segment_dir / "correlation.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_correlation_csv(rows, out)
    for r in rows:
        print(f"{r['level']:<12}{r['structure']:<7}{r['method']:<15}R2={fmt(r['r_squared'])}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args):
    out = cfg.report_dir
    out.mkdir(parents=True, exist_ok=True)
    found = [e for e in ("noise", "offset") if (cfg.sweep_dir / f"correlation_{e}.csv").exists()]
    if not found:
        raise MissingArtifact(f"no sweep correlation CSVs under {cfg.sweep_dir} (run sweep-noise/sweep-offset)")
    merge_correlations([cfg.sweep_dir / f"correlation_{e}.csv" for e in found], out / "table1.csv")
    for e in found:
        rows = read_summary_csv(require(cfg.sweep_dir / f"summary_{e}.csv", f"{e} sweep summary"))
        label = "noise level alpha" if e == "noise" else "normalised centre offset"
        sweep_chart(rows, f"{e} sweep", out / f"sweep_{e}.svg", label)
    log.info("report -> %s", out)
    return EXIT_OK


COMMANDS = {
    "gen-phantoms": (cmd_gen_phantoms, "generate the phantom cohort (volumes + truth JSON)"),
    "train": (cmd_train, "train the polar CNN on jittered phantom patches"),
    "segment": (cmd_segment, "segment every annotated slice at the true centre"),
    "sweep-noise": (cmd_sweep_noise, "noise-level degradation sweep"),
    "sweep-offset": (cmd_sweep_offset, "centre-offset degradation sweep"),
    "correlate": (cmd_correlate, "Dice-vs-uncertainty R^2 at contour/vessel/participant level"),
    "report": (cmd_report, "merge correlation tables and draw sweep charts"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="carotid-qa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        p.add_argument("-q", "--quiet", action="store_true", help="warnings only")
        if name == "segment":
            p.add_argument("--raw-uncertainty", action="store_true",
                           help="do not divide uncertainties by the output distance")
        if name in ("segment", "sweep-noise", "sweep-offset"):
            p.add_argument("--exclude-original", action="store_true",
                           help="centres ensemble without the original centre (8 members)")
        if name == "correlate":
            p.add_argument("--records", nargs="+", help="QA records CSVs (default: segment/records.csv)")
            p.add_argument("--output", help="correlation CSV path")
            p.add_argument("--experiment", default="segment", help="experiment label in the table")
    return parser


def _setup_logging(cfg, args):
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}[cfg.verbosity]
    if args.verbose:
        level = logging.DEBUG
    if args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, seed=args.seed)
        if args.out:
            cfg.output_dir = Path(args.out)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if getattr(args, "exclude_original", False):
            cfg.ensemble = replace(cfg.ensemble, include_original=False)
            cfg.sweep_noise = replace(cfg.sweep_noise, include_original=False)
            cfg.sweep_offset = replace(cfg.sweep_offset, include_original=False)
        _setup_logging(cfg, args)
        return COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericFailure as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CarotidQAError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
