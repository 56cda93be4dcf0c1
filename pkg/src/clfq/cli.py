"""Command-line surface: preprocess, score, train, synth, sharpness, evaluate.

Exit codes: 0 success, 1 partial failure (some inputs failed), 2 invalid
usage or configuration.
"""

import argparse
import csv
import dataclasses
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .features import extract_feature_vector, read_features_csv, write_features_csv
from .forest import (
    LabeledDataset,
    load_model,
    model_to_json,
    predict_prob,
    prob_to_score,
    save_model,
    train,
)
from .metrics import (
    ComparisonRecord,
    MetricError,
    compute_det,
    edc_curve,
    edc_pauc,
    read_scores_csv,
    toy_matcher,
    write_det_csv,
    write_edc_csv,
    write_scores_csv,
)
from .preprocess import PreprocessError, preprocess
from .raster import ForegroundMask, GrayRaster, RasterError, load_image, read_mask_pgm, write_mask_pgm, write_pgm
from .sharpness import SharpnessError, ait_sharpness
from .synth import generate_dataset, read_manifest, validate_labels, apply_relabels

log = logging.getLogger("clfq")

IMAGE_SUFFIXES = (".pgm", ".png")


def _list_images(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _write_rows(path: Path, header: list, rows: list, fmt: str) -> None:
    """Write tabular output as CSV or JSON depending on --format."""
    if fmt == "json":
        payload = [dict(zip(header, row)) for row in rows]
        path.with_suffix(".json").write_text(json.dumps(payload, indent=2) + "\n")
        return
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# --- preprocess -------------------------------------------------------------------


def cmd_preprocess(args, cfg: RunConfig) -> int:
    in_dir = Path(args.input_dir)
    out_dir = Path(args.output_dir)
    if not in_dir.is_dir():
        log.error("input directory %s does not exist", in_dir)
        return 2
    images = _list_images(in_dir)
    if not images:
        log.warning("no input images (.pgm/.png) in %s", in_dir)
        return 0
    for sub in ("samples", "masks", "meta"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    failures = []
    for path in images:
        try:
            img = load_image(path)
            sample, mask, meta = preprocess(img, cfg.preprocess)
        except (RasterError, PreprocessError) as exc:
            failures.append((path.name, str(exc)))
            log.error("%s: %s", path.name, exc)
            continue
        stem = path.stem
        write_pgm(sample, out_dir / "samples" / f"{stem}.pgm")
        write_mask_pgm(mask, out_dir / "masks" / f"{stem}.pgm")
        (out_dir / "meta" / f"{stem}.json").write_text(json.dumps(meta.as_dict(), sort_keys=True) + "\n")
    log.info("preprocessed %d of %d images", len(images) - len(failures), len(images))
    return 1 if failures else 0


# --- score ------------------------------------------------------------------------


def _load_mask_for(sample_path: Path, sample: GrayRaster, masks_dir) -> ForegroundMask:
    if masks_dir is not None:
        mask_path = Path(masks_dir) / sample_path.name
        if mask_path.exists():
            return read_mask_pgm(mask_path)
    # Whitened-sample fallback: everything not pure white is foreground.
    return ForegroundMask(sample.pixels != 255)


def cmd_score(args, cfg: RunConfig) -> int:
    model = load_model(args.model)
    samples_dir = Path(args.samples)
    images = _list_images(samples_dir)
    if not images:
        log.warning("no samples in %s", samples_dir)
        return 0
    rows = []
    dumps = []
    failures = []
    for path in images:
        try:
            sample = load_image(path)
            mask = _load_mask_for(path, sample, args.masks)
            fv = extract_feature_vector(sample, mask)
            score = prob_to_score(predict_prob(model, fv))
        except Exception as exc:  # noqa: BLE001 - report per-image failures, keep going
            failures.append((path.name, str(exc)))
            log.error("%s: %s", path.name, exc)
            continue
        rows.append([path.stem, score])
        dumps.append((path.stem, fv))
    _write_rows(Path(args.out), ["image_id", "score"], rows, args.format)
    if args.features_csv:
        write_features_csv(args.features_csv, dumps)
    log.info("scored %d of %d samples", len(rows), len(images))
    return 1 if failures else 0


# --- sharpness ---------------------------------------------------------------------


def cmd_sharpness(args, cfg: RunConfig) -> int:
    samples_dir = Path(args.samples)
    images = _list_images(samples_dir)
    if not images:
        log.warning("no samples in %s", samples_dir)
        return 0
    rows = []
    failures = []
    for path in images:
        try:
            score, raw = ait_sharpness(load_image(path), cfg.sharpness)
        except (RasterError, SharpnessError) as exc:
            failures.append((path.name, str(exc)))
            log.error("%s: %s", path.name, exc)
            continue
        rows.append([path.stem, repr(raw), score])
    _write_rows(Path(args.out), ["image_id", "raw_ratio", "score"], rows, args.format)
    log.info("sharpness for %d of %d samples", len(rows), len(images))
    return 1 if failures else 0


# --- synth -------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    from .synth import EVALUATION_PRESETS, TRAINING_PRESETS

    n = args.n_per_class if args.n_per_class is not None else cfg.synth.n_per_class
    spf = args.samples_per_finger if args.samples_per_finger is not None else cfg.synth.samples_per_finger
    presets = TRAINING_PRESETS if args.presets == "training" else EVALUATION_PRESETS
    ds = generate_dataset(
        n,
        presets=presets,
        seed=cfg.seed,
        out_dir=args.output_dir,
        samples_per_finger=spf,
        preprocess_cfg=cfg.preprocess,
        jobs=cfg.jobs,
    )
    log.info(
        "generated %d samples (%d regenerated after failures) into %s",
        len(ds.records),
        ds.failures,
        args.output_dir,
    )
    return 0


# --- train -------------------------------------------------------------------------


def _read_labels(path) -> dict:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "image_id" not in reader.fieldnames or "label" not in reader.fieldnames:
            raise ConfigError(f"{path}: need image_id and label columns")
        return {row["image_id"]: int(row["label"]) for row in reader}


def _labeled_from_csv(features_path, labels_path) -> LabeledDataset:
    rows = read_features_csv(features_path)
    labels = _read_labels(labels_path)
    missing = [image_id for image_id, _ in rows if image_id not in labels]
    if missing:
        raise ConfigError(f"{labels_path}: no label for ids {missing[:5]} (+{max(0, len(missing) - 5)} more)")
    return LabeledDataset(
        ids=[image_id for image_id, _ in rows],
        X=np.stack([fv.values for _, fv in rows]),
        y=np.array([labels[image_id] for image_id, _ in rows], dtype=np.int64),
    )


def cmd_train(args, cfg: RunConfig) -> int:
    from .features import CANONICAL_FEATURE_NAMES

    if args.synth_train is not None:
        data = generate_dataset(args.synth_train, seed=cfg.seed, jobs=cfg.jobs).labeled()
    elif args.features and args.labels:
        data = _labeled_from_csv(args.features, args.labels)
    else:
        log.error("need either --synth-train N or both --features and --labels")
        return 2

    if args.relabel:
        relabels = _read_labels(args.relabel)
        data = apply_relabels(data, relabels)
        log.info("applied %d relabels", len(relabels))

    report = train(data, cfg.train, feature_names=CANONICAL_FEATURE_NAMES)
    save_model(report.model, args.out)
    log.info(
        "trained %d trees on %d rows: training error %.6f, oob error %.6f (%d rows without oob vote)",
        cfg.train.n_trees,
        len(data.ids),
        report.training_error,
        report.oob_error,
        report.oob_excluded,
    )

    validation = None
    eval_data = None
    if args.synth_eval is not None:
        eval_data = generate_dataset(args.synth_eval, seed=cfg.seed + 1, jobs=cfg.jobs).labeled()
    elif args.eval_features and args.eval_labels:
        eval_data = _labeled_from_csv(args.eval_features, args.eval_labels)
    if eval_data is not None:
        disagreements = validate_labels(report.model, eval_data)
        validation = {
            "rows": len(eval_data.ids),
            "error_rate": len(disagreements) / len(eval_data.ids),
            "disagreements": [dataclasses.asdict(d) for d in disagreements],
        }
        log.info("validation error rate %.6f (%d rows)", validation["error_rate"], validation["rows"])

    doc = {
        "training_error": report.training_error,
        "oob_error": report.oob_error,
        "oob_excluded_rows": report.oob_excluded,
        "rows": len(data.ids),
        "params": dataclasses.asdict(cfg.train),
        "importance": [{"feature": n, "importance_pct": v} for n, v in report.model.importance_table()],
    }
    if validation is not None:
        doc["validation"] = validation
    report_path = Path(args.report) if args.report else Path(args.out).with_suffix(".report.json")
    report_path.write_text(json.dumps(doc, indent=2) + "\n")
    if args.export_json:
        Path(args.export_json).write_text(model_to_json(report.model) + "\n")
    return 0


# --- evaluate ----------------------------------------------------------------------


def _self_match_records(corpus_dir: Path, seed: int) -> list:
    """Mated pairs within fingers, an equal-sized seeded non-mated sample."""
    manifest = read_manifest(corpus_dir / "manifest.csv")
    by_finger: dict = {}
    for row in manifest:
        by_finger.setdefault(row["finger_id"], []).append(row["image_id"])

    def load(image_id):
        sample = load_image(corpus_dir / "samples" / f"{image_id}.pgm")
        mask = read_mask_pgm(corpus_dir / "masks" / f"{image_id}.pgm")
        return sample, mask

    mated_pairs = []
    for finger_id in sorted(by_finger):
        ids = sorted(by_finger[finger_id])
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                mated_pairs.append((ids[i], ids[j]))
    if not mated_pairs:
        raise MetricError(f"{corpus_dir}: no finger has more than one sample; cannot build mated pairs")

    all_ids = sorted(r["image_id"] for r in manifest)
    finger_of = {r["image_id"]: r["finger_id"] for r in manifest}
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(zlib.crc32(corpus_dir.name.encode()),))
    )
    nonmated_pairs = []
    target = 2 * len(mated_pairs)
    attempts = 0
    while len(nonmated_pairs) < target and attempts < 50 * target:
        attempts += 1
        a, b = rng.choice(len(all_ids), size=2, replace=False)
        ia, ib = all_ids[a], all_ids[b]
        if finger_of[ia] != finger_of[ib]:
            nonmated_pairs.append((ia, ib))

    cache: dict = {}

    def cached(image_id):
        if image_id not in cache:
            cache[image_id] = load(image_id)
        return cache[image_id]

    records = []
    unmatchable = 0
    for mated, pairs in ((True, mated_pairs), (False, nonmated_pairs)):
        for ia, ib in pairs:
            (sa, ma), (sb, mb) = cached(ia), cached(ib)
            try:
                s = toy_matcher(sa, ma, sb, mb)
            except MetricError:
                # no usable foreground overlap: nothing matches
                s = 0.0
                unmatchable += 1
            records.append(ComparisonRecord(probe_id=ia, reference_id=ib, mated=mated, score=s, q1=0, q2=0))
    if unmatchable:
        log.warning("%s: %d comparison(s) had no mask overlap, scored 0", corpus_dir.name, unmatchable)
    return records


def _read_quality_csv(path) -> dict:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "image_id" not in reader.fieldnames or "score" not in reader.fieldnames:
            raise MetricError(f"{path}: need image_id and score columns")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                out[row["image_id"]] = int(round(float(row["score"])))
            except ValueError as exc:
                raise MetricError(f"{path}:{lineno}: {exc}") from exc
    return out


def _apply_quality(records: list, quality: dict, algo: str) -> list:
    missing = sorted(
        {r.probe_id for r in records if r.probe_id not in quality}
        | {r.reference_id for r in records if r.reference_id not in quality}
    )
    if missing:
        raise MetricError(
            f"quality file(s) for {algo!r} miss {len(missing)} ids, e.g. {missing[:5]}"
        )
    return [
        dataclasses.replace(r, q1=quality[r.probe_id], q2=quality[r.reference_id])
        for r in records
    ]


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    datasets: dict = {}
    for scores_path in args.scores or []:
        datasets[Path(scores_path).stem] = read_scores_csv(scores_path)
    for corpus in args.self_match or []:
        corpus = Path(corpus)
        name = corpus.name
        records = _self_match_records(corpus, cfg.seed)
        write_scores_csv(records, out_dir / f"scores_{name}.csv")
        datasets[name] = records
    if not datasets:
        log.error("no datasets: pass --scores and/or --self-match")
        return 2

    algorithms: dict = {}
    for spec_arg in args.quality or []:
        if "=" not in spec_arg:
            log.error("--quality wants NAME=CSV, got %r", spec_arg)
            return 2
        name, _, path = spec_arg.partition("=")
        algorithms.setdefault(name, {}).update(_read_quality_csv(path))
    if not algorithms:
        algorithms["embedded"] = None  # use q1/q2 already present in the scores files

    pauc: dict = {name: {} for name in algorithms}
    for ds_name, records in sorted(datasets.items()):
        mated = [r.score for r in records if r.mated]
        nonmated = [r.score for r in records if not r.mated]
        if mated and nonmated:
            det = compute_det(mated, nonmated)
            write_det_csv(det, out_dir / f"det_{ds_name}.csv")
            if args.plots:
                from .plotting import plot_det

                plot_det(det, out_dir / f"det_{ds_name}.svg", title=ds_name)

        curves = {}
        for algo, quality in sorted(algorithms.items()):
            recs = records if quality is None else _apply_quality(records, quality, algo)
            curve = edc_curve([r for r in recs if r.mated], cfg.edc)
            write_edc_csv(curve, out_dir / f"edc_{ds_name}__{algo}.csv")
            curves[algo] = curve
            pauc[algo][ds_name] = edc_pauc(curve, cfg.edc.pauc_limit)
        if args.plots:
            from .plotting import plot_edc

            plot_edc(curves, cfg.edc.f, cfg.edc.pauc_limit, out_dir / f"edc_{ds_name}.svg", title=ds_name)

    ds_names = sorted(datasets)
    header = ["algorithm", *ds_names, "avg", "std_dev"]
    rows = []
    for algo in sorted(pauc):
        values = [pauc[algo][d] for d in ds_names]
        avg = float(np.mean(values))
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        rows.append([algo, *(repr(round(v, 12)) for v in values), repr(round(avg, 12)), repr(round(std, 12))])
    _write_rows(out_dir / "pauc_summary.csv", header, rows, args.format)
    if args.plots:
        from .plotting import plot_pauc_bars

        plot_pauc_bars({a: [pauc[a][d] for d in ds_names] for a in pauc}, out_dir / "pauc_summary.svg")
    log.info("evaluated %d dataset(s) x %d quality algorithm(s) into %s", len(datasets), len(pauc), out_dir)
    return 0


# --- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clfq",
        description="Contactless fingerprint sample quality toolkit",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--jobs", type=int, default=None, help="worker processes for batch stages")
    parser.add_argument("--format", choices=("csv", "json"), default="csv", help="tabular output format")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="run the pre-processing pipeline on a directory of images")
    p.add_argument("input_dir")
    p.add_argument("output_dir")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("score", help="quality-score preprocessed samples with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--masks", default=None, help="directory of mask PGMs (defaults to white-background detection)")
    p.add_argument("--out", required=True)
    p.add_argument("--features-csv", default=None, help="also dump the full feature vectors")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", help="train the random forest")
    p.add_argument("--features", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--synth-train", type=int, default=None, metavar="N", help="generate N samples per class instead")
    p.add_argument("--eval-features", default=None)
    p.add_argument("--eval-labels", default=None)
    p.add_argument("--synth-eval", type=int, default=None, metavar="N")
    p.add_argument("--relabel", default=None, help="CSV of image_id,label overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--export-json", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("output_dir")
    p.add_argument("--n-per-class", type=int, default=None)
    p.add_argument("--samples-per-finger", type=int, default=None)
    p.add_argument(
        "--presets",
        choices=("training", "evaluation"),
        default="training",
        help="training: the bimodal high/low quality presets; evaluation: a continuous moderate-quality band",
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sharpness", help="Canny-based sharpness scores for a directory of images")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sharpness)

    p = sub.add_parser("evaluate", help="EDC/DET evaluation of quality algorithms")
    p.add_argument("--scores", action="append", default=None, metavar="CSV")
    p.add_argument("--self-match", action="append", default=None, metavar="CORPUS_DIR")
    p.add_argument("--quality", action="append", default=None, metavar="NAME=CSV")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, jobs=args.jobs)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
        return args.func(args, cfg)
    except (ConfigError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    except (MetricError, RasterError, PreprocessError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
