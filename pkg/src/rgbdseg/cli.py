"""Batch pipeline: synth, propose, describe, train, predict, infer, eval,
scene. Stages communicate only via the documented file formats; every stage
is idempotent for unchanged inputs.

Exit code 0 on success; on failure a message naming the failing stage goes
to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import os
import sys
from multiprocessing import Pool

import numpy as np

from .boundaries import frame_boundaries, read_boundary_map
from .config import PipelineConfig
from .descriptors import DescriptorBank, RegionDescriber, batch_describe, fit_bank, read_descriptor_file, write_descriptor_file
from .imaging import backproject, mask_iou, write_ppm
from .inference import evaluate, save_labeling, select_top_confident, sequential_paint
from .proposals import (
    DEFAULT_RANKER,
    ObjectnessRanker,
    fit_objectness_ranker,
    generate_pool,
    generate_seeds,
    load_pool,
    objectness_features,
    rank_and_diversify,
    save_pool,
)
from .recognition import (
    LabeledSegment,
    assemble_training,
    label_proposals,
    load_category_models,
    save_category_models,
    train_category_models,
    train_scene_models,
)
from .synth import Corpus, write_corpus

PALETTE = np.array([
    (40, 40, 40), (220, 60, 50), (60, 190, 70), (60, 90, 220),
    (235, 220, 60), (60, 200, 200), (215, 70, 210), (240, 140, 50),
    (140, 100, 50), (160, 160, 160), (120, 220, 140), (170, 120, 230),
    (90, 60, 30),
], dtype=np.uint8)


def _config_from(args):
    overrides = {}
    for key in PipelineConfig.field_names():
        if hasattr(args, key) and getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    return PipelineConfig.from_sources(getattr(args, "config", None), overrides)


def _load_ranker(path) -> ObjectnessRanker:
    values = [float(tok) for tok in open(path).read().split()]
    return ObjectnessRanker(weights=np.array(values[:-1]), bias=values[-1])


def _save_ranker(path, ranker: ObjectnessRanker) -> None:
    with open(path, "w") as fh:
        fh.write(" ".join(repr(v) for v in ranker.weights) + f" {ranker.bias!r}\n")


# -- synth ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    write_corpus(args.out, count=args.count, classes=args.classes,
                 seed=args.seed, width=args.width, height=args.height,
                 camouflage=args.camouflage)
    print(f"synth: wrote {args.count} scenes to {args.out}")
    return 0


# -- propose --------------------------------------------------------------------

def _propose_one(task):
    stem, corpus_root, out_dir, config, ranker, no_depth, boundaries_in = task
    corpus = Corpus(corpus_root)
    frame = corpus.load_frame(stem)
    if boundaries_in:
        fused = read_boundary_map(os.path.join(boundaries_in, f"{stem}.map"))
    else:
        fused = frame_boundaries(frame, use_depth=not no_depth)
    seeds = generate_seeds(frame.width, frame.height, config.grid_n)
    pool = generate_pool(frame, fused, seeds, config.pool_config(ranker))
    k = config.k_train if corpus.split[stem] == "train" else config.k_test
    pool = rank_and_diversify(pool, ranker, k, gamma=config.mmr_gamma)
    save_pool(os.path.join(out_dir, stem), pool)
    return stem, len(pool)


def cmd_propose(args) -> int:
    config = _config_from(args)
    corpus = Corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    ranker = _load_ranker(args.ranker) if args.ranker else DEFAULT_RANKER
    tasks = [(stem, args.corpus, args.out, config, ranker,
              not config.use_depth, args.boundaries_in)
             for stem in corpus.stems]
    for stem, n in _run_tasks(_propose_one, tasks, config.jobs):
        print(f"propose: {stem} -> {n} masks")
    return 0


# -- describe -------------------------------------------------------------------

def _regions_for(corpus, stem, proposals_dir):
    pool = load_pool(os.path.join(proposals_dir, stem))
    gt = corpus.load_gt_objects(stem)
    return pool, gt


def _describe_one(task):
    stem, corpus_root, proposals_dir, out_dir, config, external_dir = task
    corpus = Corpus(corpus_root)
    frame = corpus.load_frame(stem)
    cloud = backproject(frame)
    describer = RegionDescriber(frame, cloud, config.descriptor_config())
    bank = DescriptorBank.load(os.path.join(out_dir, "pca_bank.bin"))
    pool, gt = _regions_for(corpus, stem, proposals_dir)
    externals = None
    if external_dir:
        externals = read_descriptor_file(os.path.join(external_dir, f"{stem}.bin"))
        if externals.shape[0] != len(pool.masks):
            raise ValueError(
                f"{stem}: external file has {externals.shape[0]} rows for "
                f"{len(pool.masks)} proposals")
    mat = batch_describe(describer, pool.masks, bank, externals)
    write_descriptor_file(os.path.join(out_dir, f"{stem}_pool.desc"), mat)
    if corpus.split[stem] == "train" and gt:
        gt_mat = batch_describe(describer, [m for _, m in gt], bank)
        write_descriptor_file(os.path.join(out_dir, f"{stem}_gt.desc"), gt_mat)
    return stem, mat.shape


def cmd_describe(args) -> int:
    config = _config_from(args)
    corpus = Corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    bank_path = os.path.join(args.out, "pca_bank.bin")
    if not os.path.exists(bank_path):
        dcfg = config.descriptor_config()
        pairs = []
        for stem in corpus.stems_for("train"):
            frame = corpus.load_frame(stem)
            describer = RegionDescriber(frame, backproject(frame), dcfg)
            pool, gt = _regions_for(corpus, stem, args.proposals)
            for mask in [m for _, m in gt] + pool.masks:
                pairs.append((describer, mask))
                if len(pairs) >= config.pca_max_fit_samples:
                    break
            if len(pairs) >= config.pca_max_fit_samples:
                break
        print(f"describe: fitting PCA bank on {len(pairs)} regions")
        bank = fit_bank(pairs, dcfg, max_samples=config.pca_max_fit_samples)
        bank.save(bank_path)
    tasks = [(stem, args.corpus, args.proposals, args.out, config, args.external)
             for stem in corpus.stems]
    for stem, shape in _run_tasks(_describe_one, tasks, config.jobs):
        print(f"describe: {stem} -> {shape[0]} regions x {shape[1]} dims")
    return 0


# -- train ----------------------------------------------------------------------

def cmd_train(args) -> int:
    config = _config_from(args)
    corpus = Corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    gt, pools, gt_feats, pool_feats = [], [], [], []
    ranker_rows, ranker_targets = [], []
    for stem in corpus.stems_for("train"):
        objs = corpus.load_gt_objects(stem)
        pool = load_pool(os.path.join(args.proposals, stem))
        pool_desc = read_descriptor_file(
            os.path.join(args.descriptors, f"{stem}_pool.desc"))
        gt_path = os.path.join(args.descriptors, f"{stem}_gt.desc")
        gt_desc = read_descriptor_file(gt_path) if objs else np.zeros((0, 0))
        gt.append(objs)
        pools.append(pool.masks)
        gt_feats.append(gt_desc)
        pool_feats.append(pool_desc)
        # objectness ranker data: feature vector -> best IoU with any object
        frame = corpus.load_frame(stem)
        fused = frame_boundaries(frame, use_depth=config.use_depth)
        for mask in pool.masks:
            ranker_rows.append(objectness_features(mask, fused))
            best = max((mask_iou(mask, m) for _, m in objs), default=0.0)
            ranker_targets.append(best)
    sets = assemble_training(gt, pools, gt_feats, pool_feats)
    models = train_category_models(sets, config.regularization, loss=config.loss)
    save_category_models(os.path.join(args.out, "models.bin"), models)
    ranker = fit_objectness_ranker(np.vstack(ranker_rows),
                                   np.array(ranker_targets))
    _save_ranker(os.path.join(args.out, "ranker.txt"), ranker)
    print(f"train: {len(models)} category models over "
          f"{sets.features.shape[0]} regions x {sets.features.shape[1]} dims")
    return 0


# -- predict ----------------------------------------------------------------------

def cmd_predict(args) -> int:
    config = _config_from(args)
    corpus = Corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    models = load_category_models(args.models, config.regularization)
    for stem in corpus.stems:
        pool = load_pool(os.path.join(args.proposals, stem))
        feats = read_descriptor_file(
            os.path.join(args.descriptors, f"{stem}_pool.desc"))
        labeled = label_proposals(pool.masks, feats, models)
        with open(os.path.join(args.out, f"{stem}_labels.txt"), "w") as fh:
            for i, seg in enumerate(labeled):
                fh.write(f"{i} {seg.class_id} {seg.confidence!r}\n")
        print(f"predict: {stem} -> {len(labeled)} labeled segments")
    return 0


# -- infer ------------------------------------------------------------------------

def _load_labeled_segments(pool, labels_path):
    segments = []
    with open(labels_path) as fh:
        for line in fh:
            idx, class_id, confidence = line.split()
            segments.append(LabeledSegment(
                mask=pool.masks[int(idx)], class_id=int(class_id),
                confidence=float(confidence)))
    return segments


def cmd_infer(args) -> int:
    config = _config_from(args)
    corpus = Corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    for stem in corpus.stems:
        pool = load_pool(os.path.join(args.proposals, stem))
        segments = _load_labeled_segments(
            pool, os.path.join(args.labels, f"{stem}_labels.txt"))
        if not segments:
            raise ValueError(f"{stem}: no labeled segments to paint")
        retained = select_top_confident(segments, config.s_retain)
        labeling = sequential_paint(retained, config.criterion)
        save_labeling(os.path.join(args.out, f"{stem}_classes.pgm"),
                      os.path.join(args.out, f"{stem}_legend.txt"),
                      labeling, corpus.legend)
        print(f"infer: {stem} ({config.criterion}, S={config.s_retain})")
    return 0


# -- eval -------------------------------------------------------------------------

def _overlay(class_map):
    return PALETTE[np.minimum(class_map, len(PALETTE) - 1)]


def cmd_eval(args) -> int:
    from .inference import load_labeling

    corpus = Corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    overlay_dir = os.path.join(args.out, "overlays")
    os.makedirs(overlay_dir, exist_ok=True)
    hits, totals = {}, {}
    per_frame_means = []
    best_ious = []
    stems = corpus.stems_for(args.split)
    if not stems:
        raise ValueError(f"no frames in split {args.split!r}")
    for stem in stems:
        truth = corpus.load_truth(stem)
        predicted = load_labeling(os.path.join(args.labelings,
                                               f"{stem}_classes.pgm"))
        metrics = evaluate(predicted, truth)
        per_frame_means.append(metrics.mean_recall)
        for c in np.unique(truth.class_map):
            if c == 0:
                continue
            gt = truth.class_map == c
            hits[int(c)] = hits.get(int(c), 0) + int(
                (predicted.class_map[gt] == c).sum())
            totals[int(c)] = totals.get(int(c), 0) + int(gt.sum())
        pool = load_pool(os.path.join(args.proposals, stem))
        for _, gt_mask in corpus.load_gt_objects(stem):
            best_ious.append(max((mask_iou(gt_mask, m) for m in pool.masks),
                                 default=0.0))
        write_ppm(os.path.join(overlay_dir, f"{stem}_gt.ppm"),
                  _overlay(truth.class_map))
        write_ppm(os.path.join(overlay_dir, f"{stem}_pred.ppm"),
                  _overlay(predicted.class_map))
    recalls = {c: hits[c] / totals[c] for c in sorted(totals)}
    mean_recall = float(np.mean(list(recalls.values())))
    upper = float(np.mean(best_ious)) if best_ious else 0.0
    lines = [f"frames {len(stems)}\n",
             f"pool_upper_bound {upper!r}\n"]
    for c, r in recalls.items():
        lines.append(f"class {c} {corpus.legend.get(c, '?')} recall {r!r}\n")
    lines.append(f"mean_recall {mean_recall!r}\n")
    lines.append(f"mean_frame_recall {float(np.mean(per_frame_means))!r}\n")
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.writelines(lines)
    print("".join(lines), end="")
    return 0


# -- scene ------------------------------------------------------------------------

def cmd_scene(args) -> int:
    from .recognition import pyramid_cells

    config = _config_from(args)
    rgb_only = not config.use_depth
    corpus = Corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    dcfg = config.descriptor_config(use_depth=not rgb_only)

    train_stems = corpus.stems_for("train")
    test_stems = corpus.stems_for("test")
    if not train_stems or not test_stems:
        raise ValueError("scene classification needs train and test frames")

    def describer_for(stem):
        frame = corpus.load_frame(stem)
        return RegionDescriber(frame, backproject(frame), dcfg)

    # per-cell PCA bank from training frames
    sample = describer_for(train_stems[0])
    cells = pyramid_cells(sample.frame.width, sample.frame.height)
    pairs = []
    for stem in train_stems:
        describer = describer_for(stem)
        for cell in cells:
            pairs.append((describer, cell))
            if len(pairs) >= config.pca_max_fit_samples:
                break
        if len(pairs) >= config.pca_max_fit_samples:
            break
    print(f"scene: fitting PCA bank on {len(pairs)} cells")
    bank = fit_bank(pairs, dcfg, max_samples=config.pca_max_fit_samples)

    def vector_for(stem):
        describer = describer_for(stem)
        mat = batch_describe(describer, cells, bank)
        return mat.reshape(-1)

    train_vectors = [vector_for(stem) for stem in train_stems]
    labels = [corpus.scene_labels[stem] for stem in train_stems]
    model = train_scene_models(np.vstack(train_vectors), labels,
                               config.regularization)

    correct = 0
    lines = []
    for stem in test_stems:
        scores = model.scores(vector_for(stem))
        predicted = model.class_names[int(np.argmax(scores))]
        actual = corpus.scene_labels[stem]
        correct += predicted == actual
        lines.append(f"{stem} actual {actual} predicted {predicted}\n")
    accuracy = correct / len(test_stems)
    lines.append(f"accuracy {accuracy!r}\n")
    mode = "rgb" if rgb_only else "rgbd"
    with open(os.path.join(args.out, f"scene_report_{mode}.txt"), "w") as fh:
        fh.writelines(lines)
    print(f"scene ({mode}): accuracy {accuracy:.4f} "
          f"on {len(test_stems)} test frames")
    return 0


# -- plumbing ----------------------------------------------------------------------

def _run_tasks(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with Pool(processes=jobs) as pool:
        return pool.map(fn, tasks)


def _add_config_flags(parser, keys):
    parser.add_argument("--config", help="flat key = value config file")
    typed = {"int": int, "float": float, "str": str}
    from dataclasses import fields as dc_fields

    kinds = {f.name: f.type for f in dc_fields(PipelineConfig)}
    for key in keys:
        kind = kinds[key]
        if kind in ("bool", bool):
            continue  # booleans get dedicated flags
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key,
                            type=typed.get(str(kind), str))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rgbdseg",
        description="figure-ground proposals, pooled region descriptors, and "
                    "sequential inference for RGB-D semantic segmentation")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--height", type=int, default=72)
    p.add_argument("--camouflage", action="store_true",
                   help="paint objects in the wall color")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("propose", help="generate proposal pools")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ranker", help="trained objectness ranker file")
    p.add_argument("--boundaries-in", dest="boundaries_in",
                   help="directory of precomputed fused boundary maps")
    p.add_argument("--no-depth", dest="use_depth", action="store_false",
                   default=None, help="RGB boundaries only")
    _add_config_flags(p, ["sigma", "sigma_set", "lambda_min", "lambda_max",
                          "grid_n", "k_test", "k_train", "mmr_gamma",
                          "dedup_iou", "jobs"])
    p.set_defaults(fn=cmd_propose)

    p = sub.add_parser("describe", help="compute region descriptors")
    p.add_argument("--corpus", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--external", help="directory of external per-region "
                                      "feature files, aligned by region index")
    _add_config_flags(p, ["stride", "patch", "power_p", "pca_dim_rgb_sift",
                          "pca_dim_depth_sift", "pca_dim_lbp", "pca_dim_spin",
                          "pca_max_fit_samples", "jobs"])
    p.set_defaults(fn=cmd_describe)

    p = sub.add_parser("train", help="train category models and the ranker")
    p.add_argument("--corpus", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-depth", dest="use_depth", action="store_false",
                   default=None)
    _add_config_flags(p, ["regularization", "loss"])
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="label proposals with confidences")
    p.add_argument("--corpus", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["regularization"])
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("infer", help="sequential conflict-resolving painting")
    p.add_argument("--corpus", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["criterion", "s_retain"])
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="metrics report and overlays")
    p.add_argument("--corpus", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--labelings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("scene", help="spatial-pyramid scene classification")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-depth", dest="use_depth", action="store_false",
                   default=None, help="RGB blocks only")
    _add_config_flags(p, ["regularization", "pca_max_fit_samples", "jobs"])
    p.set_defaults(fn=cmd_scene)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"{args.verb}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
