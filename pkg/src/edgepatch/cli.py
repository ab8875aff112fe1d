"""Command-line pipeline driver.

Verbs: gen-data, train-extractor, train-generator, train-victim, attack,
ablate, report. One experiment lives in one --out directory with the
layout <out>/{checkpoints,features,patches,reports}; commands communicate
only through those files. Exit codes: 0 ok, 2 config error, 3 missing
dependency, 4 training diverged.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from edgepatch import evaluation, extractor, generator, victim
from edgepatch.config import ExperimentConfig
from edgepatch.data import (
    export_toy_dataset,
    generate_toy_dataset,
    holdout_split,
    load_dataset,
)
from edgepatch.errors import (
    ConfigError,
    DependencyMissing,
    EdgepatchError,
    TrainingDiverged,
)

_ABLATION_SCHEDULE = ((), (5,), (4, 5), (3, 4, 5), (2, 3, 4, 5), (1, 2, 3, 4, 5))


def _common_flags(sp, need_out=True):
    sp.add_argument("--config", help="experiment config JSON")
    sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one config value (repeatable)")
    sp.add_argument("--seed", type=int, help="override the command's primary seed")
    sp.add_argument("--out", required=need_out, help="experiment directory")
    sp.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser():
    p = argparse.ArgumentParser(
        prog="edgepatch",
        description="edge-feature adversarial patches vs cross-modal re-identification")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="synthesize and export the toy dataset")
    _common_flags(sp)

    sp = sub.add_parser("train-extractor", help="train the edge feature extractor")
    _common_flags(sp)

    sp = sub.add_parser("train-generator", help="train the patch generator")
    _common_flags(sp)

    sp = sub.add_parser("train-victim", help="train the toy victim embedder")
    _common_flags(sp)

    sp = sub.add_parser("attack", help="evaluate before/after patching")
    _common_flags(sp)
    sp.add_argument("--direction", choices=["VIS_TO_IR", "IR_TO_VIS", "both"],
                    help="override evaluation direction")
    sp.add_argument("--plots", action="store_true", help="also write cmc/map plots")

    sp = sub.add_parser("ablate", help="attack with level-ablated extractor variants")
    _common_flags(sp)
    sp.add_argument("--levels-schedule",
                    help="JSON list of removal lists, e.g. [[],[5],[4,5]]")

    sp = sub.add_parser("report", help="degradation report from two eval reports")
    sp.add_argument("--pre", required=True, help="pre-attack report.json")
    sp.add_argument("--post", required=True, help="post-attack report.json")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--plots", action="store_true")
    return p


def _load_config(args, primary_section=None):
    cfg = ExperimentConfig.from_json_file(args.config) if args.config else ExperimentConfig()
    cfg.apply_overrides(args.set)
    if getattr(args, "seed", None) is not None and primary_section:
        setattr(getattr(cfg, primary_section), "seed", args.seed)
    return cfg


def _dirs(out):
    paths = {name: os.path.join(out, name)
             for name in ("checkpoints", "features", "patches", "reports")}
    for d in paths.values():
        os.makedirs(d, exist_ok=True)
    return paths


def _write_config(cfg, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        f.write(cfg.to_json() + "\n")


def _build_dataset(cfg):
    d = cfg.dataset
    if d.layout.upper() == "TOY":
        return generate_toy_dataset(d.n_ids, d.per_id_per_modality,
                                    tuple(d.image_size), d.seed)
    if not d.root:
        raise ConfigError(f"dataset.root is required for layout {d.layout}")
    return load_dataset(d.root, d.layout, tuple(d.image_size))


def _split(cfg, dataset):
    return holdout_split(dataset, cfg.dataset.holdout_per_id)


def _load_victim(cfg, dirs):
    if cfg.victim.exchange_path:
        return victim.external_victim(cfg.victim.exchange_path)
    return victim.load_victim(os.path.join(dirs["checkpoints"], "victim.npz"))


def cmd_gen_data(args):
    cfg = _load_config(args, "dataset")
    dataset = _build_dataset(cfg)
    params = {
        "n_ids": cfg.dataset.n_ids,
        "per_id_per_modality": cfg.dataset.per_id_per_modality,
        "image_size": list(cfg.dataset.image_size),
        "config_hash": cfg.config_hash(),
    }
    manifest = export_toy_dataset(dataset, args.out, seed=cfg.dataset.seed,
                                  params=params, force=args.force)
    print(f"wrote {len(dataset.images)} images; manifest: {manifest}")
    return 0


def cmd_train_extractor(args):
    cfg = _load_config(args, "extractor")
    _write_config(cfg, args.out)
    dirs = _dirs(args.out)
    train, _ = _split(cfg, _build_dataset(cfg))
    t0 = time.time()
    model = extractor.train_extractor(train, cfg.extractor, out_dir=dirs["checkpoints"])
    extractor.save_extractor(os.path.join(dirs["checkpoints"], "extractor.npz"), model,
                             extra_meta={"config_hash": cfg.config_hash()})
    extractor.write_feature_cache(
        os.path.join(dirs["features"], "train_features.jsonl"), train.images, model)
    print(f"extractor trained in {time.time() - t0:.1f}s -> "
          f"{os.path.join(dirs['checkpoints'], 'extractor.npz')}")
    return 0


def cmd_train_generator(args):
    cfg = _load_config(args, "generator")
    _write_config(cfg, args.out)
    dirs = _dirs(args.out)
    ext = extractor.load_extractor(os.path.join(dirs["checkpoints"], "extractor.npz"))
    train, _ = _split(cfg, _build_dataset(cfg))
    t0 = time.time()
    model = generator.train_generator(train, ext, cfg.generator,
                                      out_dir=dirs["checkpoints"])
    generator.save_generator(os.path.join(dirs["checkpoints"], "generator.npz"), model,
                             extra_meta={"config_hash": cfg.config_hash()})
    print(f"generator trained in {time.time() - t0:.1f}s -> "
          f"{os.path.join(dirs['checkpoints'], 'generator.npz')}")
    return 0


def cmd_train_victim(args):
    cfg = _load_config(args, "victim")
    _write_config(cfg, args.out)
    dirs = _dirs(args.out)
    dataset = _build_dataset(cfg)
    train, test = _split(cfg, dataset)
    t0 = time.time()
    model = victim.train_toy_victim(train, cfg.victim, out_dir=dirs["checkpoints"])
    victim.save_victim(os.path.join(dirs["checkpoints"], "victim.npz"), model, cfg.victim)
    victim.write_embedding_exchange(
        model, test.images, os.path.join(dirs["features"], "victim_test_embeddings.jsonl"))
    print(f"victim trained in {time.time() - t0:.1f}s -> "
          f"{os.path.join(dirs['checkpoints'], 'victim.npz')}")
    return 0


def _directions(cfg, override):
    if override:
        return ["VIS_TO_IR", "IR_TO_VIS"] if override == "both" else [override]
    d = cfg.evaluation.direction
    return ["VIS_TO_IR", "IR_TO_VIS"] if d.lower() == "both" else [d]


def cmd_attack(args):
    cfg = _load_config(args, "evaluation")
    _write_config(cfg, args.out)
    dirs = _dirs(args.out)
    ext = extractor.load_extractor(os.path.join(dirs["checkpoints"], "extractor.npz"))
    gen = generator.load_generator(os.path.join(dirs["checkpoints"], "generator.npz"))
    vic = _load_victim(cfg, dirs)
    _, test = _split(cfg, _build_dataset(cfg))

    ev = cfg.evaluation
    for direction in _directions(cfg, args.direction):
        pre = evaluation.evaluate(vic, test, direction, ev.protocol, ev.n_runs, ev.seed,
                                  patch_source=None, r_values=ev.r_values,
                                  camera_subset=ev.camera_subset,
                                  config_hash=cfg.config_hash())
        post = evaluation.evaluate(vic, test, direction, ev.protocol, ev.n_runs, ev.seed,
                                   patch_source=(gen, ext), r_values=ev.r_values,
                                   camera_subset=ev.camera_subset,
                                   config_hash=cfg.config_hash())
        tag = direction.lower()
        evaluation.write_report(pre, os.path.join(dirs["reports"], f"pre_{tag}.json"),
                                os.path.join(dirs["reports"], f"pre_{tag}.csv"))
        evaluation.write_report(post, os.path.join(dirs["reports"], f"post_{tag}.json"),
                                os.path.join(dirs["reports"], f"post_{tag}.csv"))
        doc = evaluation.degradation_report(pre, post)
        evaluation.write_degradation(
            doc, os.path.join(dirs["reports"], f"degradation_{tag}.json"),
            os.path.join(dirs["reports"], f"degradation_{tag}.csv"))
        if args.plots:
            evaluation.write_plots(pre, post, dirs["reports"])
        _export_query_patches(gen, ext, test, direction, ev.seed,
                              os.path.join(dirs["patches"], tag))
        r1_pre, r1_post = pre.rank_r[1], post.rank_r[1]
        print(f"[{direction}] rank-1 {r1_pre:.2f} -> {r1_post:.2f} "
              f"(drop {r1_pre - r1_post:.2f}); "
              f"mAP {pre.map_score:.2f} -> {post.map_score:.2f} "
              f"(drop {pre.map_score - post.map_score:.2f})")
    return 0


def _export_query_patches(gen, ext, dataset, direction, seed, out_dir):
    """Write the per-image patches used on the visible side (PNG + sidecar)."""
    from edgepatch.data.types import Modality

    vis = sorted(dataset.by_modality(Modality.VISIBLE), key=lambda im: im.image_id)
    feats = extractor.extract_batch(vis, ext)
    for im, vec in zip(vis, feats):
        z_seed = generator.stable_z_seed(seed, im.image_id)
        patch = generator.generate_patch(
            extractor.EdgeFeature(vector=vec, person_id=im.person_id,
                                  modality=im.modality), gen, z_seed)
        name = im.image_id.replace("/", "_").rsplit(".", 1)[0] + ".png"
        generator.save_patch(patch, os.path.join(out_dir, name))


def cmd_ablate(args):
    cfg = _load_config(args, "evaluation")
    _write_config(cfg, args.out)
    dirs = _dirs(args.out)
    ext = extractor.load_extractor(os.path.join(dirs["checkpoints"], "extractor.npz"))
    gen = generator.load_generator(os.path.join(dirs["checkpoints"], "generator.npz"))
    vic = _load_victim(cfg, dirs)
    _, test = _split(cfg, _build_dataset(cfg))

    schedule = _ABLATION_SCHEDULE
    if args.levels_schedule:
        try:
            schedule = tuple(tuple(int(v) for v in row)
                             for row in json.loads(args.levels_schedule))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad --levels-schedule: {exc}") from exc

    ev = cfg.evaluation
    direction = _directions(cfg, None)[0]
    baseline = evaluation.evaluate(vic, test, direction, ev.protocol, ev.n_runs, ev.seed,
                                   patch_source=None, r_values=ev.r_values,
                                   camera_subset=ev.camera_subset,
                                   config_hash=cfg.config_hash())
    rows = []
    for removed in schedule:
        variant = extractor.ablate_levels(ext, set(removed))
        rep = evaluation.evaluate(vic, test, direction, ev.protocol, ev.n_runs, ev.seed,
                                  patch_source=(gen, variant), r_values=ev.r_values,
                                  camera_subset=ev.camera_subset,
                                  config_hash=cfg.config_hash())
        label = "none" if not removed else ",".join(f"L{k}" for k in sorted(removed))
        rows.append({"removed": label, "removed_levels": sorted(removed),
                     "rank_r": {str(r): rep.rank_r[r] for r in sorted(rep.rank_r)},
                     "map": rep.map_score})
        print(f"removed [{label:>14}] rank-1 {rep.rank_r[1]:6.2f}  mAP {rep.map_score:6.2f}")
    doc = {
        "direction": direction,
        "protocol": ev.protocol,
        "n_runs": ev.n_runs,
        "seed": ev.seed,
        "config_hash": cfg.config_hash(),
        "unattacked": {"rank_r": {str(r): baseline.rank_r[r] for r in sorted(baseline.rank_r)},
                       "map": baseline.map_score},
        "rows": rows,
    }
    path = os.path.join(dirs["reports"], "ablation.json")
    with open(path, "w") as f:
        f.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    import csv as _csv
    with open(os.path.join(dirs["reports"], "ablation.csv"), "w", newline="") as f:
        writer = _csv.writer(f)
        rvals = sorted(baseline.rank_r)
        writer.writerow(["removed"] + [f"rank_{r}" for r in rvals] + ["mAP"])
        for row in rows:
            writer.writerow([row["removed"]]
                            + [repr(row["rank_r"][str(r)]) for r in rvals]
                            + [repr(row["map"])])
        writer.writerow(["unattacked"]
                        + [repr(baseline.rank_r[r]) for r in rvals]
                        + [repr(baseline.map_score)])
    print(f"ablation table -> {path}")
    return 0


def cmd_report(args):
    pre = evaluation.EvalReport.from_json_file(args.pre)
    post = evaluation.EvalReport.from_json_file(args.post)
    doc = evaluation.degradation_report(pre, post)
    os.makedirs(args.out, exist_ok=True)
    evaluation.write_degradation(doc, os.path.join(args.out, "degradation.json"),
                                 os.path.join(args.out, "degradation.csv"))
    if args.plots:
        evaluation.write_plots(pre, post, args.out)
    for row in doc["rows"]:
        rel = row["rel_drop"]
        rel_s = "-" if rel == "-" else f"{100 * rel:.1f}%"
        print(f"{row['metric']:>8}: {row['pre']:6.2f} -> {row['post']:6.2f} "
              f"(drop {row['abs_drop']:6.2f}, rel {rel_s})")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-extractor": cmd_train_extractor,
    "train-generator": cmd_train_generator,
    "train-victim": cmd_train_victim,
    "attack": cmd_attack,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DependencyMissing as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except EdgepatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
