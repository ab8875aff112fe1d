"""Retrieval evaluation: CMC rank-r and mAP, seeded multi-run protocols,
and before/after-attack degradation reports."""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from edgepatch.data.splits import split_query_gallery
from edgepatch.data.types import Direction, Layout, Modality, Protocol
from edgepatch.errors import EvalError
from edgepatch.victim import RankingResult, rank_by_similarity

DEFAULT_R_VALUES = (1, 5, 10, 20)


def cmc(rankings, r_values=DEFAULT_R_VALUES):
    """Fraction (in %) of queries whose best correct match sits within the
    top r, for each requested r."""
    if not rankings:
        raise EvalError("cmc needs at least one ranking")
    best = []
    for rk in rankings:
        if not rk.correct_positions:
            raise EvalError(f"query has no ground truth: {rk.query_ref}")
        best.append(min(rk.correct_positions))
    best = np.asarray(best)
    return {int(r): float((best <= r).mean() * 100.0) for r in r_values}


def average_precision(ranking):
    """Mean over relevant items of precision at their positions."""
    if not ranking.correct_positions:
        raise EvalError(f"query has no ground truth: {ranking.query_ref}")
    positions = sorted(ranking.correct_positions)
    return float(np.mean([(i + 1) / pos for i, pos in enumerate(positions)]))


def mean_average_precision(rankings):
    if not rankings:
        raise EvalError("mean_average_precision needs at least one ranking")
    return float(np.mean([average_precision(rk) for rk in rankings]) * 100.0)


@dataclass
class EvalReport:
    direction: str
    protocol: str
    n_runs: int
    r_values: tuple
    rank_r: dict                  # r -> mean percentage over runs
    map_score: float
    per_run: list = field(default_factory=list)
    seed: int = 0
    patched: bool = False
    config_hash: str = ""

    def __post_init__(self):
        if len(self.per_run) != self.n_runs:
            raise EvalError(f"per_run length {len(self.per_run)} != n_runs {self.n_runs}")
        vals = [self.rank_r[r] for r in sorted(self.rank_r)]
        if any(b < a - 1e-9 for a, b in zip(vals, vals[1:])):
            raise EvalError(f"rank-r values must be non-decreasing in r: {self.rank_r}")
        for v in list(self.rank_r.values()) + [self.map_score]:
            if not -1e-9 <= v <= 100 + 1e-9:
                raise EvalError(f"metric out of [0,100]: {v}")

    def to_dict(self):
        return {
            "direction": self.direction,
            "protocol": self.protocol,
            "n_runs": self.n_runs,
            "r_values": list(self.r_values),
            "rank_r": {str(r): self.rank_r[r] for r in sorted(self.rank_r)},
            "map": self.map_score,
            "per_run": self.per_run,
            "seed": self.seed,
            "patched": self.patched,
            "config_hash": self.config_hash,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(direction=d["direction"], protocol=d["protocol"], n_runs=d["n_runs"],
                   r_values=tuple(d["r_values"]),
                   rank_r={int(k): v for k, v in d["rank_r"].items()},
                   map_score=d["map"], per_run=d["per_run"], seed=d.get("seed", 0),
                   patched=d.get("patched", False), config_hash=d.get("config_hash", ""))

    @classmethod
    def from_json_file(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _patch_visible_pool(images, generator_model, extractor_model, seed):
    """One patch per pedestrian (a person wears one garment): condition on
    the identity's clean visible feature centroid, then composite that
    patch onto each of the identity's visible images."""
    from edgepatch import extractor as ex
    from edgepatch import generator as gen

    if not images:
        return {}
    feats = ex.extract_batch(images, extractor_model)
    by_id = {}
    for i, im in enumerate(images):
        by_id.setdefault(im.person_id, []).append(i)
    patched = {}
    for pid in sorted(by_id):
        rows = feats[by_id[pid]]
        centroid = rows.mean(axis=0)
        centroid /= max(np.linalg.norm(centroid), 1e-12)
        feature = ex.EdgeFeature(vector=centroid, person_id=pid)
        patch = gen.generate_patch(feature, generator_model,
                                   z_seed=gen.stable_z_seed(seed, f"id:{pid}"))
        for i in by_id[pid]:
            im = images[i]
            patched[im.image_id] = gen.apply_patch(im, patch)
    return patched


def evaluate(victim_model, dataset, direction, protocol, n_runs=1, seed=0,
             patch_source=None, r_values=DEFAULT_R_VALUES, camera_subset=None,
             config_hash="") -> EvalReport:
    """Run the retrieval protocol and aggregate CMC/mAP over runs.

    With patch_source=(generator, extractor), every visible image taking
    part is patched: the query side for VIS_TO_IR, the gallery side for
    IR_TO_VIS. Splits and latents are deterministic in `seed`.
    """
    direction = Direction(direction.upper()) if isinstance(direction, str) else direction
    protocol = Protocol(protocol.upper()) if isinstance(protocol, str) else protocol

    patched_pool = {}
    if patch_source is not None:
        generator_model, extractor_model = patch_source
        vis_pool = dataset.by_modality(Modality.VISIBLE)
        patched_pool = _patch_visible_pool(
            sorted(vis_pool, key=lambda im: im.image_id),
            generator_model, extractor_model, seed)

    def maybe_patched(im):
        return patched_pool.get(im.image_id, im)

    # the query set is identical across runs; embed pools once
    first = split_query_gallery(dataset, direction, protocol,
                                run_seed=_run_seed(seed, 1))
    queries = [maybe_patched(im) if direction is Direction.VIS_TO_IR else im
               for im in first.queries]
    gallery_pool = sorted(dataset.by_modality(direction.gallery_modality),
                          key=lambda im: im.image_id)
    if direction is Direction.IR_TO_VIS:
        gallery_pool = [maybe_patched(im) for im in gallery_pool]
    if camera_subset:
        allowed = set(camera_subset)
        gallery_pool = [im for im in gallery_pool if im.camera_id in allowed]
        if not gallery_pool:
            raise EvalError(f"camera subset {sorted(allowed)} leaves an empty gallery")

    qvecs = victim_model.embed_many(queries)
    gvecs = victim_model.embed_many(gallery_pool)
    gindex = {im.image_id: i for i, im in enumerate(gallery_pool)}

    same_camera_filter = dataset.layout is Layout.SYSU
    per_run = []
    acc_rank = {int(r): [] for r in r_values}
    acc_map = []
    for run in range(1, n_runs + 1):
        split = split_query_gallery(dataset, direction, protocol,
                                    run_seed=_run_seed(seed, run))
        gal_ids = [im.image_id for im in split.gallery]
        rankings = []
        for qi, q in enumerate(queries):
            keep = gal_ids
            if camera_subset:
                allowed = set(camera_subset)
                keep = [g for g in keep if gallery_pool[gindex[g]].camera_id in allowed]
            if same_camera_filter:
                keep = [g for g in keep
                        if gallery_pool[gindex[g]].camera_id != q.camera_id]
            gimgs = [gallery_pool[gindex[g]] for g in keep]
            if not gimgs:
                raise EvalError(f"query has no ground truth: {q.image_id}")
            gv = gvecs[[gindex[g] for g in keep]]
            ordered, gpids = rank_by_similarity(qvecs[qi], gv, gimgs, q.image_id)
            correct = [pos for pos, pid in enumerate(gpids, start=1)
                       if pid == q.person_id]
            if not correct:
                raise EvalError(f"query has no ground truth: {q.image_id}")
            rankings.append(RankingResult(query_ref=q.image_id,
                                          ordered_gallery=ordered,
                                          correct_positions=correct))
        run_cmc = cmc(rankings, r_values)
        run_map = mean_average_precision(rankings)
        for r in run_cmc:
            acc_rank[r].append(run_cmc[r])
        acc_map.append(run_map)
        per_run.append({
            "run": run,
            "run_seed": _run_seed(seed, run),
            "rank_r": {str(r): run_cmc[r] for r in sorted(run_cmc)},
            "map": run_map,
            "n_queries": len(queries),
            "n_gallery": len(split.gallery),
        })

    return EvalReport(
        direction=direction.value, protocol=protocol.value, n_runs=n_runs,
        r_values=tuple(int(r) for r in r_values),
        rank_r={r: float(np.mean(v)) for r, v in acc_rank.items()},
        map_score=float(np.mean(acc_map)), per_run=per_run, seed=seed,
        patched=patch_source is not None, config_hash=config_hash)


def _run_seed(seed, run):
    return int(seed) * 100003 + run


# -- degradation reporting -------------------------------------------------

_METRIC_KEYS = ("rank_r", "map")


def degradation_report(pre: EvalReport, post: EvalReport) -> dict:
    """Side-by-side comparison of two reports computed on identical splits."""
    comparable = (
        pre.direction == post.direction and pre.protocol == post.protocol
        and pre.n_runs == post.n_runs and pre.r_values == post.r_values
        and pre.seed == post.seed)
    if not comparable:
        raise EvalError("reports not comparable: direction/protocol/runs/seed differ")
    rows = []
    for r in sorted(pre.rank_r):
        rows.append(_drop_row(f"rank_{r}", pre.rank_r[r], post.rank_r[r]))
    rows.append(_drop_row("mAP", pre.map_score, post.map_score))
    return {
        "direction": pre.direction,
        "protocol": pre.protocol,
        "n_runs": pre.n_runs,
        "seed": pre.seed,
        "config_hash": pre.config_hash,
        "rows": rows,
    }


def _drop_row(metric, pre_v, post_v):
    rel = "-" if pre_v == 0 else (pre_v - post_v) / pre_v
    return {
        "metric": metric,
        "pre": pre_v,
        "post": post_v,
        "abs_drop": pre_v - post_v,
        "rel_drop": rel,
    }


# -- file emission ----------------------------------------------------------

def write_report(report: EvalReport, json_path, csv_path=None):
    os.makedirs(os.path.dirname(os.path.abspath(json_path)), exist_ok=True)
    with open(json_path, "w") as f:
        f.write(report.to_json() + "\n")
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            runs = [f"run_{p['run']}" for p in report.per_run]
            writer.writerow(["metric", "mean"] + runs)
            for r in sorted(report.rank_r):
                writer.writerow([f"rank_{r}", repr(report.rank_r[r])]
                                + [repr(p["rank_r"][str(r)]) for p in report.per_run])
            writer.writerow(["mAP", repr(report.map_score)]
                            + [repr(p["map"]) for p in report.per_run])


def write_degradation(doc: dict, json_path, csv_path=None):
    os.makedirs(os.path.dirname(os.path.abspath(json_path)), exist_ok=True)
    with open(json_path, "w") as f:
        f.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "pre", "post", "abs_drop", "rel_drop"])
            for row in doc["rows"]:
                rel = row["rel_drop"]
                writer.writerow([row["metric"], repr(row["pre"]), repr(row["post"]),
                                 repr(row["abs_drop"]),
                                 rel if rel == "-" else repr(rel)])


def write_plots(pre: EvalReport, post: EvalReport, out_dir):
    """Optional CMC / mAP comparison plots (needs matplotlib)."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return []
    os.makedirs(out_dir, exist_ok=True)
    written = []
    rs = sorted(pre.rank_r)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(rs, [pre.rank_r[r] for r in rs], marker="o", label="before attack")
    ax.plot(rs, [post.rank_r[r] for r in rs], marker="s", label="after attack")
    ax.set_xlabel("r")
    ax.set_ylabel("rank-r (%)")
    ax.set_ylim(0, 105)
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "cmc.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar(["before", "after"], [pre.map_score, post.map_score], color=["C0", "C1"])
    ax.set_ylabel("mAP (%)")
    ax.set_ylim(0, 105)
    fig.tight_layout()
    path = os.path.join(out_dir, "map.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written
