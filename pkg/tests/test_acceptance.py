"""Acceptance suite: every criterion at its stated tolerance, one
pass/fail line per criterion (run with -s to see them).

The pipeline criteria (4-8) share one trained stack at the default
experiment configuration; training happens once per session.
"""

import json
import os
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from edgepatch import evaluation as ev
from edgepatch import extractor as ex
from edgepatch import generator as gen
from edgepatch import victim as vic
from edgepatch.config import ExperimentConfig
from edgepatch.data import Modality, generate_toy_dataset, holdout_split
from edgepatch.nn import relative_grad_error
from edgepatch.nn import tensor as T
from edgepatch.victim import RankingResult

_RESULTS = []


def _record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    _RESULTS.append(line)
    print("\n" + line)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Train the full toy stack once at the default configuration."""
    cfg = ExperimentConfig()
    t0 = time.time()
    dataset = generate_toy_dataset(cfg.dataset.n_ids, cfg.dataset.per_id_per_modality,
                                   tuple(cfg.dataset.image_size), cfg.dataset.seed)
    train, test = holdout_split(dataset, cfg.dataset.holdout_per_id)
    extractor = ex.train_extractor(train, cfg.extractor)
    generator = gen.train_generator(train, extractor, cfg.generator)
    victim = vic.train_toy_victim(train, cfg.victim)
    elapsed = time.time() - t0
    return {
        "config": cfg, "train": train, "test": test, "extractor": extractor,
        "generator": generator, "victim": victim, "train_seconds": elapsed,
    }


# -- criterion 1: metric oracles ------------------------------------------------


def _brute_cmc(rankings, r_values):
    out = {}
    for r in r_values:
        out[r] = 100.0 * sum(
            1 for rk in rankings if any(p <= r for p in rk.correct_positions)
        ) / len(rankings)
    return out


def _brute_map(rankings):
    aps = []
    for rk in rankings:
        pos = sorted(rk.correct_positions)
        aps.append(sum((i + 1) / p for i, p in enumerate(pos)) / len(pos))
    return 100.0 * float(np.mean(aps))


def test_criterion_1_metric_oracles():
    rng = np.random.default_rng(20240817)
    t0 = time.time()
    worst = 0.0
    for case in range(200):
        n_queries = int(rng.integers(1, 9))
        rankings = []
        for q in range(n_queries):
            gsize = int(rng.integers(2, 31))
            n_rel = int(rng.integers(1, min(5, gsize) + 1))
            pos = sorted(int(p) for p in rng.choice(gsize, size=n_rel, replace=False) + 1)
            ordered = [(f"g{i}", float(gsize - i)) for i in range(gsize)]
            rankings.append(RankingResult(query_ref=f"q{case}_{q}",
                                          ordered_gallery=ordered,
                                          correct_positions=pos))
        r_values = (1, 5, 10, 20)
        got_cmc = ev.cmc(rankings, r_values)
        want_cmc = _brute_cmc(rankings, r_values)
        for r in r_values:
            worst = max(worst, abs(got_cmc[r] - want_cmc[r]))
        worst = max(worst, abs(ev.mean_average_precision(rankings) - _brute_map(rankings)))
    elapsed = time.time() - t0
    ok = worst < 1e-9 and elapsed < 10.0
    _record(1, ok, f"metric oracle max abs err {worst:.2e} over 200 instances "
                   f"in {elapsed:.2f}s (tol 1e-9, budget 10s)")
    assert worst < 1e-9
    assert elapsed < 10.0


# -- criterion 2: loss oracles ---------------------------------------------------


def test_criterion_2_loss_oracles():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        ids = sorted(rng.choice(1000, size=n, replace=False).tolist())
        vis = {p: rng.normal(size=16) for p in ids}
        ir = {p: rng.normal(size=16) for p in ids}
        naive = 0.0
        for p in ids:
            for q in ids:
                if q == p:
                    continue
                naive += np.linalg.norm(vis[p] - ir[p])
                naive -= np.linalg.norm(vis[p] - vis[q]) + np.linalg.norm(ir[p] - ir[q])
        worst = max(worst, abs(ex.extractor_loss(vis, ir, ids) - naive))

        naive_gen = float(np.mean([np.linalg.norm(vis[p] - ir[p]) for p in ids]))
        worst = max(worst, abs(gen.generator_loss(vis, ir) - naive_gen))
    ok = worst < 1e-6
    _record(2, ok, f"loss oracle max abs err {worst:.2e} over 50 batches (tol 1e-6)")
    assert ok


# -- criterion 3: gradient checks ------------------------------------------------


def test_criterion_3_gradient_checks():
    t0 = time.time()
    ds = generate_toy_dataset(2, 2, (32, 32), seed=91)
    from edgepatch.config import ExtractorTrainConfig, GeneratorTrainConfig
    from edgepatch import edges

    ext = ex.ExtractorModel(ExtractorTrainConfig(
        feature_dim=12, fuse_channels=3, enc_channels=4, seed=92))
    ims = sorted(ds.images, key=lambda im: (im.person_id, im.modality.value))
    stacks = [edges.detect_edges(im) for im in ims]
    levels = [T.Tensor(np.stack([s.levels[k] for s in stacks])[:, None]) for k in range(5)]
    groups = {}
    for i, im in enumerate(ims):
        groups.setdefault((im.person_id, im.modality), []).append(i)

    def forward_ext():
        u, _ = ext.fuse_graph(levels)
        feats = ext.encode_graph(u)
        rows = {}
        for key, idx in groups.items():
            rows[key] = T.l2_normalize(
                T.mean(feats[np.array(idx)], axis=0, keepdims=True), axis=-1)
        vis = T.concat([rows[(p, Modality.VISIBLE)] for p in (1, 2)], axis=0)
        ir = T.concat([rows[(p, Modality.INFRARED)] for p in (1, 2)], axis=0)
        return ex.separation_loss_graph(vis, ir)

    ext_params = ext.parameters()

    def back_ext():
        for p in ext_params:
            p.grad = None
        forward_ext().backward()

    err_ext = relative_grad_error(lambda: forward_ext().item(), back_ext,
                                  ext_params, coords_per_param=10)

    gcfg = GeneratorTrainConfig(z_dim=6, embed_dim=8, depth=1, heads=2,
                                token_grid=2, token_pixels=4, seed=93)
    ext.set_trainable(False)
    gmodel = gen.GeneratorModel(gcfg, y_dim=12)
    vis_ims = [im for im in ims if im.modality is Modality.VISIBLE][:2]
    images = np.stack([im.as_rgb().astype(np.float64).transpose(2, 0, 1)
                       for im in vis_ims])
    y = ex.extract_batch(vis_ims, ext)
    z = np.random.default_rng(5).normal(size=(2, gcfg.z_dim))
    ir_rows = np.random.default_rng(6).normal(size=(2, 12))
    ir_rows /= np.linalg.norm(ir_rows, axis=1, keepdims=True)

    def forward_gen():
        patches = gmodel.forward_graph(T.Tensor(z), T.Tensor(y))
        comp = gen.composite_graph(T.Tensor(images), patches, gmodel.placement)
        feats = ext.extract_graph(comp)
        return T.mul(gen.alignment_distance_graph(feats, T.Tensor(ir_rows)), -1.0)

    gen_params = gmodel.parameters()

    def back_gen():
        for p in gen_params:
            p.grad = None
        forward_gen().backward()

    err_gen = relative_grad_error(lambda: forward_gen().item(), back_gen,
                                  gen_params, coords_per_param=6)
    elapsed = time.time() - t0
    ok = err_ext <= 1e-3 and err_gen <= 1e-3 and elapsed < 120.0
    _record(3, ok, f"gradcheck rel err: extractor {err_ext:.2e}, generator "
                   f"{err_gen:.2e} in {elapsed:.1f}s (tol 1e-3, budget 120s)")
    assert err_ext <= 1e-3
    assert err_gen <= 1e-3
    assert elapsed < 120.0


# -- criterion 4: extractor discriminativity -------------------------------------


def test_criterion_4_extractor_discriminativity(pipeline):
    test = pipeline["test"]
    model = pipeline["extractor"]
    feats = {im.image_id: ex.extract(im, model).vector for im in test.images}
    same, diff = [], []
    for a in test.images:
        if a.modality is not Modality.VISIBLE:
            continue
        for b in test.images:
            if b.modality is not Modality.INFRARED:
                continue
            d = float(np.linalg.norm(feats[a.image_id] - feats[b.image_id]))
            (same if a.person_id == b.person_id else diff).append(d)
    margin = float(np.mean(diff) - np.mean(same))
    ok = margin > 0
    _record(4, ok, f"held-out cross-modal margin {margin:.4f} "
                   f"(same {np.mean(same):.4f} vs diff {np.mean(diff):.4f}; need > 0)")
    assert ok


# -- criterion 5: victim gate ----------------------------------------------------


def test_criterion_5_victim_gate(pipeline):
    cfgev = pipeline["config"].evaluation
    rep = ev.evaluate(pipeline["victim"], pipeline["test"], "VIS_TO_IR", "ALL",
                      n_runs=1, seed=cfgev.seed)
    budget_ok = pipeline["train_seconds"] <= 900.0
    ok = rep.rank_r[1] >= 80.0 and budget_ok
    _record(5, ok, f"pre-attack VIS_TO_IR rank-1 {rep.rank_r[1]:.1f}% (need >= 80); "
                   f"full pipeline trained in {pipeline['train_seconds']:.0f}s "
                   f"(budget 900s)")
    assert rep.rank_r[1] >= 80.0
    assert budget_ok


# -- criterion 6: attack efficacy -------------------------------------------------


def test_criterion_6_attack_efficacy(pipeline):
    victim = pipeline["victim"]
    test = pipeline["test"]
    source = (pipeline["generator"], pipeline["extractor"])
    lines = []
    ok = True
    for direction in ("VIS_TO_IR", "IR_TO_VIS"):
        for seed in (1, 2, 3):
            pre = ev.evaluate(victim, test, direction, "SINGLE_SHOT", n_runs=2, seed=seed)
            post = ev.evaluate(victim, test, direction, "SINGLE_SHOT", n_runs=2,
                               seed=seed, patch_source=source)
            r1_ok = post.rank_r[1] <= 0.5 * pre.rank_r[1]
            map_ok = post.map_score <= 0.6 * pre.map_score
            ok &= r1_ok and map_ok
            lines.append(f"{direction} seed {seed}: rank-1 {pre.rank_r[1]:.1f}->"
                         f"{post.rank_r[1]:.1f} mAP {pre.map_score:.1f}->"
                         f"{post.map_score:.1f}"
                         f"{'' if (r1_ok and map_ok) else '  **FAIL**'}")
    _record(6, ok, "post <= 50% rank-1 and <= 60% mAP of pre on paired splits | "
            + " | ".join(lines))
    assert ok


# -- criterion 7: ablation trend --------------------------------------------------


def test_criterion_7_ablation_trend(pipeline):
    victim = pipeline["victim"]
    test = pipeline["test"]
    extractor = pipeline["extractor"]
    generator = pipeline["generator"]
    seed = pipeline["config"].evaluation.seed
    baseline = ev.evaluate(victim, test, "VIS_TO_IR", "ALL", n_runs=1, seed=seed)
    schedule = [(), (5,), (4, 5), (3, 4, 5), (2, 3, 4, 5), (1, 2, 3, 4, 5)]
    maps = []
    for removed in schedule:
        variant = ex.ablate_levels(extractor, set(removed))
        rep = ev.evaluate(victim, test, "VIS_TO_IR", "ALL", n_runs=1, seed=seed,
                          patch_source=(generator, variant))
        maps.append(rep.map_score)
    inversions = [(i, maps[i] - maps[i + 1]) for i in range(len(maps) - 1)
                  if maps[i + 1] < maps[i]]
    big = [d for _, d in inversions if d > 2.0]
    recovery = maps[-1] / max(baseline.map_score, 1e-9)
    ok = len(inversions) <= 1 and not big and recovery >= 0.70
    detail = (f"mAP over removal schedule {['%.1f' % m for m in maps]} "
              f"(baseline {baseline.map_score:.1f}); inversions {inversions}; "
              f"'all' recovery {100 * recovery:.0f}% (need >= 70%)")
    _record(7, ok, detail)
    assert len(inversions) <= 1, detail
    assert not big, detail
    assert recovery >= 0.70, detail


# -- criterion 8: determinism ------------------------------------------------------


def test_criterion_8_attack_determinism(pipeline, tmp_path):
    cfg = pipeline["config"]
    ck = tmp_path / "checkpoints"
    ck.mkdir()
    ex.save_extractor(str(ck / "extractor.npz"), pipeline["extractor"])
    gen.save_generator(str(ck / "generator.npz"), pipeline["generator"])
    vic.save_victim(str(ck / "victim.npz"), pipeline["victim"], cfg.victim)
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(cfg.to_json())

    from edgepatch.cli import main

    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        out.mkdir()
        shutil.copytree(ck, out / "checkpoints")
        rc = main(["attack", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0
        outs.append(out)
    identical = True
    for name in os.listdir(outs[0] / "reports"):
        a = (outs[0] / "reports" / name).read_bytes()
        b = (outs[1] / "reports" / name).read_bytes()
        identical &= a == b
    _record(8, identical, "attack rerun with identical config+seed produced "
                          "byte-identical reports")
    assert identical


# -- criterion 9: black-box property ----------------------------------------------


def test_criterion_9_black_box_property():
    import ast

    import edgepatch

    pkg = os.path.dirname(edgepatch.__file__)
    offenders = []
    for rel in ("edges.py", "extractor.py", "generator.py"):
        tree = ast.parse(open(os.path.join(pkg, rel)).read())
        for node in ast.walk(tree):
            if isinstance(node, ast.Import):
                names = [a.name for a in node.names]
            elif isinstance(node, ast.ImportFrom):
                names = [node.module or ""]
            else:
                continue
            offenders.extend(f"{rel}:{n}" for n in names if "victim" in (n or ""))

    code = (
        "import sys\n"
        "class B:\n"
        "    def find_module(self, n, p=None):\n"
        "        return self if n == 'edgepatch.victim' else None\n"
        "    def load_module(self, n):\n"
        "        raise ImportError('victim absent from build')\n"
        "sys.meta_path.insert(0, B())\n"
        "from edgepatch.config import ExtractorTrainConfig, GeneratorTrainConfig\n"
        "from edgepatch.data import generate_toy_dataset, holdout_split\n"
        "from edgepatch.extractor import train_extractor\n"
        "from edgepatch.generator import train_generator\n"
        "ds = generate_toy_dataset(2, 2, (32, 32), seed=1)\n"
        "train, _ = holdout_split(ds, 1)\n"
        "ext = train_extractor(train, ExtractorTrainConfig(epochs=1,"
        " batch_identities=2, images_per_id=1, feature_dim=8, fuse_channels=2,"
        " enc_channels=3, seed=1))\n"
        "train_generator(train, ext, GeneratorTrainConfig(epochs=1,"
        " batch_identities=2, images_per_id=1, z_dim=4, embed_dim=8, depth=1,"
        " heads=2, token_grid=2, token_pixels=4, seed=1))\n"
        "assert 'edgepatch.victim' not in sys.modules\n"
        "print('OK_NO_VICTIM')\n"
    )
    proc = subprocess.run([sys.executable, "-c", code], capture_output=True,
                          text=True, timeout=300)
    trained = proc.returncode == 0 and "OK_NO_VICTIM" in proc.stdout
    ok = not offenders and trained
    _record(9, ok, f"no victim imports in attack modules ({offenders or 'clean'}); "
                   f"generator trained with victim module absent: {trained}")
    assert not offenders
    assert trained, proc.stderr


def test_zzz_acceptance_summary():
    print("\n" + "=" * 72)
    for line in _RESULTS:
        print(line)
    print("=" * 72)
