"""Victim interface: embedding, ranking, toy training, exchange files."""

import numpy as np
import pytest

from edgepatch import victim as vic
from edgepatch.config import VictimTrainConfig
from edgepatch.data import Modality, generate_toy_dataset, holdout_split
from edgepatch.errors import ModelError


def test_embed_deterministic(tiny_victim, toy_dataset):
    im = toy_dataset.images[0]
    a = vic.embed(im, tiny_victim)
    b = vic.embed(im, tiny_victim)
    assert np.array_equal(a, b)
    assert a.shape == (64,)
    assert np.isfinite(a).all()
    assert np.linalg.norm(a) > 0


def test_embed_many_matches_single(tiny_victim, toy_dataset):
    ims = toy_dataset.images[:5]
    batch = tiny_victim.embed_many(ims)
    for i, im in enumerate(ims):
        assert np.allclose(batch[i], vic.embed(im, tiny_victim), atol=1e-10)


def test_embed_shape_mismatch(tiny_victim):
    from edgepatch.data import PersonImage

    bad = PersonImage(person_id=1, modality=Modality.VISIBLE, camera_id=1,
                      pixels=np.zeros((32, 32, 3), dtype=np.float32))
    with pytest.raises(ModelError, match="victim input shape mismatch"):
        vic.embed(bad, tiny_victim)


def test_rank_self_similarity_first(tiny_victim, toy_dataset):
    gallery = toy_dataset.images[:6]
    query = gallery[2]
    result = vic.rank(query, gallery, tiny_victim)
    top_id, top_score = result.ordered_gallery[0]
    assert top_id == query.image_id
    assert np.isclose(top_score, 1.0, atol=1e-9)
    assert 1 in result.correct_positions


def test_rank_order_invariance(tiny_victim, toy_dataset, rng):
    gallery = list(toy_dataset.images[:8])
    query = toy_dataset.images[9]
    a = vic.rank(query, gallery, tiny_victim)
    shuffled = list(gallery)
    rng.shuffle(shuffled)
    b = vic.rank(query, shuffled, tiny_victim)
    assert a.ordered_gallery == b.ordered_gallery
    assert a.correct_positions == b.correct_positions


def test_rank_totality(tiny_victim, toy_dataset):
    gallery = toy_dataset.images[:10]
    result = vic.rank(toy_dataset.images[11], gallery, tiny_victim)
    assert sorted(g for g, _ in result.ordered_gallery) == sorted(
        im.image_id for im in gallery)
    scores = [s for _, s in result.ordered_gallery]
    assert all(a >= b for a, b in zip(scores, scores[1:]))


def test_rank_matches_brute_force(tiny_victim, toy_dataset):
    gallery = toy_dataset.images[:10]
    query = toy_dataset.images[10]
    result = vic.rank(query, gallery, tiny_victim)

    qv = vic.embed(query, tiny_victim)
    qv = qv / np.linalg.norm(qv)
    pairs = []
    for im in gallery:
        gv = vic.embed(im, tiny_victim)
        gv = gv / np.linalg.norm(gv)
        pairs.append((im.image_id, float(qv @ gv)))
    pairs.sort(key=lambda t: (-t[1], t[0]))
    assert [g for g, _ in result.ordered_gallery] == [g for g, _ in pairs]


def test_rank_empty_gallery(tiny_victim, toy_dataset):
    with pytest.raises(ModelError, match="empty gallery"):
        vic.rank(toy_dataset.images[0], [], tiny_victim)


# -- toy training -------------------------------------------------------------


def test_zero_epoch_victim_near_chance():
    ds = generate_toy_dataset(4, 3, (64, 32), seed=15)
    train, test = holdout_split(ds, 1)
    model = vic.train_toy_victim(train, VictimTrainConfig(epochs=0, seed=1))
    from edgepatch.evaluation import evaluate

    rep = evaluate(model, test, "VIS_TO_IR", "ALL", 1, seed=0)
    assert rep.rank_r[1] <= 80.0  # untrained: far from a trained matcher


def test_victim_training_deterministic(toy_split):
    train, _ = toy_split
    cfg = VictimTrainConfig(epochs=2, batch_identities=4, seed=29)
    a = vic.train_toy_victim(train, cfg)
    b = vic.train_toy_victim(train, cfg)
    assert a._net.param_fingerprint() == b._net.param_fingerprint()


def test_trained_victim_cross_modal_similarity(tiny_victim, toy_split):
    _, test = toy_split
    vecs = {im.image_id: vic.embed(im, tiny_victim) for im in test.images}
    same, diff = [], []
    for a in test.images:
        if a.modality is not Modality.VISIBLE:
            continue
        va = vecs[a.image_id] / np.linalg.norm(vecs[a.image_id])
        for b in test.images:
            if b.modality is not Modality.INFRARED:
                continue
            vb = vecs[b.image_id] / np.linalg.norm(vecs[b.image_id])
            (same if a.person_id == b.person_id else diff).append(float(va @ vb))
    assert np.mean(same) > np.mean(diff)


def test_victim_checkpoint_round_trip(tiny_victim, tmp_path, toy_dataset):
    path = str(tmp_path / "victim.npz")
    vic.save_victim(path, tiny_victim, VictimTrainConfig(epochs=6, batch_identities=4, seed=17))
    loaded = vic.load_victim(path)
    im = toy_dataset.images[3]
    assert np.array_equal(vic.embed(im, loaded), vic.embed(im, tiny_victim))


# -- embedding exchange --------------------------------------------------------


def test_exchange_round_trip_identical_rankings(tiny_victim, toy_dataset, tmp_path):
    images = toy_dataset.images[:8]
    path = str(tmp_path / "split.jsonl")
    vic.write_embedding_exchange(tiny_victim, images, path)
    external = vic.external_victim(str(tmp_path))
    assert external.embed_dim == tiny_victim.embed_dim
    query, gallery = images[0], images[1:]
    a = vic.rank(query, gallery, tiny_victim)
    b = vic.rank(query, gallery, external)
    assert [g for g, _ in a.ordered_gallery] == [g for g, _ in b.ordered_gallery]
    for (_, sa), (_, sb) in zip(a.ordered_gallery, b.ordered_gallery):
        assert np.isclose(sa, sb, atol=1e-9)


def test_exchange_small_lookup_end_to_end(tmp_path, toy_dataset):
    images = toy_dataset.images[:4]
    path = tmp_path / "four.jsonl"
    import json

    with open(path, "w") as f:
        for i, im in enumerate(images):
            f.write(json.dumps({
                "image_id": im.image_id, "person_id": im.person_id,
                "modality": im.modality.value, "camera_id": im.camera_id,
                "embedding": np.eye(4)[i].tolist()}) + "\n")
    model = vic.external_victim(str(path))
    res = vic.rank(images[0], images, model)
    assert res.ordered_gallery[0][0] == images[0].image_id


def test_exchange_duplicate_keys_rejected(tmp_path, toy_dataset):
    im = toy_dataset.images[0]
    path = tmp_path / "dup.jsonl"
    import json

    rec = json.dumps({"image_id": im.image_id, "person_id": im.person_id,
                      "modality": im.modality.value, "camera_id": im.camera_id,
                      "embedding": [1.0, 0.0]})
    path.write_text(rec + "\n" + rec + "\n")
    with pytest.raises(ModelError, match="bad embedding exchange: duplicate"):
        vic.external_victim(str(path))


def _dummy_model(images):
    lookup = {im.image_id: np.arange(3, dtype=float) for im in images}
    return vic.VictimModel(name="d", embed_dim=3, _lookup=lookup)


def test_exchange_missing_key_fails_at_call(tmp_path, toy_dataset):
    images = toy_dataset.images[:2]
    path = str(tmp_path / "partial.jsonl")
    vic.write_embedding_exchange(_dummy_model(images), images[:1], path)
    model = vic.external_victim(path)
    with pytest.raises(ModelError, match="embedding not found"):
        model.embed(images[1])


def test_exchange_malformed_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"image_id": "a"}\n')
    with pytest.raises(ModelError, match="bad embedding exchange"):
        vic.external_victim(str(path))
