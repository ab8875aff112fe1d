"""Victim-side interface: the cross-modal embedder under attack.

Holds the embedding contract (one deterministic embed function serving
both modalities), a small trainable toy victim for desk-scale runs, and
a file-based adapter so externally computed embeddings can be ranked
through the same machinery. Nothing in the attack-side modules imports
this file; the coupling happens only at evaluation time.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from edgepatch.checkpoint import load_checkpoint, save_checkpoint, write_training_curve
from edgepatch.config import VictimTrainConfig
from edgepatch.data.types import Modality, PersonImage
from edgepatch.errors import DatasetError, ModelError, TrainingDiverged
from edgepatch.nn import Adam, Conv2d, Linear, Module
from edgepatch.nn import tensor as T


@dataclass
class RankingResult:
    query_ref: str
    ordered_gallery: list            # [(gallery image id, similarity score)]
    correct_positions: list          # 1-based positions of same-identity items

    def best_correct(self):
        return min(self.correct_positions)


_INPUT_CHANNELS = {"edge": 1, "edge3": 3, "rgb": 3, "rgb+edge": 4}


class ToyVictimNet(Module):
    """Shared-backbone embedder: three stride-2 conv stages, global
    average pooling, linear projection."""

    def __init__(self, config: VictimTrainConfig, n_classes, rng):
        if config.input_mode not in _INPUT_CHANNELS:
            raise ModelError(f"unknown victim input_mode {config.input_mode!r}")
        in_ch = _INPUT_CHANNELS[config.input_mode]
        chans = tuple(config.channels)
        self.conv1 = Conv2d(in_ch, chans[0], 3, rng, stride=2, pad=1)
        self.conv2 = Conv2d(chans[0], chans[1], 3, rng, stride=2, pad=1)
        self.conv3 = Conv2d(chans[1], chans[2], 3, rng, stride=2, pad=1)
        self.proj = Linear(chans[2], config.embed_dim, rng)
        self.classifier = Linear(config.embed_dim, n_classes, rng)

    def embed_graph(self, x):
        h = T.relu(self.conv1(x))
        h = T.relu(self.conv2(h))
        h = T.relu(self.conv3(h))
        return self.proj(T.global_avgpool(h))


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0
_SOBEL_Y = _SOBEL_X.T.copy()


def _sobel_magnitude(gray):
    """Plain Sobel gradient magnitude (the victim's own shallow edge cue,
    independent of the attack pipeline's backbone)."""
    from edgepatch import _kernels

    x = gray[None, None].astype(np.float64)
    gx = _kernels.conv2d_forward(x, _SOBEL_X[None, None], 1, 1)
    gy = _kernels.conv2d_forward(x, _SOBEL_Y[None, None], 1, 1)
    return np.sqrt(gx[0, 0] ** 2 + gy[0, 0] ** 2)


def _edge_map(gray):
    """Denoised shallow edge cue: Gaussian blur then Sobel magnitude."""
    from scipy.ndimage import gaussian_filter

    return _sobel_magnitude(gaussian_filter(gray, 1.0))


def _oriented_edges(gray):
    """(mag, gx, gy) stack of the blurred image: keeps edge orientation."""
    from edgepatch import _kernels
    from scipy.ndimage import gaussian_filter

    b = gaussian_filter(gray, 1.0)[None, None].astype(np.float64)
    gx = _kernels.conv2d_forward(b, _SOBEL_X[None, None], 1, 1)[0, 0]
    gy = _kernels.conv2d_forward(b, _SOBEL_Y[None, None], 1, 1)[0, 0]
    return np.stack([np.sqrt(gx ** 2 + gy ** 2), gx, gy])


def _channels_from_rgb(rgb_hwc, input_mode):
    """(H,W,3) float pixels -> (C,H,W) victim input channels."""
    rgb = np.asarray(rgb_hwc, dtype=np.float64)
    luma = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    if input_mode == "edge":
        return _edge_map(luma)[None]
    if input_mode == "edge3":
        return _oriented_edges(luma)
    if input_mode == "rgb":
        return rgb.transpose(2, 0, 1)
    return np.concatenate([rgb.transpose(2, 0, 1), _edge_map(luma)[None]], axis=0)


def _preprocess(image: PersonImage, input_mode):
    return _channels_from_rgb(image.as_rgb(), input_mode)


@dataclass
class VictimModel:
    """Black-box embedding interface: image -> length-E vector."""

    name: str
    embed_dim: int
    metadata: dict = field(default_factory=dict)
    _net: ToyVictimNet = None
    _input_mode: str = "edge"
    _input_size: tuple = None
    _lookup: dict = None

    def embed(self, image: PersonImage) -> np.ndarray:
        if self._lookup is not None:
            key = image.image_id
            if key not in self._lookup:
                raise ModelError(f"embedding not found: {key}")
            return self._lookup[key]
        if self._input_size and (image.height, image.width) != tuple(self._input_size):
            raise ModelError(
                f"victim input shape mismatch: expected {tuple(self._input_size)}, "
                f"got {(image.height, image.width)}")
        x = T.Tensor(_preprocess(image, self._input_mode)[None])
        return self._net.embed_graph(x).data[0].copy()

    def embed_many(self, images, chunk=32) -> np.ndarray:
        if self._lookup is not None:
            return np.stack([self.embed(im) for im in images]) if images else np.zeros((0, self.embed_dim))
        out = []
        for lo in range(0, len(images), chunk):
            batch = images[lo:lo + chunk]
            for im in batch:
                if self._input_size and (im.height, im.width) != tuple(self._input_size):
                    raise ModelError(
                        f"victim input shape mismatch: expected {tuple(self._input_size)}, "
                        f"got {(im.height, im.width)}")
            x = T.Tensor(np.stack([_preprocess(im, self._input_mode) for im in batch]))
            out.append(self._net.embed_graph(x).data.copy())
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.embed_dim))


def embed(image: PersonImage, model: VictimModel) -> np.ndarray:
    return model.embed(image)


def rank_by_similarity(query_vec, gallery_vecs, gallery_images, query_ref):
    """Cosine ranking with deterministic ties (gallery id ascending)."""
    qn = query_vec / max(np.linalg.norm(query_vec), 1e-12)
    gn = gallery_vecs / np.maximum(
        np.linalg.norm(gallery_vecs, axis=1, keepdims=True), 1e-12)
    scores = gn @ qn
    order = sorted(range(len(gallery_images)),
                   key=lambda i: (-scores[i], gallery_images[i].image_id))
    ordered = [(gallery_images[i].image_id, float(scores[i])) for i in order]
    gpids = [gallery_images[i].person_id for i in order]
    return ordered, gpids


def rank(query: PersonImage, gallery, model: VictimModel) -> RankingResult:
    """Rank the whole gallery against one query."""
    if not gallery:
        raise ModelError("empty gallery")
    qv = model.embed(query)
    gv = model.embed_many(list(gallery))
    ordered, gpids = rank_by_similarity(qv, gv, list(gallery), query.image_id)
    correct = [pos for pos, pid in enumerate(gpids, start=1) if pid == query.person_id]
    return RankingResult(query_ref=query.image_id, ordered_gallery=ordered,
                         correct_positions=correct)


# -- toy victim training --------------------------------------------------

def _augment_rgb(rgb_hwc, rng, config):
    """Train-time robustness, applied in pixel space so derived channels
    stay physically consistent: brightness jitter plus random structured
    occluders (noise / solid / stripes)."""
    out = np.asarray(rgb_hwc, dtype=np.float64).copy()
    out *= rng.uniform(0.85, 1.1)
    if rng.random() < config.erase_prob:
        h, w = out.shape[:2]
        eh = int(rng.uniform(0.10, 0.35) * h)
        ew = int(rng.uniform(0.20, 0.55) * w)
        y0 = int(rng.integers(0, max(h - eh, 1)))
        x0 = int(rng.integers(0, max(w - ew, 1)))
        kind = rng.integers(5)
        c0 = rng.uniform(0.0, 1.0, size=(1, 1, 3))
        c1 = rng.uniform(0.0, 1.0, size=(1, 1, 3))
        if kind == 0:
            fill = rng.uniform(0.0, 1.0, size=(eh, ew, 3))
        elif kind == 1:
            fill = np.broadcast_to(c0, (eh, ew, 3)).copy()
        elif kind == 2:  # stripes: strong structured edges
            period = int(rng.integers(2, 6))
            if rng.random() < 0.5:
                phase = (np.arange(ew) // period % 2)[None, :, None]
            else:
                phase = (np.arange(eh) // period % 2)[:, None, None]
            fill = c0 + (c1 - c0) * np.broadcast_to(phase, (eh, ew, 1))
        elif kind == 3:  # checkerboard
            period = int(rng.integers(2, 8))
            yyg, xxg = np.indices((eh, ew))
            phase = (((yyg // period) + (xxg // period)) % 2)[:, :, None]
            fill = c0 + (c1 - c0) * phase
        else:  # random bold blobs
            fill = np.broadcast_to(c0, (eh, ew, 3)).copy()
            for _ in range(int(rng.integers(2, 6))):
                by, bx = rng.integers(0, eh), rng.integers(0, ew)
                bry = max(int(rng.uniform(0.1, 0.5) * eh), 1)
                brx = max(int(rng.uniform(0.1, 0.5) * ew), 1)
                yyg, xxg = np.indices((eh, ew))
                blob = ((yyg - by) / bry) ** 2 + ((xxg - bx) / brx) ** 2 <= 1.0
                fill[blob] = rng.uniform(0.0, 1.0, size=3)
        out[y0:y0 + eh, x0:x0 + ew, :] = np.clip(fill, 0.0, 1.0)
    return np.clip(out, 0.0, 1.0)


def _hard_triplet(embeds_t, pids, margin):
    """Batch-hard triplet on L2-normalized embeddings."""
    e = T.l2_normalize(embeds_t, axis=-1)
    b = e.shape[0]
    diff = T.sub(T.reshape(e, (b, 1, -1)), T.reshape(e, (1, b, -1)))
    dmat = T.sqrt(T.add(T.sum_(T.mul(diff, diff), axis=-1), 1e-24))
    pid_arr = np.asarray(pids)
    same = pid_arr[:, None] == pid_arr[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    d = dmat.data
    rows, ap_idx, an_idx = [], [], []
    for i in range(b):
        if not pos_mask[i].any() or not neg_mask[i].any():
            continue
        rows.append(i)
        ap_idx.append(int(np.argmax(np.where(pos_mask[i], d[i], -np.inf))))
        an_idx.append(int(np.argmin(np.where(neg_mask[i], d[i], np.inf))))
    if not rows:
        return T.Tensor(0.0)
    d_ap = dmat[np.asarray(rows), np.asarray(ap_idx)]
    d_an = dmat[np.asarray(rows), np.asarray(an_idx)]
    viol = T.relu(T.add(T.sub(d_ap, d_an), margin))
    return T.mean(viol)


def _cross_entropy(logits, labels):
    logp = T.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return T.mul(T.sum_(T.mul(logp, T.Tensor(onehot))), -1.0 / len(labels))


def train_toy_victim(dataset, config: VictimTrainConfig = None, out_dir=None) -> VictimModel:
    """Identity classification + cross-modal batch-hard triplet training
    of the toy embedder. Deterministic given config.seed."""
    config = config or VictimTrainConfig()
    classes = sorted(dataset.identities)
    label_of = {pid: i for i, pid in enumerate(classes)}
    rng_init = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    net = ToyVictimNet(config, len(classes), rng_init)
    h, w = dataset.image_size
    model = VictimModel(name="toy-victim", embed_dim=config.embed_dim,
                        metadata={"classes": classes, "image_size": [h, w]},
                        _net=net, _input_mode=config.input_mode,
                        _input_size=(h, w))

    if config.epochs <= 0:
        _persist_victim(model, config, out_dir, history=[])
        return model

    groups = {}
    for im in dataset.images:
        groups.setdefault((im.person_id, im.modality), []).append(im)
    for pid in classes:
        if (pid, Modality.VISIBLE) not in groups or (pid, Modality.INFRARED) not in groups:
            raise DatasetError(f"identity {pid} missing from one modality")
    raw = {}
    for key, members in groups.items():
        members.sort(key=lambda im: im.image_id)
        raw[key] = [im.as_rgb().astype(np.float64) for im in members]

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    params = net.parameters()
    opt = Adam(params, lr=config.lr)
    n_batch_ids = min(config.batch_identities, len(classes))
    per_mod = config.images_per_id
    steps_per_epoch = max(1, int(np.ceil(
        len(dataset.images) / (n_batch_ids * per_mod * 2))))

    history = []
    last_good = net.state_dict()
    avg_from = config.epochs - max(1, int(config.avg_tail * config.epochs)) + 1
    avg_state, avg_count = None, 0
    for epoch in range(1, config.epochs + 1):
        # step decay stabilizes the endgame at toy scale
        opt.lr = config.lr * (0.3 if epoch > 0.6 * config.epochs else 1.0)
        losses = []
        for _ in range(steps_per_epoch):
            ids = sorted(rng.choice(classes, size=n_batch_ids, replace=False).tolist())
            batch, labels = [], []
            for pid in ids:
                for modality in (Modality.VISIBLE, Modality.INFRARED):
                    pool = raw[(pid, modality)]
                    take = rng.choice(len(pool), size=min(per_mod, len(pool)), replace=False)
                    while len(take) < per_mod:
                        take = np.concatenate([take, take])[:per_mod]
                    for t in take[:per_mod]:
                        aug = _augment_rgb(pool[t], rng, config)
                        batch.append(_channels_from_rgb(aug, config.input_mode))
                        labels.append(label_of[pid])
            x = T.Tensor(np.stack(batch))
            emb = net.embed_graph(x)
            logits = net.classifier(emb)
            pids = [classes[l] for l in labels]
            loss = T.add(T.mul(_cross_entropy(logits, labels), config.ce_weight),
                         T.mul(_hard_triplet(emb, pids, config.margin), config.triplet_weight))
            value = loss.item()
            if not np.isfinite(value):
                _persist_victim(model, config, out_dir, history, state=last_good)
                raise TrainingDiverged("training diverged: non-finite victim loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        last_good = net.state_dict()
        history.append((epoch, float(np.mean(losses))))
        if epoch >= avg_from:
            # tail weight averaging damps endgame oscillation
            cur = net.state_dict()
            if avg_state is None:
                avg_state = cur
            else:
                for k in avg_state:
                    avg_state[k] = (avg_state[k] * avg_count + cur[k]) / (avg_count + 1)
            avg_count += 1
    if avg_state is not None:
        net.load_state_dict(avg_state)
    _persist_victim(model, config, out_dir, history)
    return model


def _persist_victim(model, config, out_dir, history, state=None):
    if out_dir is None:
        return
    if state is not None:
        model._net.load_state_dict(state)
    save_victim(os.path.join(out_dir, "victim.npz"), model, config)
    write_training_curve(os.path.join(out_dir, "victim_curve.csv"), history)


def save_victim(path, model: VictimModel, config: VictimTrainConfig):
    meta = {
        "embed_dim": model.embed_dim,
        "metadata": model.metadata,
        "train_config": vars(config).copy(),
    }
    meta["train_config"]["channels"] = list(meta["train_config"]["channels"])
    save_checkpoint(path, "victim", model._net.state_dict(), meta)


def load_victim(path) -> VictimModel:
    meta, params = load_checkpoint(path, expected_kind="victim")
    cfg_d = dict(meta["train_config"])
    cfg_d["channels"] = tuple(cfg_d.get("channels", (16, 32, 64)))
    config = VictimTrainConfig(**cfg_d)
    classes = meta["metadata"]["classes"]
    net = ToyVictimNet(config, len(classes), np.random.default_rng(0))
    net.load_state_dict(params)
    return VictimModel(name="toy-victim", embed_dim=config.embed_dim,
                       metadata=meta["metadata"], _net=net,
                       _input_mode=config.input_mode,
                       _input_size=tuple(meta["metadata"]["image_size"]))


# -- embedding exchange ----------------------------------------------------

def write_embedding_exchange(model: VictimModel, images, path):
    """One JSON-lines record per image; image_id keys the exchange."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    vecs = model.embed_many(list(images))
    with open(path, "w") as f:
        for im, vec in zip(images, vecs):
            rec = {
                "image_id": im.image_id,
                "person_id": im.person_id,
                "modality": im.modality.value,
                "camera_id": im.camera_id,
                "embedding": [float(v) for v in vec],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def external_victim(exchange_dir) -> VictimModel:
    """Victim backed by precomputed embeddings (one or more .jsonl files)."""
    if os.path.isdir(exchange_dir):
        files = sorted(
            os.path.join(exchange_dir, f) for f in os.listdir(exchange_dir)
            if f.endswith(".jsonl"))
    elif os.path.isfile(exchange_dir):
        files = [exchange_dir]
    else:
        raise ModelError(f"bad embedding exchange: {exchange_dir} does not exist")
    if not files:
        raise ModelError(f"bad embedding exchange: no .jsonl files under {exchange_dir}")
    lookup = {}
    dim = None
    for path in files:
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    key = rec["image_id"]
                    vec = np.asarray(rec["embedding"], dtype=np.float64)
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ModelError(
                        f"bad embedding exchange: {path}:{lineno}: {exc}") from exc
                if key in lookup:
                    raise ModelError(f"bad embedding exchange: duplicate image_id {key!r}")
                if dim is None:
                    dim = vec.size
                elif vec.size != dim:
                    raise ModelError(
                        f"bad embedding exchange: inconsistent dims {vec.size} vs {dim}")
                lookup[key] = vec
    if not lookup:
        raise ModelError("bad embedding exchange: no records")
    return VictimModel(name="external", embed_dim=int(dim),
                       metadata={"n_records": len(lookup)}, _lookup=lookup)
