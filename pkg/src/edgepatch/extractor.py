"""Identity-discriminative edge feature extractor.

Pipeline per image: fixed five-level edge backbone -> per-level refine
convolutions fused coarse-to-fine with upsampling -> small encoder
(conv block, global average pool, one MLP layer) -> L2-normalized
feature vector. Only the refine convolutions and the encoder train; the
objective pulls same-identity cross-modal centroids together while
pushing different identities apart within each modality.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from edgepatch import edges
from edgepatch.checkpoint import load_checkpoint, save_checkpoint, write_training_curve
from edgepatch.config import ExtractorTrainConfig
from edgepatch.data.types import Modality, PersonImage
from edgepatch.errors import ModelError, TrainingDiverged
from edgepatch.nn import Conv2d, Linear, Module, SGD
from edgepatch.nn import tensor as T

_LOSS_EPS = 1e-24


@dataclass
class EdgeFeature:
    """L2-normalized edge signature of one image."""

    vector: np.ndarray
    person_id: int = None
    modality: Modality = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)


@dataclass
class IdentityCentroid:
    person_id: int
    modality: Modality
    centroid: np.ndarray
    member_count: int


@dataclass
class FusedEdgeMap:
    """Full-resolution fused feature map plus the intermediate stages."""

    u: np.ndarray                       # (C, H, W)
    stage_outputs: list = field(default_factory=list)


class ExtractorModel(Module):
    """Trainable refine+encode stack over the fixed edge backbone."""

    def __init__(self, config: ExtractorTrainConfig = None, rng=None):
        config = config or ExtractorTrainConfig()
        rng = rng or np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        self.refine_convs = [
            Conv2d(1, config.fuse_channels, 3, rng, pad=1, bias=False)
            for _ in range(edges.N_LEVELS)
        ]
        self.enc_conv = Conv2d(config.fuse_channels, config.enc_channels, 3, rng,
                               stride=2, pad=1, bias=True)
        self.enc_mlp = Linear(config.enc_channels, config.feature_dim, rng)
        self.feature_dim = config.feature_dim
        self.fuse_channels = config.fuse_channels
        self.removed_levels = frozenset(int(k) for k in config.removed_levels)
        self.backbone = edges.BACKBONE_ID
        self.config = config

    # -- graph-building pieces (shared by inference and both trainers) --

    def fuse_graph(self, levels):
        """Coarse-to-fine fusion: u_i = Up(Conv(L_{6-i}) + u_{i-1}) with a
        zero u_0; removed levels contribute zero maps; the final stage is
        already at full resolution so its upsample is the identity."""
        n = next((lv.shape[0] for lv in levels if lv is not None), None)
        if n is None:
            raise ModelError("all levels absent; cannot infer shapes")
        stages = []
        u = None
        for i in range(1, edges.N_LEVELS + 1):
            k = edges.N_LEVELS + 1 - i  # consume L5 first
            lv = levels[k - 1]
            if k in self.removed_levels or lv is None:
                hk, wk = _level_shape(levels, k)
                contrib = T.Tensor(np.zeros((n, self.fuse_channels, hk, wk)))
            else:
                contrib = self.refine_convs[k - 1](lv)
            x = contrib if u is None else T.add(contrib, u)
            if i < edges.N_LEVELS:
                h, w = x.shape[2], x.shape[3]
                u = T.resize_bilinear(x, h * 2, w * 2)
            else:
                u = x
            stages.append(u)
        return u, stages

    def encode_graph(self, u):
        h = T.tanh(self.enc_conv(u))
        pooled = T.global_avgpool(h)
        feat = self.enc_mlp(pooled)
        return T.l2_normalize(feat, axis=-1)

    def extract_graph(self, x):
        """(N,C,H,W) image tensor -> (N,D) normalized features."""
        levels = edges.edge_pyramid(x)
        u, _ = self.fuse_graph(levels)
        return self.encode_graph(u)

    def clone(self):
        other = ExtractorModel(self.config)
        other.load_state_dict(self.state_dict())
        other.removed_levels = frozenset(self.removed_levels)
        return other


def _level_shape(levels, k):
    """Spatial shape of level k inferred from any present level."""
    for j, lv in enumerate(levels, start=1):
        if lv is not None:
            h = lv.shape[2] * 2 ** (j - 1)
            w = lv.shape[3] * 2 ** (j - 1)
            return h // 2 ** (k - 1), w // 2 ** (k - 1)
    raise ModelError("all levels absent; cannot infer shapes")


def _levels_to_tensors(stack):
    out = []
    for k in range(1, edges.N_LEVELS + 1):
        lv = stack.level(k)
        if lv is None or k in stack.removed_set:
            out.append(None)
        else:
            out.append(T.Tensor(np.asarray(lv, dtype=np.float64)[None, None]))
    return out


def fuse(stack, model) -> FusedEdgeMap:
    """Fuse one EdgeMapStack into a full-resolution feature map."""
    u, stages = model.fuse_graph(_levels_to_tensors(stack))
    return FusedEdgeMap(u=u.data[0].copy(),
                        stage_outputs=[s.data[0].copy() for s in stages])


def encode(fused, model) -> EdgeFeature:
    """Encode a fused map (FusedEdgeMap or (C,H,W) array) to a feature."""
    u = fused.u if isinstance(fused, FusedEdgeMap) else np.asarray(fused, dtype=np.float64)
    if u.ndim != 3 or u.shape[0] != model.fuse_channels:
        raise ModelError(
            f"model/input shape mismatch: expected ({model.fuse_channels},H,W), got {u.shape}")
    feat = model.encode_graph(T.Tensor(u[None]))
    return EdgeFeature(vector=feat.data[0].copy())


def extract(image: PersonImage, model) -> EdgeFeature:
    """detect_edges -> fuse -> encode for one image."""
    stack = edges.detect_edges(image)
    fused = fuse(stack, model)
    feat = encode(fused, model)
    feat.person_id = image.person_id
    feat.modality = image.modality
    return feat


def extract_batch(images, model) -> np.ndarray:
    """(N,D) feature matrix for same-sized images (batched forward)."""
    if not images:
        return np.zeros((0, model.feature_dim))
    grays = np.stack([im.grayscale().astype(np.float64) for im in images])[:, None]
    feats = model.extract_graph(T.Tensor(grays))
    return feats.data.copy()


def ablate_levels(model, removed) -> ExtractorModel:
    """Variant of the model with the given levels replaced by zero maps."""
    removed = frozenset(int(k) for k in removed)
    if not removed <= set(range(1, edges.N_LEVELS + 1)):
        raise ModelError(f"removed levels must be within 1..{edges.N_LEVELS}, got {sorted(removed)}")
    variant = model.clone()
    variant.removed_levels = removed
    return variant


def cluster_features(features) -> list:
    """Group features by (person_id, modality) into renormalized mean
    centroids. A zero mean (antipodal members) is an error."""
    groups = {}
    for f in features:
        if f.person_id is None or f.modality is None:
            raise ModelError("cluster_features needs person_id and modality on every feature")
        groups.setdefault((f.person_id, f.modality), []).append(f.vector)
    out = []
    for (pid, modality) in sorted(groups, key=lambda k: (k[0], k[1].value)):
        members = np.stack(groups[(pid, modality)])
        mean = members.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-8:
            raise ModelError(f"degenerate centroid for identity {pid} ({modality.value})")
        out.append(IdentityCentroid(person_id=pid, modality=modality,
                                    centroid=mean / norm, member_count=len(members)))
    return out


# -- objective ----------------------------------------------------------

def _pairwise_dist(a, b):
    """(P,D),(Q,D) tensors -> (P,Q) Euclidean distances."""
    p, d = a.shape
    q = b.shape[0]
    diff = T.sub(T.reshape(a, (p, 1, d)), T.reshape(b, (1, q, d)))
    return T.sqrt(T.add(T.sum_(T.mul(diff, diff), axis=-1), _LOSS_EPS))


def separation_loss_graph(vis, ir):
    """Tensor version of the training objective over per-identity
    centroid matrices (rows aligned by identity)."""
    p = vis.shape[0]
    if p < 2:
        raise ModelError("objective undefined for one identity")
    d = T.sub(vis, ir)
    cross = T.sqrt(T.add(T.sum_(T.mul(d, d), axis=-1), _LOSS_EPS))
    offdiag = T.Tensor(1.0 - np.eye(p))
    dvv = T.mul(_pairwise_dist(vis, vis), offdiag)
    dii = T.mul(_pairwise_dist(ir, ir), offdiag)
    total = T.sub(T.mul(T.sum_(cross), float(p - 1)),
                  T.add(T.sum_(dvv), T.sum_(dii)))
    return total


def extractor_loss(vis_centroids, ir_centroids, identities=None) -> float:
    """Sum over ordered identity pairs (p, q != p) of
    ||v_p - i_p|| - (||v_p - v_q|| + ||i_p - i_q||), computed on the
    given per-identity centroid vectors."""
    if identities is None:
        identities = sorted(vis_centroids)
    identities = list(identities)
    if len(identities) < 2:
        raise ModelError("objective undefined for one identity")
    missing = [p for p in identities if p not in vis_centroids or p not in ir_centroids]
    if missing:
        raise ModelError(f"identities missing a modality centroid: {missing}")
    vis = T.Tensor(np.stack([np.asarray(vis_centroids[p], dtype=np.float64) for p in identities]))
    ir = T.Tensor(np.stack([np.asarray(ir_centroids[p], dtype=np.float64) for p in identities]))
    return separation_loss_graph(vis, ir).item()


# -- training -----------------------------------------------------------

def _grouped_indices(images):
    groups = {}
    for idx, im in enumerate(images):
        groups.setdefault((im.person_id, im.modality), []).append(idx)
    return groups


def _centroid_rows(feats, slots, n_per_slot):
    """feats (B,D) laid out as consecutive per-slot blocks -> (len(slots), D)
    renormalized centroid matrix."""
    rows = []
    for s in range(len(slots)):
        block = feats[s * n_per_slot:(s + 1) * n_per_slot]
        rows.append(T.mean(block, axis=0, keepdims=True))
    m = T.concat(rows, axis=0)
    return T.l2_normalize(m, axis=-1)


def train_extractor(dataset, config: ExtractorTrainConfig = None, out_dir=None) -> ExtractorModel:
    """Train refine+encoder parameters with SGD(momentum) on the centroid
    separation objective. The edge backbone is parameter-free and fixed.
    Deterministic given config.seed."""
    config = config or ExtractorTrainConfig()
    model = ExtractorModel(config)
    groups = _grouped_indices(dataset.images)
    ids = sorted({pid for pid, _ in groups})
    both = [p for p in ids
            if (p, Modality.VISIBLE) in groups and (p, Modality.INFRARED) in groups]
    if len(both) < 2:
        raise ModelError("objective undefined for one identity")

    if config.epochs <= 0:
        _persist_extractor(model, config, out_dir, history=[])
        return model

    # edge stacks never change: compute them once
    stacks = [edges.detect_edges(im) for im in dataset.images]
    level_arrays = [
        np.stack([s.levels[k] for s in stacks])[:, None]  # (N,1,h,w)
        for k in range(edges.N_LEVELS)
    ]

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    opt = SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    n_batch_ids = min(config.batch_identities, len(both))
    per_mod = config.images_per_id
    total_imgs = len(dataset.images)
    steps_per_epoch = max(1, int(np.ceil(total_imgs / (n_batch_ids * per_mod * 2))))

    history = []
    last_good = model.state_dict()
    for epoch in range(1, config.epochs + 1):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            batch_ids = sorted(rng.choice(both, size=n_batch_ids, replace=False).tolist())
            picks = []
            slots = []
            for pid in batch_ids:
                for modality in (Modality.VISIBLE, Modality.INFRARED):
                    pool = groups[(pid, modality)]
                    take = rng.choice(len(pool), size=min(per_mod, len(pool)), replace=False)
                    while len(take) < per_mod:  # tiny groups: repeat deterministically
                        take = np.concatenate([take, take])[:per_mod]
                    picks.extend(pool[t] for t in take[:per_mod])
                    slots.append((pid, modality))
            levels = [T.Tensor(arr[picks]) for arr in level_arrays]
            u, _ = model.fuse_graph(levels)
            feats = model.encode_graph(u)
            cent = _centroid_rows(feats, slots, per_mod)
            vis_rows = cent[np.arange(0, len(slots), 2)]
            ir_rows = cent[np.arange(1, len(slots), 2)]
            loss = separation_loss_graph(vis_rows, ir_rows)
            value = loss.item()
            if not np.isfinite(value):
                _persist_extractor(model, config, out_dir, history, state=last_good)
                raise TrainingDiverged("training diverged: non-finite extractor loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(value)
        last_good = model.state_dict()
        history.append((epoch, float(np.mean(epoch_losses))))
    _persist_extractor(model, config, out_dir, history)
    return model


def _persist_extractor(model, config, out_dir, history, state=None):
    if out_dir is None:
        return
    if state is not None:
        model.load_state_dict(state)
    save_extractor(os.path.join(out_dir, "extractor.npz"), model)
    write_training_curve(os.path.join(out_dir, "extractor_curve.csv"), history)


def save_extractor(path, model, extra_meta=None):
    meta = {
        "feature_dim": model.feature_dim,
        "fuse_channels": model.fuse_channels,
        "removed_levels": sorted(model.removed_levels),
        "backbone": model.backbone,
        "train_config": vars(model.config).copy(),
    }
    meta["train_config"]["removed_levels"] = list(meta["train_config"]["removed_levels"])
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, "extractor", model.state_dict(), meta)


def load_extractor(path) -> ExtractorModel:
    meta, params = load_checkpoint(path, expected_kind="extractor")
    cfg_d = dict(meta["train_config"])
    cfg_d["removed_levels"] = tuple(cfg_d.get("removed_levels", ()))
    config = ExtractorTrainConfig(**cfg_d)
    model = ExtractorModel(config)
    model.load_state_dict(params)
    model.removed_levels = frozenset(int(k) for k in meta.get("removed_levels", []))
    return model


# -- feature cache --------------------------------------------------------

def write_feature_cache(path, images, model):
    """Per-image JSONL records: source_path, person_id, modality, vector."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    vectors = extract_batch(images, model)
    with open(path, "w") as f:
        for im, vec in zip(images, vectors):
            rec = {
                "source_path": im.source_path,
                "person_id": im.person_id,
                "modality": im.modality.value,
                "vector": [float(v) for v in vec],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_feature_cache(path):
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(EdgeFeature(vector=np.asarray(rec["vector"]),
                                   person_id=rec["person_id"],
                                   modality=Modality(rec["modality"])))
    return out
