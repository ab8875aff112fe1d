"""Edge-feature-conditioned adversarial patch generator.

A latent draw and the target's edge feature are concatenated, embedded by
two MLP stages, added to a learned positional table, and decoded by a
small transformer into a square patch. Training composites the patches
onto visible images and pushes the (frozen) extractor's features for the
patched images away from the matching infrared centroids; the extractor
acts as the fixed discriminator and no victim model is ever consulted.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from edgepatch import _kernels
from edgepatch.checkpoint import load_checkpoint, save_checkpoint, write_training_curve
from edgepatch.config import GeneratorTrainConfig
from edgepatch.data.types import Modality, PersonImage
from edgepatch.errors import ModelError, TrainingDiverged
from edgepatch.extractor import EdgeFeature, extract_batch
from edgepatch.nn import Adam, LayerNorm, Linear, Module, TransformerBlock
from edgepatch.nn import tensor as T

_LOSS_EPS = 1e-24


@dataclass
class PatchPlacement:
    """Patch rectangle in image-fraction coordinates."""

    center: tuple = (0.5, 0.45)   # (x fraction of width, y fraction of height)
    size: tuple = (0.40, 0.30)    # (width fraction, height fraction)

    def __post_init__(self):
        cx, cy = self.center
        fw, fh = self.size
        for v in (cx, cy, fw, fh):
            if not 0.0 < v < 1.0:
                raise ModelError(f"placement fractions must lie in (0,1), got {self}")
        if cx - fw / 2 < 0 or cx + fw / 2 > 1 or cy - fh / 2 < 0 or cy + fh / 2 > 1:
            raise ModelError(f"placement rectangle exceeds image bounds: {self}")

    def resolve(self, height, width):
        """Pixel rectangle (y0, x0, ph, pw) for an image of the given size."""
        pw = int(self.size[0] * width)
        ph = int(self.size[1] * height)
        if pw < 1 or ph < 1:
            raise ModelError(f"placement resolves to an empty rectangle on {height}x{width}")
        x0 = int(round(self.center[0] * width - pw / 2))
        y0 = int(round(self.center[1] * height - ph / 2))
        x0 = min(max(x0, 0), width - pw)
        y0 = min(max(y0, 0), height - ph)
        return y0, x0, ph, pw


@dataclass
class AdversarialPatch:
    """Generated patch pixels plus the geometry needed to composite it."""

    pixels: np.ndarray            # (hp, wp, 3) in [0,1]
    placement: PatchPlacement
    condition_id: int = None
    z_seed: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ModelError(f"patch pixels must be (h,w,3), got {self.pixels.shape}")
        if self.pixels.min() < -1e-9 or self.pixels.max() > 1 + 1e-9:
            raise ModelError("patch pixels outside [0,1]")


class PositionalEncoding(Module):
    """Learned per-token table added to the conditioned token embeddings."""

    def __init__(self, n_tokens, dim, rng):
        self.table = T.Tensor(rng.normal(0.0, 0.02, size=(n_tokens, dim)),
                              requires_grad=True)

    def __call__(self, h):
        # shaped by the conditioning batch, content from the learned table
        return T.reshape(self.table, (1,) + self.table.shape)


class GeneratorModel(Module):
    """Conditional transformer decoder emitting (token_grid*token_pixels)^2
    RGB patches squashed into [0,1]."""

    def __init__(self, config: GeneratorTrainConfig = None, y_dim=128, rng=None):
        config = config or GeneratorTrainConfig()
        rng = rng or np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        self.z_dim = config.z_dim
        self.y_dim = y_dim
        self.embed_dim = config.embed_dim
        self.token_grid = config.token_grid
        self.token_pixels = config.token_pixels
        self.n_tokens = config.token_grid ** 2
        # unit-norm conditioning entries are ~1/sqrt(D); rescale so the
        # feature carries the same per-coordinate weight as the latent
        self.cond_scale = float(np.sqrt(y_dim))
        self.mlp1 = Linear(config.z_dim + y_dim, config.embed_dim, rng)
        self.mlp2 = Linear(config.embed_dim, self.n_tokens * config.embed_dim, rng)
        self.positional = PositionalEncoding(self.n_tokens, config.embed_dim, rng)
        self.blocks = [TransformerBlock(config.embed_dim, config.heads, rng)
                       for _ in range(config.depth)]
        self.final_ln = LayerNorm(config.embed_dim)
        self.to_pixels = Linear(config.embed_dim, config.token_pixels ** 2 * 3, rng)
        self.placement = PatchPlacement(center=tuple(config.placement[:2]),
                                        size=tuple(config.placement[2:]))
        self.output_gain = config.output_gain
        self.config = config

    @property
    def patch_size(self):
        side = self.token_grid * self.token_pixels
        return side, side

    def forward_graph(self, z, y):
        """(B,z_dim) latents + (B,y_dim) conditioning -> (B,3,hp,wp)."""
        b = z.shape[0]
        if y.shape[1] != self.y_dim:
            raise ModelError(
                f"conditioning dimension mismatch: model expects {self.y_dim}, got {y.shape[1]}")
        h = T.gelu(self.mlp1(T.concat([z, T.mul(y, self.cond_scale)], axis=1)))
        tok = T.reshape(self.mlp2(h), (b, self.n_tokens, self.embed_dim))
        tok = T.add(tok, self.positional(h))
        for blk in self.blocks:
            tok = blk(tok)
        tok = self.final_ln(tok)
        pix = self.to_pixels(tok)                      # (B, T, tp*tp*3)
        g, tp = self.token_grid, self.token_pixels
        pix = T.reshape(pix, (b, g, g, tp, tp, 3))
        pix = T.transpose(pix, (0, 5, 1, 3, 2, 4))     # (B,3,g,tp,g,tp)
        pix = T.reshape(pix, (b, 3, g * tp, g * tp))
        return T.sigmoid(T.mul(pix, self.output_gain))

    def clone(self):
        other = GeneratorModel(self.config, y_dim=self.y_dim)
        other.load_state_dict(self.state_dict())
        return other


def latent_from_seed(z_seed, z_dim):
    rng = np.random.default_rng(np.random.SeedSequence([int(z_seed), 909]))
    return rng.standard_normal(z_dim)


def stable_z_seed(base_seed, image_id):
    """Derive a per-image latent seed that is stable across runs."""
    digest = hashlib.sha256(f"{base_seed}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 63)


def generate_patch(feature, model, z_seed=0) -> AdversarialPatch:
    """Decode one patch from an edge feature, deterministic in z_seed."""
    vec = feature.vector if isinstance(feature, EdgeFeature) else np.asarray(feature)
    if vec.shape != (model.y_dim,):
        raise ModelError(
            f"conditioning dimension mismatch: model expects ({model.y_dim},), got {vec.shape}")
    z = T.Tensor(latent_from_seed(z_seed, model.z_dim)[None])
    y = T.Tensor(vec[None].astype(np.float64))
    out = model.forward_graph(z, y)
    pixels = out.data[0].transpose(1, 2, 0).copy()
    return AdversarialPatch(
        pixels=pixels, placement=model.placement,
        condition_id=getattr(feature, "person_id", None), z_seed=int(z_seed))


def apply_patch(image: PersonImage, patch: AdversarialPatch) -> PersonImage:
    """Composite by region replacement; pixels outside the rectangle are
    untouched and reapplication is idempotent."""
    if image.modality is not Modality.VISIBLE:
        raise ModelError("patch applies to visible images only")
    y0, x0, ph, pw = patch.placement.resolve(image.height, image.width)
    chw = patch.pixels.transpose(2, 0, 1)[None]
    resized = _kernels.resize_bilinear(chw, ph, pw)[0]
    out = image.pixels.astype(np.float64).copy()
    out[y0:y0 + ph, x0:x0 + pw, :] = resized.transpose(1, 2, 0)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return PersonImage(person_id=image.person_id, modality=image.modality,
                       camera_id=image.camera_id, pixels=out,
                       source_path=image.source_path)


def composite_graph(images, patches, placement):
    """(B,3,H,W) constant images + (B,3,hp,wp) patch tensors -> patched batch."""
    h, w = images.shape[2], images.shape[3]
    y0, x0, ph, pw = placement.resolve(h, w)
    resized = T.resize_bilinear(patches, ph, pw)
    return T.region_replace(images, resized, y0, x0)


# -- objective ----------------------------------------------------------

def alignment_distance_graph(patched, infrared):
    """Mean Euclidean distance between aligned centroid rows (P,D)."""
    d = T.sub(patched, infrared)
    dist = T.sqrt(T.add(T.sum_(T.mul(d, d), axis=-1), _LOSS_EPS))
    return T.mean(dist)


def generator_loss(patched_centroids, infrared_centroids) -> float:
    """Mean over identities of ||f(V'_p) - f(I_p)||_2. The training loop
    maximizes this quantity (descends on its negation)."""
    pk = set(patched_centroids)
    ik = set(infrared_centroids)
    if pk != ik:
        raise ModelError(f"centroid sets differ: {sorted(pk ^ ik)}")
    if not pk:
        raise ModelError("centroid sets are empty")
    ids = sorted(pk)
    vp = T.Tensor(np.stack([np.asarray(patched_centroids[p], dtype=np.float64) for p in ids]))
    ip = T.Tensor(np.stack([np.asarray(infrared_centroids[p], dtype=np.float64) for p in ids]))
    return alignment_distance_graph(vp, ip).item()


def _smooth_tv(patches):
    dx = T.sub(patches[:, :, :, 1:], patches[:, :, :, :-1])
    dy = T.sub(patches[:, :, 1:, :], patches[:, :, :-1, :])
    return T.add(T.mean(T.sqrt(T.add(T.mul(dx, dx), 1e-12))),
                 T.mean(T.sqrt(T.add(T.mul(dy, dy), 1e-12))))


# -- training -----------------------------------------------------------

def _centroid_rows(feats, n_groups, per_group):
    rows = []
    for s in range(n_groups):
        rows.append(T.mean(feats[s * per_group:(s + 1) * per_group], axis=0, keepdims=True))
    return T.l2_normalize(T.concat(rows, axis=0), axis=-1)


def train_generator(dataset, extractor_model, config: GeneratorTrainConfig = None,
                    out_dir=None) -> GeneratorModel:
    """Adversarially train the generator against the frozen extractor.

    Per step: decode patches for sampled visible images, composite, run
    the extractor on the patched images, group per identity, and ascend
    the mean distance to the matching infrared centroids.
    """
    config = config or GeneratorTrainConfig()
    was_trainable = [p.requires_grad for p in extractor_model.parameters()]
    extractor_model.set_trainable(False)
    frozen_before = extractor_model.param_fingerprint()

    model = GeneratorModel(config, y_dim=extractor_model.feature_dim)
    try:
        if config.epochs <= 0:
            _persist_generator(model, out_dir, history=[])
            return model

        vis = sorted(dataset.by_modality(Modality.VISIBLE), key=lambda im: im.image_id)
        ir = sorted(dataset.by_modality(Modality.INFRARED), key=lambda im: im.image_id)
        vis_ids = sorted({im.person_id for im in vis})
        ir_by_id = {}
        for im in ir:
            ir_by_id.setdefault(im.person_id, []).append(im)
        both = [p for p in vis_ids if p in ir_by_id]
        if not both:
            raise ModelError("centroid sets are empty: no paired identities")

        # frozen quantities: conditioning features and infrared centroids
        vis_feats = extract_batch(vis, extractor_model)
        ir_feats = extract_batch(ir, extractor_model)
        ir_centroid = {}
        for pid in both:
            rows = np.stack([ir_feats[i] for i, im in enumerate(ir) if im.person_id == pid])
            mean = rows.mean(axis=0)
            ir_centroid[pid] = mean / max(np.linalg.norm(mean), 1e-12)
        vis_by_id = {}
        for i, im in enumerate(vis):
            vis_by_id.setdefault(im.person_id, []).append(i)
        vis_arrays = np.stack([im.as_rgb().astype(np.float64).transpose(2, 0, 1) for im in vis])

        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        opt = Adam(model.parameters(), lr=config.lr)
        n_batch_ids = min(config.batch_identities, len(both))
        per_id = config.images_per_id
        steps_per_epoch = max(1, int(np.ceil(len(vis) / (n_batch_ids * per_id))))

        # fixed validation batch: first image of every identity, fixed z
        val_idx = [vis_by_id[p][0] for p in both]
        val_y = vis_feats[val_idx]
        val_z = np.stack([latent_from_seed(stable_z_seed(config.seed, vis[i].image_id),
                                           config.z_dim) for i in val_idx])
        val_images = vis_arrays[val_idx]
        val_ir = np.stack([ir_centroid[p] for p in both])

        def val_distance():
            patches = model.forward_graph(T.Tensor(val_z), T.Tensor(val_y))
            comp = composite_graph(T.Tensor(val_images), patches, model.placement)
            feats = extractor_model.extract_graph(comp)
            cent = T.l2_normalize(feats, axis=-1)
            return alignment_distance_graph(cent, T.Tensor(val_ir)).item()

        history = []
        last_good = model.state_dict()
        for epoch in range(1, config.epochs + 1):
            epoch_losses = []
            for _ in range(steps_per_epoch):
                ids = sorted(rng.choice(both, size=n_batch_ids, replace=False).tolist())
                picks = []
                for pid in ids:
                    pool = vis_by_id[pid]
                    take = rng.choice(len(pool), size=min(per_id, len(pool)), replace=False)
                    while len(take) < per_id:
                        take = np.concatenate([take, take])[:per_id]
                    picks.extend(pool[t] for t in take[:per_id])
                z = T.Tensor(rng.standard_normal((len(picks), config.z_dim)))
                y = T.Tensor(vis_feats[picks])
                patches = model.forward_graph(z, y)
                comp = composite_graph(T.Tensor(vis_arrays[picks]), patches, model.placement)
                feats = extractor_model.extract_graph(comp)
                cent = _centroid_rows(feats, len(ids), per_id)
                ir_rows = T.Tensor(np.stack([ir_centroid[p] for p in ids]))
                dist = alignment_distance_graph(cent, ir_rows)
                loss = T.mul(dist, -1.0)
                if config.tv_weight:
                    loss = T.add(loss, T.mul(_smooth_tv(patches), config.tv_weight))
                value = loss.item()
                if not np.isfinite(value):
                    _persist_generator(model, out_dir, history, state=last_good)
                    raise TrainingDiverged("training diverged: non-finite generator loss")
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_losses.append(-value)
            last_good = model.state_dict()
            history.append((epoch, float(np.mean(epoch_losses)), val_distance()))
        _persist_generator(model, out_dir, history)
        return model
    finally:
        for p, flag in zip(extractor_model.parameters(), was_trainable):
            p.requires_grad = flag
        frozen_after = extractor_model.param_fingerprint()
        assert frozen_before == frozen_after, "extractor changed during generator training"


def _persist_generator(model, out_dir, history, state=None):
    if out_dir is None:
        return
    if state is not None:
        model.load_state_dict(state)
    save_generator(os.path.join(out_dir, "generator.npz"), model)
    write_training_curve(os.path.join(out_dir, "generator_curve.csv"), history,
                         header=("epoch", "objective", "val_distance"))


def save_generator(path, model, extra_meta=None):
    meta = {
        "y_dim": model.y_dim,
        "train_config": vars(model.config).copy(),
    }
    meta["train_config"]["placement"] = list(meta["train_config"]["placement"])
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, "generator", model.state_dict(), meta)


def load_generator(path) -> GeneratorModel:
    meta, params = load_checkpoint(path, expected_kind="generator")
    cfg_d = dict(meta["train_config"])
    cfg_d["placement"] = tuple(cfg_d.get("placement", (0.5, 0.45, 0.40, 0.30)))
    config = GeneratorTrainConfig(**cfg_d)
    model = GeneratorModel(config, y_dim=meta["y_dim"])
    model.load_state_dict(params)
    return model


# -- patch export ---------------------------------------------------------

def save_patch(patch: AdversarialPatch, png_path):
    """Lossless PNG plus a JSON sidecar with geometry and provenance."""
    from PIL import Image

    os.makedirs(os.path.dirname(os.path.abspath(png_path)), exist_ok=True)
    arr = np.clip(np.round(patch.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(png_path)
    sidecar = {
        "placement": {"center": list(patch.placement.center),
                      "size": list(patch.placement.size)},
        "condition_id": patch.condition_id,
        "z_seed": patch.z_seed,
    }
    with open(os.path.splitext(png_path)[0] + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def load_patch(png_path) -> AdversarialPatch:
    from PIL import Image

    with open(os.path.splitext(png_path)[0] + ".json") as f:
        sidecar = json.load(f)
    arr = np.asarray(Image.open(png_path).convert("RGB"), dtype=np.float64) / 255.0
    return AdversarialPatch(
        pixels=arr,
        placement=PatchPlacement(center=tuple(sidecar["placement"]["center"]),
                                 size=tuple(sidecar["placement"]["size"])),
        condition_id=sidecar.get("condition_id"),
        z_seed=sidecar.get("z_seed", 0))
