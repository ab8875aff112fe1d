"""Deterministic procedural two-modality toy dataset.

Every identity gets a unique articulated silhouette (head, torso, arms,
legs, optional hat/bag) whose proportions and limb angles are drawn from
a per-identity seeded stream, so each identity has a distinct edge
signature. Visible renders add per-image clothing colors, background
clutter and brightness jitter; infrared renders are single-channel with
a gamma curve and Gaussian noise. The silhouette geometry is shared
across modalities, which makes shape the only reliable cross-modal cue.
"""

import json
import os

import numpy as np

from edgepatch.errors import DatasetError
from .types import Dataset, Layout, Modality, PersonImage

_GEOM_TAG = 101
_IMAGE_TAG = 202

# toy camera ids map onto SYSU-style directories on export:
# visible cam 1/2 -> cam1/cam2, infrared cam 1/2 -> cam3/cam6
_EXPORT_CAM = {
    (Modality.VISIBLE, 1): 1,
    (Modality.VISIBLE, 2): 2,
    (Modality.INFRARED, 1): 3,
    (Modality.INFRARED, 2): 6,
}


def _segment_mask(yy, xx, p0, p1, thickness):
    """Pixels within `thickness` of the segment p0-p1 (pixel coords)."""
    dy, dx = p1[0] - p0[0], p1[1] - p0[1]
    denom = max(dy * dy + dx * dx, 1e-9)
    t = ((yy - p0[0]) * dy + (xx - p0[1]) * dx) / denom
    t = np.clip(t, 0.0, 1.0)
    cy = p0[0] + t * dy
    cx = p0[1] + t * dx
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= thickness * thickness


def _ellipse_mask(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _draw_silhouette(rng, h, w):
    """Sample one identity's geometry and rasterize part masks.

    Returns (body_mask, part_masks) where part_masks maps part name to a
    boolean (h, w) array. Proportions, limb angles and accessories vary
    per identity so edge statistics differ between identities.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u0 = (0.5 + rng.uniform(-0.05, 0.05)) * w  # horizontal anchor

    # per-identity ranges wide enough that local edge statistics (ridge
    # widths, orientations, spacings, densities) separate identities under
    # global pooling, but narrow enough that retrieval margins stay
    # realistic rather than trivially saturated
    head_cy = rng.uniform(0.11, 0.15) * h
    head_ry = rng.uniform(0.050, 0.075) * h
    head_rx = rng.uniform(0.10, 0.16) * w
    head = _ellipse_mask(yy, xx, head_cy, u0, head_ry, head_rx)

    v_sh = rng.uniform(0.20, 0.27) * h
    v_hip = rng.uniform(0.44, 0.60) * h
    u_sh = rng.uniform(0.12, 0.30) * w
    u_hip = rng.uniform(0.08, 0.26) * w
    frac = np.clip((yy - v_sh) / max(v_hip - v_sh, 1.0), 0.0, 1.0)
    half = u_sh + (u_hip - u_sh) * frac
    torso = (yy >= v_sh) & (yy <= v_hip) & (np.abs(xx - u0) <= half)

    arm_angle = rng.uniform(np.deg2rad(15), np.deg2rad(70))
    arm_down = 1.0 if rng.random() < 0.7 else -0.4  # some identities raise arms
    arm_len = rng.uniform(0.20, 0.30) * h
    arm_t = rng.uniform(0.035, 0.075) * w
    arms = np.zeros((h, w), dtype=bool)
    for side in (-1.0, 1.0):
        p0 = (v_sh + 0.02 * h, u0 + side * u_sh)
        p1 = (p0[0] + arm_down * arm_len * np.cos(arm_angle),
              p0[1] + side * arm_len * np.sin(arm_angle))
        arms |= _segment_mask(yy, xx, p0, p1, arm_t)

    leg_spread = rng.uniform(0.02, 0.10) * w
    leg_t = rng.uniform(0.040, 0.075) * w
    v_feet = rng.uniform(0.90, 0.95) * h
    legs = np.zeros((h, w), dtype=bool)
    for side in (-1.0, 1.0):
        p0 = (v_hip, u0 + side * u_hip * 0.45)
        p1 = (v_feet, p0[1] + side * leg_spread)
        legs |= _segment_mask(yy, xx, p0, p1, leg_t)

    parts = {"head": head, "torso": torso, "arms": arms, "legs": legs}

    if rng.random() < 0.5:  # hat: triangle above the head
        hat_h = rng.uniform(0.04, 0.10) * h
        top = head_cy - head_ry - hat_h
        base = head_cy - head_ry * 0.6
        tfrac = np.clip((yy - top) / max(base - top, 1.0), 0.0, 1.0)
        parts["hat"] = (yy >= top) & (yy <= base) & (np.abs(xx - u0) <= tfrac * head_rx * 1.1)
    if rng.random() < 0.4:  # bag: ellipse at one hip
        side = -1.0 if rng.random() < 0.5 else 1.0
        parts["bag"] = _ellipse_mask(
            yy, xx, v_hip * 0.98, u0 + side * (u_hip + 0.07 * w),
            rng.uniform(0.04, 0.10) * h, rng.uniform(0.05, 0.12) * w)
    n_marks = int(rng.integers(1, 5))  # per-identity torso cutouts
    if n_marks:
        marks = np.zeros((h, w), dtype=bool)
        for _ in range(n_marks):
            my = rng.uniform(v_sh + 0.03 * h, v_hip - 0.03 * h)
            mx = u0 + rng.uniform(-0.6, 0.6) * u_hip
            marks |= _ellipse_mask(yy, xx, my, mx,
                                   rng.uniform(0.012, 0.035) * h,
                                   rng.uniform(0.03, 0.09) * w)
        parts["marks"] = marks & torso

    body = np.zeros((h, w), dtype=bool)
    for name, m in parts.items():
        if name != "marks":
            body |= m
    if "marks" in parts:
        body &= ~parts["marks"]
    return body, parts


def _shift_masks(parts, dy, dx):
    """Integer-shift all masks with zero fill (per-image pose jitter)."""
    out = {}
    for name, m in parts.items():
        s = np.zeros_like(m)
        h, w = m.shape
        ys = slice(max(dy, 0), h + min(dy, 0))
        xs = slice(max(dx, 0), w + min(dx, 0))
        yd = slice(max(-dy, 0), h + min(-dy, 0))
        xd = slice(max(-dx, 0), w + min(-dx, 0))
        s[ys, xs] = m[yd, xd]
        out[name] = s
    return out


def _camera_background(cam, h, w, rng, infrared):
    """Smooth low-contrast texture; the two cameras differ in pattern."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if infrared:
        base = 0.15 if cam == 1 else 0.19
        ramp = 0.02 * (yy / h) if cam == 1 else 0.02 * (xx / w)
        waves = 0.008 * np.sin(2 * np.pi * (xx if cam == 1 else yy) / (w * 0.7 if cam == 1 else h * 0.7))
    else:
        base = 0.62 if cam == 1 else 0.57
        ramp = 0.04 * (xx / w) if cam == 1 else 0.04 * (yy / h)
        waves = 0.012 * np.sin(2 * np.pi * (yy if cam == 1 else xx) / (h * 0.5 if cam == 1 else w * 0.5))
    bg = base + ramp + waves
    # a couple of faint fixed-per-image blobs
    amp = 0.02 if infrared else 0.02
    for _ in range(2):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(h * 0.1, h * 0.3), rng.uniform(w * 0.1, w * 0.3)
        blob = np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))
        bg = bg + rng.uniform(-amp, amp) * blob
    return bg


def _render_visible(parts, cam, rng, h, w):
    bg = _camera_background(cam, h, w, rng, infrared=False)
    img = np.repeat(bg[:, :, None], 3, axis=2)
    img += rng.uniform(-0.02, 0.02, size=(1, 1, 3))  # mild color cast
    # low-contrast clutter rectangles behind the person
    for _ in range(3):
        y0 = rng.integers(0, h - 4)
        x0 = rng.integers(0, w - 4)
        hh = int(rng.integers(4, max(5, h // 4)))
        ww = int(rng.integers(4, max(5, w // 4)))
        tint = rng.uniform(-0.04, 0.04, size=3)
        img[y0:y0 + hh, x0:x0 + ww, :] += tint

    background = img.copy()
    h_, w_ = img.shape[:2]
    skin = np.array([0.45, 0.33, 0.26]) * rng.uniform(0.85, 1.1)
    shirt = rng.uniform(0.04, 0.32, size=3)
    pants = rng.uniform(0.04, 0.32, size=3)
    coloring = {
        "head": skin, "torso": shirt, "arms": shirt,
        "legs": pants, "hat": rng.uniform(0.04, 0.35, size=3),
        "bag": rng.uniform(0.04, 0.35, size=3),
    }
    for name, mask in parts.items():
        if name == "marks":
            continue
        img[mask] = coloring[name]
    # printed clothing pattern: a visible-only nuisance (thermal renders
    # never see it), so torso texture carries no identity information
    if rng.random() < 0.6:
        shirt2 = rng.uniform(0.0, 0.6, size=3)
        period = int(rng.integers(2, 7))
        kind = rng.integers(4)
        yy2, xx2 = np.indices((h_, w_))
        if kind == 0:
            phase = (yy2 // period) % 2
        elif kind == 1:
            phase = (xx2 // period) % 2
        elif kind == 2:
            phase = ((yy2 // period) + (xx2 // period)) % 2
        else:
            phase = ((yy2 % (2 * period) < period) & (xx2 % (2 * period) < period))
        pattern = parts["torso"] | parts["arms"]
        paint = pattern & (phase > 0)
        img[paint] = shirt2
    if "marks" in parts:  # cutouts show the background through the torso
        img[parts["marks"]] = background[parts["marks"]]
    img *= rng.uniform(0.90, 1.05)  # brightness jitter
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_infrared(parts, cam, rng, h, w):
    bg = _camera_background(cam, h, w, rng, infrared=True)
    img = bg.copy()
    # warm body: bright, parts offset slightly
    base = rng.uniform(0.60, 0.80)
    offsets = {"head": 0.06, "torso": 0.0, "arms": -0.03, "legs": -0.05,
               "hat": -0.10, "bag": -0.15}
    for name, mask in parts.items():
        if name == "marks":
            continue
        img[mask] = np.clip(base + offsets[name], 0.05, 0.98)
    if "marks" in parts:
        img[parts["marks"]] = bg[parts["marks"]]
    img = np.clip(img, 0.0, 1.0) ** 0.7          # sensor response curve
    img = img + rng.normal(0.0, 0.05, size=(h, w))  # thermal noise
    return np.clip(img, 0.0, 1.0)[:, :, None].astype(np.float32)


def _mask_iou(a, b):
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / max(union, 1)


def generate_toy_dataset(n_ids, per_id_per_modality, image_size=(128, 64), seed=0,
                         max_iou=0.95):
    """Build the deterministic toy dataset.

    Identity geometries are resampled (deterministically) until every
    pair of silhouette masks has IoU below max_iou, so edge signatures
    are guaranteed distinct.
    """
    if n_ids < 2:
        raise DatasetError("need at least two identities")
    if per_id_per_modality < 2:
        raise DatasetError("need at least two images per identity per modality")
    h, w = image_size
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise DatasetError(f"image size must be multiples of 16 and >=16, got {h}x{w}")

    geometries = []
    masks = []
    for pid in range(1, n_ids + 1):
        for attempt in range(64):
            rng = np.random.default_rng(np.random.SeedSequence([seed, _GEOM_TAG, pid, attempt]))
            body, parts = _draw_silhouette(rng, h, w)
            if all(_mask_iou(body, m) < max_iou for m in masks):
                break
        else:
            raise DatasetError(f"could not draw a distinct silhouette for identity {pid}")
        masks.append(body)
        geometries.append(parts)

    images = []
    for pid in range(1, n_ids + 1):
        parts = geometries[pid - 1]
        for modality, mod_code in ((Modality.VISIBLE, 0), (Modality.INFRARED, 1)):
            for n in range(1, per_id_per_modality + 1):
                cam = 1 if n % 2 == 1 else 2
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, _IMAGE_TAG, pid, mod_code, n]))
                dy = int(rng.integers(-2, 3))
                dx = int(rng.integers(-1, 2))
                shifted = _shift_masks(parts, dy, dx)
                if modality is Modality.VISIBLE:
                    pixels = _render_visible(shifted, cam, rng, h, w)
                else:
                    pixels = _render_infrared(shifted, cam, rng, h, w)
                rel = f"cam{_EXPORT_CAM[(modality, cam)]}/{pid:04d}/{n:04d}.png"
                images.append(PersonImage(
                    person_id=pid, modality=modality, camera_id=cam,
                    pixels=pixels, source_path=rel))
    return Dataset(images=images, layout=Layout.TOY)


def identity_masks(n_ids, image_size=(128, 64), seed=0, max_iou=0.95):
    """Recompute the accepted silhouette masks (for distinctness checks)."""
    h, w = image_size
    masks = []
    for pid in range(1, n_ids + 1):
        for attempt in range(64):
            rng = np.random.default_rng(np.random.SeedSequence([seed, _GEOM_TAG, pid, attempt]))
            body, _ = _draw_silhouette(rng, h, w)
            if all(_mask_iou(body, m) < max_iou for m in masks):
                break
        masks.append(body)
    return masks


def holdout_split(dataset, holdout_per_id=1):
    """Split into train/test by holding out the last images of every
    (identity, modality) group. Both halves stay valid datasets."""
    groups = {}
    for im in dataset.images:
        groups.setdefault((im.person_id, im.modality), []).append(im)
    train, test = [], []
    for key in sorted(groups, key=lambda k: (k[0], k[1].value)):
        members = sorted(groups[key], key=lambda im: im.source_path)
        if len(members) <= holdout_per_id:
            raise DatasetError(
                f"group {key} has only {len(members)} images; cannot hold out {holdout_per_id}")
        train.extend(members[:-holdout_per_id])
        test.extend(members[-holdout_per_id:])
    return dataset.subset(train), dataset.subset(test)


def export_toy_dataset(dataset, out_dir, seed=None, params=None, force=False):
    """Write the dataset as a SYSU-style tree plus manifest.json."""
    from PIL import Image

    if os.path.exists(out_dir) and os.listdir(out_dir) and not force:
        raise DatasetError(f"output exists: {out_dir}")
    os.makedirs(out_dir, exist_ok=True)
    for im in dataset.images:
        path = os.path.join(out_dir, im.source_path)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        arr = np.clip(np.round(im.pixels * 255.0), 0, 255).astype(np.uint8)
        if arr.shape[2] == 1:
            Image.fromarray(arr[:, :, 0], mode="L").save(path)
        else:
            Image.fromarray(arr, mode="RGB").save(path)
    manifest = {
        "layout": "SYSU",
        "source": "toy-generator",
        "seed": seed,
        "params": params or {},
        "n_images": len(dataset.images),
        "n_identities": len(dataset.identities),
        "image_size": list(dataset.image_size),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return os.path.join(out_dir, "manifest.json")
