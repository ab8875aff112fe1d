"""Directory-layout loaders for SYSU-MM01- and RegDB-style trees.

SYSU:  <root>/cam{1..6}/<person_id>/<nnnn>.<ext>, cams 3 and 6 infrared.
RegDB: either <root>/idx/{train,test}_{visible,thermal}_<trial>.txt index
       files of "relative_path label" lines, or the simplified
       <root>/{visible,thermal}/<person_id>/<n>.<ext> tree.
"""

import os
import warnings

import numpy as np
from PIL import Image

from edgepatch.errors import DatasetError
from .types import Dataset, Layout, Modality, PersonImage

_IMG_EXTS = (".jpg", ".jpeg", ".png", ".bmp")
_SYSU_IR_CAMS = {3, 6}


def _load_pixels(path, image_size, infrared):
    img = Image.open(path)
    img = img.convert("L" if infrared else "RGB")
    h, w = image_size
    img = img.resize((w, h), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if infrared:
        arr = arr[:, :, None]
    return arr


def _drop_unpaired(records):
    """records: list of (pid, modality, cam, path). Warn and drop ids that
    appear in only one modality."""
    seen = {}
    for pid, modality, _, _ in records:
        seen.setdefault(pid, set()).add(modality)
    unpaired = {pid for pid, mods in seen.items() if len(mods) < 2}
    for pid in sorted(unpaired):
        warnings.warn(f"unpaired identity {pid} excluded (present in one modality only)")
    return [r for r in records if r[0] not in unpaired]


def _scan_sysu(root):
    records = []
    for cam in range(1, 7):
        cam_dir = os.path.join(root, f"cam{cam}")
        if not os.path.isdir(cam_dir):
            continue
        modality = Modality.INFRARED if cam in _SYSU_IR_CAMS else Modality.VISIBLE
        for pid_name in sorted(os.listdir(cam_dir)):
            pid_dir = os.path.join(cam_dir, pid_name)
            if not os.path.isdir(pid_dir) or not pid_name.isdigit():
                continue
            pid = int(pid_name)
            for fname in sorted(os.listdir(pid_dir)):
                if fname.lower().endswith(_IMG_EXTS):
                    records.append((pid, modality, cam, os.path.join(pid_dir, fname)))
    return records

def _scan_regdb(root):
    idx_dir = os.path.join(root, "idx")
    records = []
    if os.path.isdir(idx_dir):
        # index-file form; visible camera id 1, thermal camera id 2
        seen_paths = set()
        for fname in sorted(os.listdir(idx_dir)):
            low = fname.lower()
            if not low.endswith(".txt") or ("visible" not in low and "thermal" not in low):
                continue
            modality = Modality.VISIBLE if "visible" in low else Modality.INFRARED
            cam = 1 if modality is Modality.VISIBLE else 2
            with open(os.path.join(idx_dir, fname)) as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        rel, label = line.rsplit(" ", 1)
                        pid = int(label)
                    except ValueError as exc:
                        raise DatasetError(f"malformed index line in {fname}: {line!r}") from exc
                    if rel in seen_paths:
                        continue
                    seen_paths.add(rel)
                    records.append((pid, modality, cam, os.path.join(root, rel)))
        return records
    # simplified tree form
    for sub, modality, cam in (("visible", Modality.VISIBLE, 1),
                               ("thermal", Modality.INFRARED, 2)):
        sub_dir = os.path.join(root, sub)
        if not os.path.isdir(sub_dir):
            continue
        for pid_name in sorted(os.listdir(sub_dir)):
            pid_dir = os.path.join(sub_dir, pid_name)
            if not os.path.isdir(pid_dir) or not pid_name.isdigit():
                continue
            for fname in sorted(os.listdir(pid_dir)):
                if fname.lower().endswith(_IMG_EXTS):
                    records.append((int(pid_name), modality, cam, os.path.join(pid_dir, fname)))
    return records


def load_dataset(root, layout, image_size=(256, 128)):
    """Ingest a dataset tree, resize to image_size, normalize to [0,1].

    Identities present in only one modality are excluded with a warning.
    """
    if isinstance(layout, str):
        layout = Layout(layout.upper())
    if layout not in (Layout.SYSU, Layout.REGDB):
        raise DatasetError(f"load_dataset handles SYSU/REGDB layouts, not {layout}")
    if not os.path.isdir(root):
        raise DatasetError(f"dataset not found: {root}")

    records = _scan_sysu(root) if layout is Layout.SYSU else _scan_regdb(root)
    if not records:
        raise DatasetError(f"dataset not found: no images under {root}")
    records = _drop_unpaired(records)
    if not records:
        raise DatasetError(f"dataset not found: no paired identities under {root}")

    images = []
    for pid, modality, cam, path in records:
        pixels = _load_pixels(path, image_size, modality is Modality.INFRARED)
        images.append(PersonImage(
            person_id=pid, modality=modality, camera_id=cam, pixels=pixels,
            source_path=os.path.relpath(path, root)))
    return Dataset(images=images, layout=layout)
