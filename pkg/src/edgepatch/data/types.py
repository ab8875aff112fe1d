"""Core data records shared across the pipeline."""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from edgepatch.errors import DatasetError


class Modality(str, Enum):
    VISIBLE = "VISIBLE"
    INFRARED = "INFRARED"


class Layout(str, Enum):
    SYSU = "SYSU"
    REGDB = "REGDB"
    TOY = "TOY"


class Direction(str, Enum):
    VIS_TO_IR = "VIS_TO_IR"
    IR_TO_VIS = "IR_TO_VIS"

    @property
    def query_modality(self):
        return Modality.VISIBLE if self is Direction.VIS_TO_IR else Modality.INFRARED

    @property
    def gallery_modality(self):
        return Modality.INFRARED if self is Direction.VIS_TO_IR else Modality.VISIBLE


class Protocol(str, Enum):
    SINGLE_SHOT = "SINGLE_SHOT"
    ALL = "ALL"


@dataclass
class PersonImage:
    """One pedestrian image: identity, modality, camera, pixels in [0,1].

    pixels is H x W x C float32 with C=3 for VISIBLE and C=1 (or a 3-channel
    replication) for INFRARED. source_path doubles as the stable image id
    used by rankings and the embedding exchange.
    """

    person_id: int
    modality: Modality
    camera_id: int
    pixels: np.ndarray
    source_path: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise DatasetError(f"pixels must be HxWxC, got shape {self.pixels.shape}")
        lo, hi = float(self.pixels.min(initial=0.0)), float(self.pixels.max(initial=0.0))
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise DatasetError(f"pixel values outside [0,1]: min={lo}, max={hi}")

    @property
    def image_id(self) -> str:
        return self.source_path

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def grayscale(self) -> np.ndarray:
        """H x W float64 luminance (same weights as the model graphs)."""
        p = self.pixels.astype(np.float64)
        if p.shape[2] == 1:
            return p[:, :, 0]
        return 0.299 * p[:, :, 0] + 0.587 * p[:, :, 1] + 0.114 * p[:, :, 2]

    def as_rgb(self) -> np.ndarray:
        """H x W x 3 view; single-channel inputs are replicated."""
        if self.pixels.shape[2] == 3:
            return self.pixels
        return np.repeat(self.pixels, 3, axis=2)


@dataclass
class Dataset:
    """An in-memory two-modality ReID dataset."""

    images: list
    layout: Layout
    identities: set = field(default_factory=set)

    def __post_init__(self):
        if not self.identities:
            self.identities = {im.person_id for im in self.images}
        self.validate()

    def validate(self):
        if self.identities != {im.person_id for im in self.images}:
            raise DatasetError("identities set does not match image labels")
        if self.images:
            h, w = self.images[0].height, self.images[0].width
            for im in self.images:
                if (im.height, im.width) != (h, w):
                    raise DatasetError(
                        f"inconsistent image size: {(im.height, im.width)} vs {(h, w)}")
        by_mod = {Modality.VISIBLE: set(), Modality.INFRARED: set()}
        for im in self.images:
            by_mod[im.modality].add(im.person_id)
        for pid in self.identities:
            if pid not in by_mod[Modality.VISIBLE] or pid not in by_mod[Modality.INFRARED]:
                raise DatasetError(f"identity {pid} missing from one modality")

    @property
    def image_size(self):
        if not self.images:
            raise DatasetError("empty dataset has no image size")
        return self.images[0].height, self.images[0].width

    def by_modality(self, modality: Modality) -> list:
        return [im for im in self.images if im.modality is modality]

    def subset(self, images) -> "Dataset":
        return Dataset(images=list(images), layout=self.layout)

    def __len__(self):
        return len(self.images)


@dataclass
class QueryGallerySplit:
    queries: list
    gallery: list
    direction: Direction
    run_seed: int

    def __post_init__(self):
        qmods = {im.modality for im in self.queries}
        gmods = {im.modality for im in self.gallery}
        if qmods & gmods:
            raise DatasetError("query and gallery modalities overlap")
        gallery_ids = {im.person_id for im in self.gallery}
        for q in self.queries:
            if q.person_id not in gallery_ids:
                raise DatasetError(f"query identity {q.person_id} absent from gallery")
