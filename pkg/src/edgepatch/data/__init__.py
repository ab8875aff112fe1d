from .loaders import load_dataset
from .splits import split_query_gallery
from .toy import (
    export_toy_dataset,
    generate_toy_dataset,
    holdout_split,
    identity_masks,
)
from .types import (
    Dataset,
    Direction,
    Layout,
    Modality,
    PersonImage,
    Protocol,
    QueryGallerySplit,
)

__all__ = [
    "Dataset",
    "Direction",
    "Layout",
    "Modality",
    "PersonImage",
    "Protocol",
    "QueryGallerySplit",
    "load_dataset",
    "split_query_gallery",
    "generate_toy_dataset",
    "export_toy_dataset",
    "holdout_split",
    "identity_masks",
]
