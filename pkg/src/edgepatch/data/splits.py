"""Query/gallery split construction for retrieval evaluation."""

import numpy as np

from edgepatch.errors import SplitError
from .types import Direction, Modality, Protocol, QueryGallerySplit


def split_query_gallery(dataset, direction, protocol, run_seed=0):
    """Build one evaluation split.

    Queries are every image of the query modality; the gallery is either
    all cross-modality images (ALL) or one image per (identity, camera)
    sampled with run_seed (SINGLE_SHOT). The query side never depends on
    the seed.
    """
    if isinstance(direction, str):
        direction = Direction(direction.upper())
    if isinstance(protocol, str):
        protocol = Protocol(protocol.upper())

    queries = sorted(dataset.by_modality(direction.query_modality),
                     key=lambda im: im.image_id)
    pool = sorted(dataset.by_modality(direction.gallery_modality),
                  key=lambda im: im.image_id)
    if not queries or not pool:
        raise SplitError(f"modality missing for direction {direction.value}")

    if protocol is Protocol.ALL:
        gallery = pool
    else:
        rng = np.random.default_rng(np.random.SeedSequence([run_seed, 777]))
        groups = {}
        for im in pool:
            groups.setdefault((im.person_id, im.camera_id), []).append(im)
        gallery = []
        for key in sorted(groups):
            members = groups[key]
            gallery.append(members[int(rng.integers(len(members)))])
        gallery.sort(key=lambda im: im.image_id)

    gallery_ids = {im.person_id for im in gallery}
    queries = [q for q in queries if q.person_id in gallery_ids]
    if not queries:
        raise SplitError("no query has a same-identity gallery image")
    return QueryGallerySplit(queries=queries, gallery=gallery,
                             direction=direction, run_seed=run_seed)
