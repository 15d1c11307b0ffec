"""Dataset-level glue: region extraction plus featurization for every manifest image."""
from __future__ import annotations

import warnings
from collections import Counter

import numpy as np

from .data import DatasetManifest, RegionGrid, extract_regions, load_image_and_mask
from .features import FeatureStore, featurize_patches
from .trainer import Geometry


def region_grid(entry, geometry: Geometry, with_patches: bool = True) -> RegionGrid:
    image, mask = load_image_and_mask(entry)
    return extract_regions(image, mask, geometry.window, geometry.stride, geometry.coverage,
                           entry.image_id, with_patches=with_patches)


def extract_features(manifest: DatasetManifest, geometry: Geometry) -> tuple[FeatureStore, Counter]:
    """Featurize every retained region; returns the store and a region-count histogram."""
    store = FeatureStore(geometry.feature_dim)
    hist: Counter = Counter()
    for entry in manifest:
        grid = region_grid(entry, geometry)
        hist[len(grid)] += 1
        if len(grid) == 0:
            warnings.warn(f"{entry.image_id}: no regions retained", stacklevel=2)
            continue
        feats = featurize_patches(grid.patches, geometry.feature_seed, geometry.feature_dim)
        store.add_image(entry.image_id, grid.indices, feats.astype(np.float32))
    return store, hist
