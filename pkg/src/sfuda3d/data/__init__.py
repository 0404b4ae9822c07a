"""Phantom generation, preprocessing, augmentation, crop grids and volume I/O."""
from sfuda3d.data.augment import augment
from sfuda3d.data.crops import Crop, as_stride, axis_origins, crop_grid, random_crop
from sfuda3d.data.dataset import MANIFEST_NAME, generate_dataset, volume_seed
from sfuda3d.data.phantom import Ellipsoid, PhantomSpec, gen_phantom, phantom_labels
from sfuda3d.data.preprocess import percentile_nearest_rank, preprocess
from sfuda3d.data.volume import (
    CLASS_NAMES,
    LabelMap,
    Manifest,
    ManifestEntry,
    Volume,
    load_images,
    load_pairs,
    read_volume,
    write_volume,
)

__all__ = [
    "CLASS_NAMES", "Crop", "MANIFEST_NAME", "Ellipsoid", "LabelMap", "Manifest", "ManifestEntry", "PhantomSpec", "Volume",
    "as_stride", "augment", "axis_origins", "crop_grid", "gen_phantom", "generate_dataset", "load_images", "load_pairs",
    "percentile_nearest_rank", "phantom_labels", "preprocess", "random_crop", "read_volume", "volume_seed", "write_volume",
]
