"""Generate the two-modality phantom dataset on disk, already preprocessed."""
from __future__ import annotations

from pathlib import Path

from sfuda3d.data.phantom import PhantomSpec, gen_phantom
from sfuda3d.data.preprocess import preprocess
from sfuda3d.data.volume import Manifest, ManifestEntry, write_volume
from sfuda3d.rng import subsystem_seed

MANIFEST_NAME = "manifest.json"


def volume_seed(seed: int, modality: str, split: str, index: int) -> int:
    """Training anatomy differs between modalities; test anatomy is shared so the domain gap is appearance only."""
    key = f"phantom/{modality}/train/{index}" if split == "train" else f"phantom/{split}/{index}"
    return subsystem_seed(seed, key) % 2**31


def generate_dataset(out_dir, seed: int = 42, n_train: int = 10, n_test: int = 4,
                     modalities=("A", "B"), shape=(64, 64, 64)) -> Manifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for modality in modalities:
        for split, count in (("train", n_train), ("test", n_test)):
            for i in range(count):
                spec = PhantomSpec(seed=volume_seed(seed, modality, split, i), modality=modality, shape=tuple(shape))
                vol, labels = preprocess(*gen_phantom(spec))
                vid = f"{modality}_{split}_{i:02d}"
                image_path, label_path = out_dir / f"{vid}_image.svol", out_dir / f"{vid}_label.svol"
                write_volume(image_path, vol)
                write_volume(label_path, labels)
                entries.append(ManifestEntry(vid, modality, image_path, label_path, split))
    manifest = Manifest(entries)
    manifest.write(out_dir / MANIFEST_NAME)
    return manifest
