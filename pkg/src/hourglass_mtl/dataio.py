"""Raster files and the tab-separated dataset manifest.

Images are 8-bit RGB PNGs, label maps 8-bit single-channel PNGs and instance
maps 16-bit single-channel PNGs. A manifest lists one sample per line as
``image<TAB>labels<TAB>instances``; relative paths are resolved against the
manifest's directory.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import FormatError
from .shapes import Sample


def write_image(path, image: np.ndarray) -> None:
    """Write a ``(3, h, w)`` float image in [0, 1] as 8-bit RGB."""
    rgb = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected an RGB image, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.float64)
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / 255.0)


def write_label_map(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise FormatError("label ids must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def read_label_map(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise FormatError(f"{path}: expected an 8-bit single-channel image, got mode {im.mode}")
        return np.array(im, dtype=np.uint8)


def write_instance_map(path, instances: np.ndarray) -> None:
    instances = np.asarray(instances)
    if instances.min(initial=0) < 0 or instances.max(initial=0) > 65535:
        raise FormatError("instance ids must fit in 16 bits")
    Image.fromarray(instances.astype(np.uint16)).save(path, format="PNG")


def read_instance_map(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I", "L"):
            raise FormatError(f"{path}: expected a 16-bit single-channel image, got mode {im.mode}")
        return np.array(im).astype(np.uint16)


def write_manifest(path, records: Sequence[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write("\t".join(str(p) for p in rec) + "\n")


def read_manifest(path) -> list[tuple[Path, Path, Path]]:
    base = Path(path).resolve().parent
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated paths, got {len(parts)}")
            out.append(tuple(p if os.path.isabs(p) else base / p for p in map(Path, parts)))
    return out


def save_sample(out_dir, stem: str, sample: Sample) -> tuple[str, str, str]:
    """Write one sample; returns paths relative to ``out_dir``."""
    out_dir = Path(out_dir)
    names = (f"{stem}_image.png", f"{stem}_labels.png", f"{stem}_instances.png")
    write_image(out_dir / names[0], sample.image)
    write_label_map(out_dir / names[1], sample.labels)
    write_instance_map(out_dir / names[2], sample.instances)
    return names


def load_manifest_samples(path) -> list[Sample]:
    samples = []
    for img, lab, inst in read_manifest(path):
        for p in (img, lab, inst):
            if not Path(p).is_file():
                raise FileNotFoundError(f"missing file listed in manifest: {p}")
        image = read_image(img)
        labels = read_label_map(lab)
        instances = read_instance_map(inst)
        if labels.shape != instances.shape or image.shape[1:] != labels.shape:
            raise FormatError(f"{img}: image, labels and instances differ in size")
        samples.append(Sample(image, labels, instances))
    return samples
