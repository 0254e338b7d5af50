"""Depth colorization, augmentation, dataset loading and synthetic corpora.

Depth maps are 16-bit with 0 marking missing measurements. Colorization
goes through surface normals: missing pixels are filled from the nearest
valid neighbor (row-major BFS), gradients come from central differences
(one-sided at the borders), and the unit normal n = normalize((-dz/dx,
-dz/dy, 1)) is mapped channel-wise to 8-bit via (n + 1) / 2 * 255 with
round-half-up.

Synthetic two-modality datasets render one bit per modality (horizontal
vs vertical bar). The "xor" coupling labels a sample by the XOR of the two
bits, so either modality alone carries exactly zero information about the
label while the pair determines it; the "redundant" coupling renders the
label in both modalities, giving correlated streams for studying the
orthogonality regularizer.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

__all__ = [
    "Sample",
    "SplitSpec",
    "SyntheticSpec",
    "depth_to_surface_normals",
    "colorize_normals",
    "decode_colorized",
    "colorize_depth",
    "augment",
    "select_held_out",
    "make_split",
    "make_synthetic_dataset",
    "make_synthetic_xor_dataset",
    "load_dataset",
    "export_dataset_layout",
    "class_names_for",
]


@dataclass
class Sample:
    rgb: np.ndarray        # (H, W, 3) uint8
    depth_raw: np.ndarray  # (H, W) uint16, 0 = missing
    label: int
    instance_id: str

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth_raw.shape:
            raise ValueError(
                f"rgb {self.rgb.shape[:2]} and depth {self.depth_raw.shape} sizes differ"
            )


@dataclass
class SplitSpec:
    held_out_instances: Dict[int, str]  # one instance per class label
    split_index: int


@dataclass
class SyntheticSpec:
    num_classes: int = 2
    samples_per_class: int = 64
    image_size: int = 16
    seed: int = 0
    coupling: str = "xor"  # or "redundant"
    noise_level: float = 0.05
    instances_per_class: int = 4
    missing_fraction: float = 0.02


# ---------------------------------------------------------------------------
# depth to surface normals

def _fill_missing_nearest(depth: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Breadth-first fill of missing pixels from valid neighbors, row-major order."""
    h, w = depth.shape
    filled = depth.copy()
    known = ~missing
    queue = deque(zip(*np.nonzero(known)))
    while queue:
        i, j = queue.popleft()
        for di, dj in ((-1, 0), (0, -1), (0, 1), (1, 0)):
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w and not known[ni, nj]:
                filled[ni, nj] = filled[i, j]
                known[ni, nj] = True
                queue.append((ni, nj))
    return filled


def depth_to_surface_normals(depth_raw: np.ndarray, fill_missing: bool = True) -> np.ndarray:
    """Per-pixel unit normals (H, W, 3) from a 16-bit depth map."""
    depth_raw = np.asarray(depth_raw)
    if depth_raw.ndim != 2 or depth_raw.shape[0] < 3 or depth_raw.shape[1] < 3:
        raise ValueError(f"depth map must be at least 3x3, got shape {depth_raw.shape}")
    missing = depth_raw == 0
    if missing.all():
        raise ValueError("depth map has no valid pixels")
    z = depth_raw.astype(np.float64)
    if fill_missing and missing.any():
        z = _fill_missing_nearest(z, missing)

    gx = np.empty_like(z)
    gx[:, 1:-1] = (z[:, 2:] - z[:, :-2]) / 2.0
    gx[:, 0] = z[:, 1] - z[:, 0]
    gx[:, -1] = z[:, -1] - z[:, -2]
    gy = np.empty_like(z)
    gy[1:-1, :] = (z[2:, :] - z[:-2, :]) / 2.0
    gy[0, :] = z[1, :] - z[0, :]
    gy[-1, :] = z[-1, :] - z[-2, :]

    n = np.stack([-gx, -gy, np.ones_like(z)], axis=2)
    norms = np.sqrt((n * n).sum(axis=2, keepdims=True))
    return n / norms


def colorize_normals(normals: np.ndarray) -> np.ndarray:
    """Map unit-normal components from [-1, 1] to 8-bit channels, round-half-up."""
    normals = np.asarray(normals, dtype=np.float64)
    if normals.ndim != 3 or normals.shape[2] != 3:
        raise ValueError(f"normals must be (H, W, 3), got {normals.shape}")
    if np.abs(normals).max() > 1.0 + 1e-6:
        raise ValueError(
            f"normal component out of [-1, 1]: max magnitude {np.abs(normals).max():.6f}"
        )
    v = (np.clip(normals, -1.0, 1.0) + 1.0) / 2.0 * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def decode_colorized(image: np.ndarray) -> np.ndarray:
    """Inverse of colorize_normals up to quantization."""
    return np.asarray(image, dtype=np.float64) / 255.0 * 2.0 - 1.0


def colorize_depth(depth_raw: np.ndarray, fill_missing: bool = True) -> np.ndarray:
    """Full pipeline: depth map -> surface normals -> 8-bit 3-channel image."""
    return colorize_normals(depth_to_surface_normals(depth_raw, fill_missing))


# ---------------------------------------------------------------------------
# augmentation

def _nearest_indices(n_out: int, n_in: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def scale_image(arr: np.ndarray, factor: float) -> np.ndarray:
    """Nearest-neighbor rescale, then center pad (edge) or crop back to size."""
    h, w = arr.shape[:2]
    nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
    scaled = arr[np.ix_(_nearest_indices(nh, h), _nearest_indices(nw, w))]
    if nh >= h:
        top, left = (nh - h) // 2, (nw - w) // 2
        return np.ascontiguousarray(scaled[top : top + h, left : left + w])
    pt, pl = (h - nh) // 2, (w - nw) // 2
    pad = [(pt, h - nh - pt), (pl, w - nw - pl)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(scaled, pad, mode="edge")


def flip_horizontal(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr[:, ::-1])


def flip_vertical(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr[::-1])


def rotate90(arr: np.ndarray, turns: int = 1) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(arr, turns, axes=(0, 1)))


def augment(sample: Sample, seed: int = 0) -> List[Sample]:
    """Seven geometric variants with the same transform on both modalities.

    Returns [original, scale 0.9, scale 1.1, horizontal flip, vertical flip,
    rotate 90, rotate 270]. All transforms are deterministic, so the seed is
    accepted for interface uniformity but unused. Rotations require square
    images so dimensions are preserved.
    """
    h, w = sample.depth_raw.shape
    if h != w:
        raise ValueError(f"augment requires square images for rotations, got {h}x{w}")
    transforms = [
        lambda a: a,
        lambda a: scale_image(a, 0.9),
        lambda a: scale_image(a, 1.1),
        flip_horizontal,
        flip_vertical,
        lambda a: rotate90(a, 1),
        lambda a: rotate90(a, 3),
    ]
    return [
        Sample(
            rgb=tf(sample.rgb),
            depth_raw=tf(sample.depth_raw),
            label=sample.label,
            instance_id=sample.instance_id,
        )
        for tf in transforms
    ]


# ---------------------------------------------------------------------------
# splits

def select_held_out(samples: Sequence[Sample], split_index: int, seed: int) -> SplitSpec:
    by_class: Dict[int, List[str]] = {}
    for s in samples:
        by_class.setdefault(s.label, [])
        if s.instance_id not in by_class[s.label]:
            by_class[s.label].append(s.instance_id)
    held = {}
    for label in sorted(by_class):
        instances = sorted(by_class[label])
        if len(instances) < 2:
            raise ValueError(
                f"class {label} has a single instance {instances}; cannot hold one out"
            )
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, label])))
        order = [instances[i] for i in rng.permutation(len(instances))]
        held[label] = order[split_index % len(order)]
    return SplitSpec(held_out_instances=held, split_index=split_index)


def make_split(samples: Sequence[Sample], split_index: int, seed: int
               ) -> Tuple[List[Sample], List[Sample]]:
    """Leave-one-instance-out split, deterministic in (split_index, seed)."""
    spec = select_held_out(samples, split_index, seed)
    held = set(spec.held_out_instances.values())
    train = [s for s in samples if s.instance_id not in held]
    test = [s for s in samples if s.instance_id in held]
    return train, test


# ---------------------------------------------------------------------------
# synthetic two-modality datasets

def _render_rgb_bit(bit: int, size: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    """A bright horizontal (bit 0) or vertical (bit 1) bar on a dark background."""
    img = np.full((size, size), 40.0)
    half = size // 2
    thickness = max(1, size // 8)
    if bit == 0:
        img[half - thickness : half + thickness, :] = 220.0
    else:
        img[:, half - thickness : half + thickness] = 220.0
    if noise > 0:
        img += rng.normal(0.0, noise, size=img.shape)
    return img


def _render_depth_bit(bit: int, size: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    """A raised ridge across the depth plane, horizontal (0) or vertical (1).

    The tent profile slopes toward the camera, so after surface-normal
    colorization the ridge reads as two thick bands of tilted normals; noise
    stays well below one depth unit per pixel so the flat background keeps
    its up-normal.
    """
    img = np.full((size, size), 1200.0)
    center = size / 2.0 - 0.5
    half_width = max(2.0, size / 4.0)
    coords = np.arange(size, dtype=np.float64)
    tent = np.maximum(0.0, 1.0 - np.abs(coords - center) / half_width)
    if bit == 0:
        img -= 500.0 * tent[:, None]
    else:
        img -= 500.0 * tent[None, :]
    if noise > 0:
        img += rng.normal(0.0, noise, size=img.shape)
    return img


def make_synthetic_dataset(spec: SyntheticSpec) -> List[Sample]:
    """Render paired RGB and depth images with a bit per modality.

    Couplings:
      xor        label = rgb_bit XOR depth_bit (needs num_classes == 2);
                 bit combinations cycle exactly, so labels are exactly
                 balanced and each single modality is exactly uninformative.
      redundant  both modalities render the label bit.
    """
    if spec.coupling not in ("xor", "redundant"):
        raise ValueError(f"unknown coupling {spec.coupling!r}")
    if spec.num_classes != 2:
        raise ValueError(f"synthetic datasets are two-class, got {spec.num_classes}")
    if spec.image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {spec.image_size}")
    k = spec.instances_per_class
    if k < 2:
        raise ValueError("need at least 2 instances per class for split protocols")
    if spec.samples_per_class % (2 * k) != 0:
        raise ValueError(
            f"samples_per_class must be divisible by 2*instances_per_class = {2 * k} "
            f"to balance bit combinations, got {spec.samples_per_class}"
        )
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    samples = []
    for label in range(2):
        if spec.coupling == "xor":
            combos = [(0, 0), (1, 1)] if label == 0 else [(0, 1), (1, 0)]
        else:
            combos = [(label, label)]
        for s in range(spec.samples_per_class):
            instance = s % k
            a, b = combos[(s // k) % len(combos)]
            rgb_plane = _render_rgb_bit(a, spec.image_size, rng, spec.noise_level * 255.0)
            rgb = np.clip(np.repeat(rgb_plane[:, :, None], 3, axis=2), 0, 255).astype(np.uint8)
            depth_plane = _render_depth_bit(b, spec.image_size, rng, spec.noise_level * 10.0)
            depth = np.clip(depth_plane, 1.0, 65535.0).astype(np.uint16)
            if spec.missing_fraction > 0:
                holes = rng.random(depth.shape) < spec.missing_fraction
                depth[holes] = 0
            samples.append(Sample(rgb=rgb, depth_raw=depth, label=label,
                                  instance_id=f"class{label:03d}/inst{instance:02d}"))
    return samples


def make_synthetic_xor_dataset(spec: SyntheticSpec) -> List[Sample]:
    if spec.coupling != "xor":
        raise ValueError(f"expected xor coupling, got {spec.coupling!r}")
    return make_synthetic_dataset(spec)


# ---------------------------------------------------------------------------
# on-disk dataset layout: root/<class>/<instance>/<frame>_rgb.png + _depth.png

def load_dataset(root) -> List[Sample]:
    """Load samples in deterministic sorted order; labels follow class-dir order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    samples = []
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    for label, class_dir in enumerate(class_dirs):
        for inst_dir in sorted(d for d in class_dir.iterdir() if d.is_dir()):
            rgb_paths = sorted(inst_dir.glob("*_rgb.png"))
            depth_paths = {p.name for p in inst_dir.glob("*_depth.png")}
            seen_depth = set()
            for rgb_path in rgb_paths:
                depth_name = rgb_path.name[: -len("_rgb.png")] + "_depth.png"
                if depth_name not in depth_paths:
                    raise FileNotFoundError(f"missing depth pair for {rgb_path}")
                seen_depth.add(depth_name)
                depth_path = inst_dir / depth_name
                try:
                    rgb = np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.uint8)
                    depth = np.asarray(Image.open(depth_path), dtype=np.uint16)
                except Exception as e:
                    raise IOError(f"unreadable image under {inst_dir}: {e}") from e
                samples.append(Sample(
                    rgb=rgb,
                    depth_raw=depth,
                    label=label,
                    instance_id=f"{class_dir.name}/{inst_dir.name}",
                ))
            orphans = depth_paths - seen_depth
            if orphans:
                raise FileNotFoundError(
                    f"depth image(s) without rgb pair in {inst_dir}: {sorted(orphans)[0]}"
                )
    return samples


def class_names_for(samples: Sequence[Sample]) -> List[str]:
    """One display name per label, derived from instance ids."""
    names: Dict[int, str] = {}
    for s in samples:
        names.setdefault(s.label, s.instance_id.split("/")[0])
    return [names.get(label, f"class{label:03d}") for label in range(max(names) + 1)] if names else []


def export_dataset_layout(samples: Sequence[Sample], root) -> None:
    """Write samples to the directory layout that load_dataset reads."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    frame_counter: Dict[str, int] = {}
    for s in samples:
        inst_dir = root / s.instance_id
        inst_dir.mkdir(parents=True, exist_ok=True)
        frame = frame_counter.get(s.instance_id, 0)
        frame_counter[s.instance_id] = frame + 1
        Image.fromarray(s.rgb).save(inst_dir / f"{frame:04d}_rgb.png")
        Image.fromarray(s.depth_raw).save(inst_dir / f"{frame:04d}_depth.png")
