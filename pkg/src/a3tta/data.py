"""Synthetic multi-domain segmentation benchmark and manifest-based loading.

Phantoms mimic a short-axis cardiac slice: a bright inner blood pool
(label 1), a dark ring around it (label 2) and a crescent-shaped chamber
hugging one side (label 3) on a textured background. Domain shifts are
label-preserving intensity transforms applied in [0, 1] space; the final
image is min-max normalized to [-1, 1].
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

MANIFEST_FORMAT = "a3tta-manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SyntheticTask:
    image_size: int = 64
    num_classes: int = 4
    inner_radius: tuple[float, float] = (6.0, 10.0)
    ring_width: tuple[float, float] = (2.5, 4.5)
    crescent_width: tuple[float, float] = (4.0, 8.0)
    center_jitter: float = 6.0
    texture_strength: float = 0.08


@dataclass(frozen=True)
class DomainSpec:
    """Parameters of a label-preserving intensity shift. Defaults are the identity."""

    name: str = "identity"
    gamma: float = 1.0
    contrast: float = 1.0
    brightness: float = 0.0
    bias_strength: float = 0.0
    gaussian_sigma: float = 0.0
    rician_sigma: float = 0.0
    blur_kernel: int = 1
    blur_axis: int = 1
    tissue_shift: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0.4 <= self.gamma <= 2.5:
            raise ValueError(f"gamma {self.gamma} outside [0.4, 2.5]")
        if self.gaussian_sigma < 0 or self.rician_sigma < 0 or self.bias_strength < 0:
            raise ValueError("noise and bias parameters must be >= 0")
        if self.blur_kernel < 1:
            raise ValueError("blur_kernel must be >= 1")


def default_domains() -> dict[str, DomainSpec]:
    """Source plus three targets of increasing severity."""
    return {
        "source": DomainSpec("source", gaussian_sigma=0.02),
        "target_a": DomainSpec("target_a", gamma=0.55, bias_strength=0.3, gaussian_sigma=0.03,
                               tissue_shift=(0.05, -0.05, 0.1, 0.0)),
        "target_b": DomainSpec("target_b", gamma=1.8, bias_strength=0.5, rician_sigma=0.05,
                               tissue_shift=(0.1, 0.0, 0.15, -0.1)),
        "target_c": DomainSpec("target_c", gamma=2.2, contrast=0.8, bias_strength=0.6,
                               gaussian_sigma=0.05, blur_kernel=3,
                               tissue_shift=(0.15, -0.1, 0.2, -0.15)),
    }


@dataclass
class SegDataset:
    images: np.ndarray  # (N, 1, H, W) float32 in [-1, 1]
    masks: np.ndarray   # (N, H, W) uint8
    domain: str = ""
    spacing: np.ndarray | None = None  # (N, 2) or None
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"{self.domain}_{i:04d}" for i in range(len(self.images))]

    def __len__(self):
        return len(self.images)

    def batches(self, batch_size: int):
        """Fixed-order batches; the last one may be short."""
        for start in range(0, len(self), batch_size):
            sl = slice(start, start + batch_size)
            yield self.images[sl], self.masks[sl], self.ids[sl]

    def subset(self, idx) -> "SegDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return SegDataset(self.images[idx], self.masks[idx], self.domain,
                          None if self.spacing is None else self.spacing[idx],
                          [self.ids[i] for i in idx])


# base tissue intensities: background, inner pool, ring, crescent
_TISSUE = np.array([0.35, 0.9, 0.15, 0.7])


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def render_phantom(task: SyntheticTask, rng: np.random.Generator,
                   tissue_shift=(0.0, 0.0, 0.0, 0.0)):
    """One (intensity in [0, 1], mask) pair."""
    s = task.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    c = (s - 1) / 2.0
    cy, cx = c + rng.uniform(-1, 1, 2) * task.center_jitter
    theta = rng.uniform(0, 2 * np.pi)
    r_in = rng.uniform(*task.inner_radius)
    ecc = rng.uniform(0.8, 1.2)
    ring = rng.uniform(*task.ring_width)
    cres = rng.uniform(*task.crescent_width)

    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    r = np.sqrt((u / ecc) ** 2 + (v * ecc) ** 2)

    mask = np.zeros((s, s), np.uint8)
    inner = r <= r_in
    myo = (r > r_in) & (r <= r_in + ring)
    # crescent: a larger disc shifted along +u, outside the ring
    shift = r_in + ring * 0.6
    r2 = np.sqrt(((u - shift) / (1.0 + 0.3 * ecc)) ** 2 + v ** 2)
    crescent = (r2 <= r_in + ring + cres * 0.6) & (r > r_in + ring) & (u > 0)
    mask[crescent] = 3
    mask[myo] = 2
    mask[inner] = 1

    tissue = np.clip(_TISSUE + np.asarray(tissue_shift), 0.0, 1.0)
    img = tissue[mask]
    img = img + task.texture_strength * _smooth_field(rng, s, 2.0)
    img = ndimage.gaussian_filter(img, 0.7)
    return np.clip(img, 0.0, 1.0), mask


def normalize_minmax(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-12:
        return np.zeros_like(img, dtype=np.float32)
    return (2.0 * (img - lo) / (hi - lo) - 1.0).astype(np.float32)


def apply_gamma(img: np.ndarray, gamma: float) -> np.ndarray:
    return np.clip(img, 0.0, None) ** gamma


def apply_bias_field(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative smooth field exp(strength * quadratic surface)."""
    if strength == 0:
        return img
    s = img.shape[-1]
    t = np.linspace(-1, 1, s)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    coef = rng.uniform(-1, 1, 5)
    surf = coef[0] * xx + coef[1] * yy + coef[2] * xx * yy + coef[3] * xx ** 2 + coef[4] * yy ** 2
    surf = surf / (np.abs(surf).max() + 1e-12)
    return img * np.exp(strength * surf)


def apply_gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return img
    return img + rng.normal(0.0, sigma, img.shape)


def apply_rician_noise(img: np.ndarray, sigma: float = 0.05,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Magnitude of a complex signal with Gaussian noise on both channels.

    ``img`` is taken to be in nonnegative intensity space; the caller
    renormalizes afterwards.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = rng or np.random.default_rng()
    n1 = rng.normal(0.0, sigma, img.shape) if sigma > 0 else 0.0
    n2 = rng.normal(0.0, sigma, img.shape) if sigma > 0 else 0.0
    return np.sqrt((img + n1) ** 2 + n2 ** 2)


def apply_motion_blur(img: np.ndarray, k: int = 12, axis: int = -1) -> np.ndarray:
    """Length-k box blur along one axis with reflect padding."""
    if k < 1:
        raise ValueError("kernel length must be >= 1")
    if k == 1:
        return img.copy()
    return ndimage.uniform_filter1d(img, size=k, axis=axis, mode="reflect")


def apply_domain(img01: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    out = apply_gamma(img01, spec.gamma)
    out = spec.contrast * out + spec.brightness
    out = apply_bias_field(out, spec.bias_strength, rng)
    out = apply_gaussian_noise(out, spec.gaussian_sigma, rng)
    if spec.rician_sigma > 0:
        lo = out.min()
        out = apply_rician_noise(out - min(lo, 0.0), spec.rician_sigma, rng)
    out = apply_motion_blur(out, spec.blur_kernel, axis=spec.blur_axis)
    return normalize_minmax(out)


def generate_domain(task: SyntheticTask, spec: DomainSpec, n: int, seed: int) -> SegDataset:
    """``n`` phantoms under ``spec``; a pure function of its arguments."""
    if n < 1:
        raise ValueError("n must be >= 1")
    images = np.empty((n, 1, task.image_size, task.image_size), np.float32)
    masks = np.empty((n, task.image_size, task.image_size), np.uint8)
    shape_seq, shift_seq = np.random.SeedSequence(seed).spawn(2)
    for i, (ss, ts) in enumerate(zip(shape_seq.spawn(n), shift_seq.spawn(n))):
        base, mask = render_phantom(task, np.random.default_rng(ss), spec.tissue_shift)
        images[i, 0] = apply_domain(base, spec, np.random.default_rng(ts))
        masks[i] = mask
    return SegDataset(images, masks, spec.name)


def render_base(task: SyntheticTask, n: int, seed: int) -> SegDataset:
    """Normalized base renders, the images an identity domain must reproduce."""
    return generate_domain(task, DomainSpec(), n, seed)


def perturb(ds: SegDataset, kind: str, seed: int = 0, sigma: float = 0.05, k: int = 12) -> SegDataset:
    """Noise-robustness variant of a dataset: ``rician`` or ``motion_blur``."""
    rng = np.random.default_rng(seed)
    out = np.empty_like(ds.images)
    for i, img in enumerate(ds.images[:, 0]):
        x = (img.astype(np.float64) + 1.0) / 2.0
        if kind == "rician":
            x = apply_rician_noise(x, sigma, rng)
        elif kind == "motion_blur":
            x = apply_motion_blur(x, k)
        else:
            raise ValueError(f"unknown perturbation {kind!r}")
        out[i, 0] = normalize_minmax(x)
    return SegDataset(out, ds.masks.copy(), f"{ds.domain}+{kind}", ds.spacing, list(ds.ids))


# --- manifests -------------------------------------------------------------

def write_dataset(ds: SegDataset, root, rel_dir: str) -> list[dict]:
    """Write images as float32 TIFF and masks as 8-bit PNG; return manifest rows."""
    root = Path(root)
    (root / rel_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    for i, ident in enumerate(ds.ids):
        img_rel = f"{rel_dir}/{ident}_img.tif"
        mask_rel = f"{rel_dir}/{ident}_mask.png"
        Image.fromarray(ds.images[i, 0].astype(np.float32), mode="F").save(root / img_rel)
        Image.fromarray(ds.masks[i].astype(np.uint8), mode="L").save(root / mask_rel)
        row = {"image": img_rel, "mask": mask_rel, "domain": ds.domain, "id": ident}
        if ds.spacing is not None:
            row["spacing"] = [float(v) for v in ds.spacing[i]]
        rows.append(row)
    return rows


def write_manifest(path, rows: list[dict], num_classes: int = 4):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                             "num_classes": num_classes}) + "\n")
        for row in rows:
            fh.write(json.dumps(row) + "\n")


class ManifestError(ValueError):
    pass


def read_manifest(path) -> tuple[dict, list[dict]]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"manifest {path} has no header")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not an {MANIFEST_FORMAT} file")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {header.get('version')}")
    return header, [json.loads(ln) for ln in lines[1:]]


def load_manifest(path, num_classes: int | None = None) -> dict[str, SegDataset]:
    """Load every row, grouped by domain tag in first-seen order."""
    path = Path(path)
    header, rows = read_manifest(path)
    num_classes = num_classes or header.get("num_classes", 4)
    groups: dict[str, dict] = {}
    shape = None
    for row in rows:
        img_p, mask_p = path.parent / row["image"], path.parent / row["mask"]
        for p in (img_p, mask_p):
            if not p.exists():
                raise ManifestError(f"missing file {p}")
        img = np.asarray(Image.open(img_p), dtype=np.float64)
        mask = np.asarray(Image.open(mask_p))
        if img.shape != mask.shape:
            raise ManifestError(f"{img_p}: image {img.shape} and mask {mask.shape} differ")
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ManifestError(f"{img_p}: shape {img.shape} differs from {shape}")
        if mask.max(initial=0) >= num_classes:
            raise ManifestError(f"{mask_p}: label {int(mask.max())} >= num_classes {num_classes}")
        spacing = row.get("spacing")
        if spacing is not None and min(spacing) <= 0:
            raise ManifestError(f"{img_p}: spacing must be positive")
        g = groups.setdefault(row["domain"], {"img": [], "mask": [], "ids": [], "sp": []})
        g["img"].append(normalize_minmax(img))
        g["mask"].append(mask.astype(np.uint8))
        g["ids"].append(row.get("id", Path(row["image"]).stem))
        g["sp"].append(spacing)
    out = {}
    for dom, g in groups.items():
        sp = None if any(s is None for s in g["sp"]) else np.asarray(g["sp"], np.float64)
        out[dom] = SegDataset(np.stack(g["img"])[:, None], np.stack(g["mask"]), dom, sp, g["ids"])
    return out


def generate_benchmark(root, task: SyntheticTask | None = None, n_per_domain: int = 200,
                       n_train: int = 300, n_val: int = 60, seed: int = 0,
                       domains: dict[str, DomainSpec] | None = None) -> Path:
    """Write source train/val splits and every target domain plus manifests."""
    task = task or SyntheticTask()
    domains = domains or default_domains()
    root = Path(root)
    all_rows = []
    sets = build_benchmark(task, n_per_domain, n_train, n_val, seed, domains)
    for name, ds in sets.items():
        rows = write_dataset(ds, root, name)
        write_manifest(root / f"{name}.jsonl", rows, task.num_classes)
        all_rows += rows
    write_manifest(root / "manifest.jsonl", all_rows, task.num_classes)
    (root / "benchmark.json").write_text(json.dumps({
        "task": asdict(task), "domains": {k: asdict(v) for k, v in domains.items()},
        "seed": seed, "n_per_domain": n_per_domain, "n_train": n_train, "n_val": n_val,
    }, indent=2))
    return root


def build_benchmark(task: SyntheticTask | None = None, n_per_domain: int = 200,
                    n_train: int = 300, n_val: int = 60, seed: int = 0,
                    domains: dict[str, DomainSpec] | None = None) -> dict[str, SegDataset]:
    """In-memory twin of :func:`generate_benchmark` with identical content."""
    task = task or SyntheticTask()
    domains = domains or default_domains()
    src = domains["source"]
    out = {"source_train": replace_domain(generate_domain(task, src, n_train, seed), "source_train"),
           "source_val": replace_domain(generate_domain(task, src, n_val, seed + 1), "source_val")}
    for k, (name, spec) in enumerate(domains.items()):
        if name != "source":
            out[name] = generate_domain(task, spec, n_per_domain, seed + 100 + k)
    return out


def replace_domain(ds: SegDataset, name: str) -> SegDataset:
    return SegDataset(ds.images, ds.masks, name, ds.spacing,
                      [f"{name}_{i:04d}" for i in range(len(ds))])
