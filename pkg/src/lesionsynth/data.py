"""Dataset records, manifests and the sample-level transforms.

A manifest is a JSON file::

    {"root": "relative/or/absolute/dir",
     "label_set": ["melanoma", "nevus", ...],
     "records": [{"image": "img/0001.png", "mask": "mask/0001.png",
                  "caption": "...", "category": "melanoma", "source": "real"}]}

``root`` is resolved relative to the manifest file's directory. Masks are
single-channel 8-bit PNGs holding {0, 255}.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .captions import build_generation_prompt

SOURCES = ("real", "synthetic")


class ManifestError(Exception):
    """Manifest file cannot be read or parsed."""


class ManifestValidationError(ManifestError):
    """A manifest record violates an invariant."""


class StratificationError(ValueError):
    pass


class CompositionError(ValueError):
    """Not enough records to build the requested hybrid dataset."""

    def __init__(self, message: str, shortfall: Mapping[str, int]):
        super().__init__(message)
        self.shortfall = dict(shortfall)


@dataclass
class FourChannelSample:
    """RGB image in [0, 1] (H, W, 3) plus an aligned binary mask (H, W)."""

    rgb: np.ndarray
    mask: np.ndarray
    caption: str = ""
    category: str = ""
    source: str = "real"
    ident: str = ""

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        mask = np.asarray(self.mask)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be HxWx3, got {self.rgb.shape}")
        if mask.shape != self.rgb.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match rgb {self.rgb.shape[:2]}")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask must contain only 0 and 1")
        self.mask = mask.astype(np.uint8)
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape

    def to_pixels(self) -> np.ndarray:
        """Stack into a (4, H, W) float array normalized to [-1, 1]."""
        x = np.concatenate([self.rgb.transpose(2, 0, 1), self.mask[None].astype(np.float32)], axis=0)
        return x * 2.0 - 1.0


@dataclass(frozen=True)
class Record:
    image: str
    mask: str
    caption: str
    category: str
    source: str = "real"


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[Record, ...]
    label_set: tuple[str, ...]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "label_set", tuple(self.label_set))
        object.__setattr__(self, "root", Path(self.root))
        labels = set(self.label_set)
        for i, r in enumerate(self.records):
            if r.category not in labels:
                raise ManifestValidationError(
                    f"record {i} ({r.image}): category {r.category!r} not in label_set {list(self.label_set)}"
                )
            if r.source not in SOURCES:
                raise ManifestValidationError(f"record {i} ({r.image}): source {r.source!r} not in {SOURCES}")

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, indices: Iterable[int]) -> "DatasetManifest":
        return replace(self, records=tuple(self.records[i] for i in indices))

    def labels(self) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.label_set)}
        return np.array([index[r.category] for r in self.records], dtype=np.int64)

    def ids(self) -> list[str]:
        """Stable identifiers used for train/test leakage audits."""
        return [str((self.root / r.image).resolve()) for r in self.records]

    def load_sample(self, i: int) -> FourChannelSample:
        r = self.records[i]
        rgb = np.asarray(Image.open(self.root / r.image).convert("RGB"), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(self.root / r.mask).convert("L")) >= 128
        return FourChannelSample(rgb, mask, r.caption, r.category, r.source, ident=r.image)

    def to_dict(self, relative_to: Optional[Path] = None) -> dict:
        root = self.root
        if relative_to is not None:
            try:
                root = Path(self.root).resolve().relative_to(Path(relative_to).resolve())
            except ValueError:
                root = Path(self.root).resolve()
        return {
            "root": str(root),
            "label_set": list(self.label_set),
            "records": [asdict(r) for r in self.records],
        }


def load_manifest(path) -> DatasetManifest:
    """Read and validate a manifest; file references are checked eagerly."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    try:
        root = Path(doc.get("root", "."))
        label_set = list(doc["label_set"])
        raw = doc["records"]
    except (KeyError, TypeError, AttributeError) as exc:
        raise ManifestError(f"{path}: missing field {exc}") from exc
    if not root.is_absolute():
        root = path.parent / root
    records = []
    for i, r in enumerate(raw):
        try:
            rec = Record(r["image"], r["mask"], r.get("caption", ""), r["category"], r.get("source", "real"))
        except (KeyError, TypeError) as exc:
            raise ManifestValidationError(f"record {i}: missing field {exc}") from exc
        for kind, rel in (("image", rec.image), ("mask", rec.mask)):
            if not (root / rel).is_file():
                raise ManifestValidationError(f"record {i}: {kind} file not found: {root / rel}")
        records.append(rec)
    return DatasetManifest(records=tuple(records), label_set=tuple(label_set), root=root)


def save_manifest(m: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(m.to_dict(relative_to=path.parent), indent=2))
    return path


def concat_manifests(manifests: Sequence[DatasetManifest], root: Optional[Path] = None) -> DatasetManifest:
    """Merge manifests that may live under different roots.

    Paths are rewritten as absolute so the result is root-independent.
    """
    labels: list[str] = []
    for m in manifests:
        labels.extend(c for c in m.label_set if c not in labels)
    records = []
    for m in manifests:
        for r in m.records:
            records.append(
                replace(r, image=str((m.root / r.image).resolve()), mask=str((m.root / r.mask).resolve()))
            )
    return DatasetManifest(tuple(records), tuple(labels), root or Path("/"))


# ---------------------------------------------------------------- transforms


def resize_sample(s: FourChannelSample, size: tuple[int, int]) -> FourChannelSample:
    """Resize RGB with LANCZOS and the mask with nearest neighbour.

    ``size`` is ``(H, W)``.
    """
    h, w = int(size[0]), int(size[1])
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {size}")
    if (h, w) == s.size:
        return replace(s, rgb=s.rgb.copy(), mask=s.mask.copy())
    channels = [
        np.asarray(Image.fromarray(s.rgb[..., c].astype(np.float32), mode="F").resize((w, h), Image.LANCZOS))
        for c in range(3)
    ]
    rgb = np.clip(np.stack(channels, axis=-1), 0.0, 1.0)
    mask = np.asarray(Image.fromarray(s.mask * 255).resize((w, h), Image.NEAREST))
    # nearest preserves {0,255}; threshold anyway in case of format drift
    return replace(s, rgb=rgb, mask=(mask >= 128).astype(np.uint8))


@dataclass(frozen=True)
class AugmentationConfig:
    """Probabilities and ranges for the paired transforms.

    Spatial ops act on RGB and mask together; pixel ops touch RGB only.
    The default instance is the identity.
    """

    hflip_p: float = 0.0
    vflip_p: float = 0.0
    rotate_p: float = 0.0
    max_degrees: float = 0.0
    scale_p: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    brightness_p: float = 0.0
    brightness_range: tuple[float, float] = (0.0, 0.0)
    contrast_p: float = 0.0
    contrast_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        for name in ("hflip_p", "vflip_p", "rotate_p", "scale_p", "brightness_p", "contrast_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range must be positive")

    @classmethod
    def default_training(cls) -> "AugmentationConfig":
        return cls(
            hflip_p=0.5,
            vflip_p=0.5,
            rotate_p=0.3,
            max_degrees=20.0,
            scale_p=0.3,
            scale_range=(0.9, 1.1),
            brightness_p=0.3,
            brightness_range=(-0.05, 0.05),
            contrast_p=0.3,
            contrast_range=(0.9, 1.1),
        )


def augment_seed(seed: int, epoch: int, index: int) -> int:
    """Independent per-(epoch, index) seed so augmentation is order-free."""
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def _affine(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int) -> np.ndarray:
    return ndimage.affine_transform(img, matrix, offset=offset, order=order, mode="nearest")


def augment_pair(s: FourChannelSample, cfg: AugmentationConfig, seed: int) -> FourChannelSample:
    rng = np.random.default_rng(seed)
    rgb, mask = s.rgb, s.mask
    # draw every decision up front so the random stream does not depend on branches
    do_h, do_v, do_rot, do_scale, do_b, do_c = rng.random(6) < [
        cfg.hflip_p,
        cfg.vflip_p,
        cfg.rotate_p,
        cfg.scale_p,
        cfg.brightness_p,
        cfg.contrast_p,
    ]
    angle = rng.uniform(-cfg.max_degrees, cfg.max_degrees)
    scale = rng.uniform(*cfg.scale_range)
    bright = rng.uniform(*cfg.brightness_range)
    contrast = rng.uniform(*cfg.contrast_range)

    if do_h:
        rgb, mask = rgb[:, ::-1], mask[:, ::-1]
    if do_v:
        rgb, mask = rgb[::-1], mask[::-1]
    if (do_rot and angle != 0.0) or (do_scale and scale != 1.0):
        theta = math.radians(angle) if do_rot else 0.0
        k = scale if do_scale else 1.0
        # output->input mapping about the image centre
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]) / k
        centre = (np.array(mask.shape, dtype=np.float64) - 1.0) / 2.0
        offset = centre - rot @ centre
        rgb = np.stack([_affine(rgb[..., c], rot, offset, order=1) for c in range(3)], axis=-1)
        mask = _affine(mask.astype(np.float64), rot, offset, order=0)
    mask = (np.asarray(mask) >= 0.5).astype(np.uint8)
    rgb = np.ascontiguousarray(rgb, dtype=np.float32)
    if do_c:
        mean = rgb.mean()
        rgb = (rgb - mean) * contrast + mean
    if do_b:
        rgb = rgb + bright
    rgb = np.clip(rgb, 0.0, 1.0)
    return replace(s, rgb=rgb, mask=np.ascontiguousarray(mask))


# ------------------------------------------------------------------- splits


def stratified_kfold(m: DatasetManifest, k: int, seed: int) -> list[tuple[DatasetManifest, DatasetManifest]]:
    """Split into ``k`` (train, validation) pairs with per-class balance.

    Each class is shuffled and dealt round-robin; the dealing offset carries
    over between classes so total fold sizes also differ by at most one.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = m.labels()
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for ci, name in enumerate(m.label_set):
        idx = np.flatnonzero(labels == ci)
        if idx.size == 0:
            continue
        if idx.size < k:
            raise StratificationError(f"class {name!r} has {idx.size} samples, fewer than k={k}")
        rng.shuffle(idx)
        for j, i in enumerate(idx):
            folds[(offset + j) % k].append(int(i))
        offset = (offset + idx.size) % k
    out = []
    for f in range(k):
        val = sorted(folds[f])
        train = sorted(i for g in range(k) if g != f for i in folds[g])
        out.append((m.subset(train), m.subset(val)))
    return out


def _largest_remainder(weights: Mapping[str, int], total: int) -> dict[str, int]:
    keys = [c for c, w in weights.items() if w > 0]
    wsum = sum(weights[c] for c in keys)
    if total == 0 or wsum == 0:
        return {c: 0 for c in weights}
    exact = {c: total * weights[c] / wsum for c in keys}
    alloc = {c: int(math.floor(exact[c])) for c in keys}
    rest = total - sum(alloc.values())
    # ties broken by declaration order for determinism
    order = sorted(keys, key=lambda c: (-(exact[c] - alloc[c]), keys.index(c)))
    for c in order[:rest]:
        alloc[c] += 1
    return {c: alloc.get(c, 0) for c in weights}


def _draw(m: DatasetManifest, n: int, rng: np.random.Generator, override: Optional[Mapping[str, int]]):
    """Pick ``n`` record indices, proportional per class unless overridden."""
    labels = m.labels()
    avail = {c: int((labels == i).sum()) for i, c in enumerate(m.label_set)}
    quota = {c: 0 for c in m.label_set}
    fixed = dict(override or {})
    unknown = set(fixed) - set(m.label_set)
    if unknown:
        raise ValueError(f"override names unknown classes: {sorted(unknown)}")
    quota.update(fixed)
    free = n - sum(fixed.values())
    if free < 0:
        raise CompositionError(f"override requests {sum(fixed.values())} records but only {n} allowed", {})
    rest = {c: (avail[c] if c not in fixed else 0) for c in m.label_set}
    for c, q in _largest_remainder(rest, free).items():
        quota[c] += q
    short = {c: quota[c] - avail[c] for c in m.label_set if quota[c] > avail[c]}
    if short:
        return None, short
    chosen = []
    for i, c in enumerate(m.label_set):
        idx = np.flatnonzero(labels == i)
        chosen.extend(int(j) for j in rng.choice(idx, size=quota[c], replace=False))
    return sorted(chosen), {}


def assemble_hybrid(
    real: DatasetManifest,
    synth: DatasetManifest,
    real_fraction: float,
    total: int,
    seed: int,
    class_override: Optional[Mapping[str, int]] = None,
) -> DatasetManifest:
    """Compose ``round(total * real_fraction)`` real records plus synthetic ones.

    ``class_override`` pins per-class counts on the synthetic side; the
    remaining synthetic budget is split proportionally.
    """
    if not 0.0 <= real_fraction <= 1.0:
        raise ValueError(f"real_fraction must be in [0, 1], got {real_fraction}")
    if total < 0:
        raise ValueError("total must be >= 0")
    n_real = int(math.floor(total * real_fraction + 0.5))
    n_synth = total - n_real
    shortfall = {}
    if n_real > len(real):
        shortfall["real"] = n_real - len(real)
    if n_synth > len(synth):
        shortfall["synthetic"] = n_synth - len(synth)
    if shortfall:
        raise CompositionError(
            f"insufficient records: need {n_real} real / {n_synth} synthetic, "
            f"have {len(real)} / {len(synth)}",
            shortfall,
        )
    rng = np.random.default_rng(seed)
    r_idx, r_short = _draw(real, n_real, rng, None)
    s_idx, s_short = _draw(synth, n_synth, rng, class_override)
    if r_short or s_short:
        raise CompositionError(
            f"per-class shortfall: real={r_short} synthetic={s_short}",
            {**{f"real:{c}": v for c, v in r_short.items()}, **{f"synthetic:{c}": v for c, v in s_short.items()}},
        )
    parts = [real.subset(r_idx), synth.subset(s_idx)]
    merged = concat_manifests(parts)
    recs = [replace(r, source="real") for r in merged.records[:n_real]] + [
        replace(r, source="synthetic") for r in merged.records[n_real:]
    ]
    return replace(merged, records=tuple(recs))


def class_histogram(m: DatasetManifest) -> dict[str, int]:
    hist = {c: 0 for c in m.label_set}
    for r in m.records:
        hist[r.category] += 1
    return hist


# ---------------------------------------------------------------- toy data

TOY_CLASSES = ("melanoma", "nevus")
# per-class lesion colour (RGB, [0, 1]) and axis ranges relative to image size
_TOY_STYLE = {
    0: ((0.95, 0.75, 0.55), (0.22, 0.38), (0.12, 0.22)),
    1: ((0.75, 0.85, 0.95), (0.14, 0.24), (0.14, 0.24)),
}


def make_toy_sample(rng: np.random.Generator, size: int, class_index: int, category: str) -> FourChannelSample:
    """One procedurally generated bright-ellipse "lesion" on dark skin."""
    colour, (a_lo, a_hi), (b_lo, b_hi) = _TOY_STYLE[class_index % len(_TOY_STYLE)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.35, 0.65, size=2) * (size - 1)
    a = rng.uniform(a_lo, a_hi) * size
    b = rng.uniform(b_lo, b_hi) * size
    th = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
    v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
    mask = ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)
    skin = np.array([0.30, 0.20, 0.16]) + rng.uniform(-0.04, 0.04, size=3)
    lesion = np.array(colour) + rng.uniform(-0.05, 0.05, size=3)
    rgb = np.where(mask[..., None] == 1, lesion, skin)
    rgb = rgb + rng.normal(0.0, 0.03, size=rgb.shape)
    return FourChannelSample(
        np.clip(rgb, 0, 1).astype(np.float32), mask, build_generation_prompt(category), category, "real"
    )


def make_toy_dataset(
    n: int, size: int = 32, seed: int = 0, classes: Sequence[str] = TOY_CLASSES
) -> list[FourChannelSample]:
    """Balanced list of toy samples, classes interleaved."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        ci = i % len(classes)
        s = make_toy_sample(rng, size, ci, classes[ci])
        s.ident = f"toy_{i:05d}"
        out.append(s)
    return out


def write_samples(
    samples: Sequence[FourChannelSample], root, label_set: Sequence[str], manifest_name: str = "manifest.json"
) -> DatasetManifest:
    """Write samples as PNG pairs under ``root`` and save a manifest there."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        stem = s.ident or f"sample_{i:05d}"
        img_rel, mask_rel = f"images/{stem}.png", f"masks/{stem}_mask.png"
        save_rgb_png(s.rgb, root / img_rel)
        save_mask_png(s.mask, root / mask_rel)
        records.append(Record(img_rel, mask_rel, s.caption, s.category, s.source))
    m = DatasetManifest(tuple(records), tuple(label_set), root)
    save_manifest(m, root / manifest_name)
    return m


def save_rgb_png(rgb01: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(rgb01) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")
