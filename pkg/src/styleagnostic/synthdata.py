"""Synthetic style-shift dataset with independently controlled content and style.

Content is one of K binary spatial patterns. Style is a statistics-level
recipe applied on top of the pattern: a per-channel colour offset and
contrast gain, a smooth colour field and a stationary oriented texture. Each
domain has its own base recipe, and within a domain every class has a
typical texture, so style correlates with the label inside a domain but
the correlation does not carry over to unseen domains. Only the geometry
is shared across domains.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

PATTERN_NAMES = ("hbars", "vbars", "cross", "frame", "checker", "diagonal", "square")
DOMAIN_NAMES = ("photo", "art", "cartoon", "sketch")
SPLITS = ("train", "val", "test")


# content ------------------------------------------------------------------------

def content_pattern(name: str, size: int = 32) -> np.ndarray:
    """Binary (size, size) mask; every pattern covers roughly half the image."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = size / 32.0
    c = (size - 1) / 2.0
    if name == "hbars":
        m = (yy // (8 * u)) % 2 == 0
    elif name == "vbars":
        m = (xx // (8 * u)) % 2 == 0
    elif name == "cross":
        half = 5 * u
        m = (np.abs(yy - c) < half) | (np.abs(xx - c) < half)
    elif name == "frame":
        r = np.maximum(np.abs(yy - c), np.abs(xx - c))
        m = (r >= 6.0 * u) & (r < 13.0 * u)
    elif name == "checker":
        m = ((yy // (8 * u)) + (xx // (8 * u))) % 2 == 0
    elif name == "diagonal":
        m = ((xx + yy) // (8 * u)) % 2 == 0
    elif name == "square":
        m = (np.abs(yy - c) < 11.5 * u) & (np.abs(xx - c) < 11.5 * u)
    else:
        raise ValueError(f"unknown pattern {name!r}")
    return m.astype(bool)


def pattern_catalog(k: int, size: int = 32) -> np.ndarray:
    if not 1 <= k <= len(PATTERN_NAMES):
        raise ValueError(f"num_classes must be in [1, {len(PATTERN_NAMES)}]")
    return np.stack([content_pattern(n, size) for n in PATTERN_NAMES[:k]])


# style -----------------------------------------------------------------------------

@dataclass(frozen=True)
class StyleRecipe:
    """Statistics-level rendering parameters for one (domain, class) pair."""

    offset: tuple          # per-channel base level
    gain: tuple            # per-channel contrast gain applied to the pattern
    field_amp: float       # amplitude of the smooth colour field
    texture_amp: float     # amplitude of the oriented texture
    texture_freqs: tuple   # two (fy, fx) wave-vectors, cycles per pixel; their difference sets the beat
    texture_color: tuple   # per-channel texture weights

    def expected_stats(self, contrast: float, fg_fraction: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
        """Approximate per-channel (mean, std) of an image rendered with this recipe."""
        gain = np.asarray(self.gain)
        off = np.asarray(self.offset)
        color = np.asarray(self.texture_color)
        amp = gain * contrast / 2.0
        mean = off + amp * (2 * fg_fraction - 1)
        # the smooth field is the mean of two unit cosines: variance 1/4
        var = amp ** 2 * 4 * fg_fraction * (1 - fg_fraction) + (self.texture_amp * color) ** 2 / 2 \
            + self.field_amp ** 2 / 4
        return mean, np.sqrt(var)


@dataclass(frozen=True)
class StyleShiftSpec:
    num_classes: int = 7
    num_domains: int = 4
    image_size: int = 32
    samples_per_class_per_domain: int = 100
    seed: int = 0
    style_class_corr: float = 1.0
    contrast: float = 0.035
    texture_gain: float = 1.0
    tint_strength: float = 0.12
    shift_px: int = 2
    pixel_noise: float = 0.005
    split_fractions: tuple = (0.7, 0.15, 0.15)

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(self.split_fractions))
        if self.num_domains < 1 or self.num_domains > len(DOMAIN_NAMES):
            raise ValueError(f"num_domains must be in [1, {len(DOMAIN_NAMES)}]")
        pattern_catalog(self.num_classes, self.image_size)
        if not 0.0 <= self.style_class_corr <= 1.0:
            raise ValueError("style_class_corr must be in [0, 1]")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or len(self.split_fractions) != 3:
            raise ValueError("split_fractions must be three numbers summing to 1")

    @property
    def domain_names(self) -> tuple:
        return DOMAIN_NAMES[: self.num_domains]

    def patterns(self) -> np.ndarray:
        return pattern_catalog(self.num_classes, self.image_size)

    def recipes(self) -> dict:
        """Deterministic recipe for every (domain, class) pair."""
        return _recipes(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StyleShiftSpec":
        return cls(**d)


# base recipe per domain: colour offset, pattern gain, field amplitude, texture amplitude
_DOMAIN_BASE = {
    "photo": ((0.45, 0.40, 0.35), (1.0, 0.9, 0.8), 0.003, 0.24),
    "art": ((0.55, 0.35, 0.50), (0.8, 1.1, 0.9), 0.004, 0.30),
    "cartoon": ((0.35, 0.55, 0.45), (1.2, 1.0, 1.1), 0.002, 0.18),
    "sketch": ((0.50, 0.50, 0.55), (0.9, 0.9, 0.9), 0.000, 0.27),
}


TEXTURE_BAND = (1 / 6, 1 / 3)  # texture frequencies, cycles per pixel
LOWPASS_CUTOFF = 0.10          # binarization keeps frequencies below this, cycles per pixel


def texture_lattice(size: int) -> list:
    """Wave-vectors (fy, fx) in FFT bins whose frequency lies in TEXTURE_BAND, one per +-pair.

    Being on the FFT lattice, every texture is exactly periodic on the
    image, so a Fourier low-pass below the band removes it completely.
    """
    lo, hi = TEXTURE_BAND[0] * size, TEXTURE_BAND[1] * size
    out = []
    for fy in range(0, size // 2):
        for fx in range(-size // 2 + 1, size // 2):
            if (fy == 0 and fx <= 0) or not lo <= np.hypot(fy, fx) <= hi:
                continue
            out.append((fy, fx))
    return out


def _beat_pairs(lattice: list, max_beat: int = 3) -> list:
    # pairs of lattice wave-vectors at most max_beat bins apart
    pairs = []
    for i, (ay, ax) in enumerate(lattice):
        for by, bx in lattice[i + 1:]:
            if max(abs(ay - by), abs(ax - bx)) <= max_beat:
                pairs.append(((ay, ax), (by, bx)))
    return pairs


def _recipes(spec: StyleShiftSpec) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5717]))
    pairs = _beat_pairs(texture_lattice(spec.image_size))
    size = spec.image_size
    out = {}
    for d, dname in enumerate(spec.domain_names):
        offset, gain, field_amp, tex_amp = _DOMAIN_BASE[dname]
        # every class gets its own pair of wave-vectors inside the domain; the assignment differs per domain
        chosen = rng.choice(len(pairs), size=spec.num_classes, replace=False)
        for k in range(spec.num_classes):
            # class variation is zero-mean across channels, so overall brightness and
            # texture strength stay domain properties
            color = rng.uniform(0.4, 1.0, 3)
            color = np.clip(color - color.mean() + 0.7, 0.4, 1.0)
            tint = rng.normal(0.0, 1.0, 3) * spec.tint_strength
            tint = tint - tint.mean()
            # headroom for the texture peak (two unit sinusoids over sqrt 2) so it never saturates
            lo = np.maximum(0.3, tex_amp * spec.texture_gain * color * np.sqrt(2.0) + 0.01)
            out[(d, k)] = StyleRecipe(
                offset=tuple(float(v) for v in np.clip(np.add(offset, tint), lo, 1.0 - lo)),
                gain=tuple(float(g) for g in gain),
                field_amp=float(field_amp),
                texture_amp=float(tex_amp * spec.texture_gain),
                texture_freqs=tuple((fy / size, fx / size) for fy, fx in pairs[int(chosen[k])]),
                texture_color=tuple(float(c) for c in color),
            )
    return out


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    f = np.zeros((3, size, size))
    for c in range(3):
        for _ in range(2):
            fy, fx = rng.uniform(0.3, 1.2, 2)
            ph = rng.uniform(0, 2 * np.pi)
            f[c] += np.cos(2 * np.pi * (fy * yy + fx * xx) + ph)
    return f / 2.0


def render(mask: np.ndarray, recipe: StyleRecipe, spec: StyleShiftSpec, rng: np.random.Generator) -> np.ndarray:
    """Render a binary mask with a style recipe into a (3, H, W) float32 image in [0, 1]."""
    size = mask.shape[0]
    signal = spec.contrast * (mask.astype(np.float64) - 0.5)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phases = rng.uniform(0, 2 * np.pi, len(recipe.texture_freqs))
    # unit-variance-per-component sum scaled to the variance of a single sinusoid
    tex = sum(np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
              for (fy, fx), ph in zip(recipe.texture_freqs, phases)) / np.sqrt(len(recipe.texture_freqs))
    field = _smooth_field(rng, size)
    img = (np.asarray(recipe.offset)[:, None, None]
           + np.asarray(recipe.gain)[:, None, None] * signal[None]
           + recipe.field_amp * field
           + recipe.texture_amp * np.asarray(recipe.texture_color)[:, None, None] * tex[None]
           + spec.pixel_noise * rng.standard_normal((3, size, size)))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _shifted(mask: np.ndarray, rng: np.random.Generator, max_shift: int) -> np.ndarray:
    if max_shift <= 0:
        return mask
    dy, dx = rng.integers(-max_shift, max_shift + 1, 2)
    return np.roll(mask, (int(dy), int(dx)), axis=(0, 1))


# datasets ----------------------------------------------------------------------------

@dataclass
class LabeledSet:
    """Images with content labels; ``domains`` and ``styles`` record how each was rendered."""

    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    styles: np.ndarray
    masks: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx)
        return LabeledSet(self.images[idx], self.labels[idx], self.domains[idx], self.styles[idx],
                          None if self.masks is None else self.masks[idx], dict(self.meta))

    def select_domains(self, domains: Sequence[int]) -> "LabeledSet":
        return self.subset(np.flatnonzero(np.isin(self.domains, list(domains))))

    @staticmethod
    def concat(parts: Sequence["LabeledSet"]) -> "LabeledSet":
        parts = list(parts)
        masks = None if any(p.masks is None for p in parts) else np.concatenate([p.masks for p in parts])
        return LabeledSet(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
                          np.concatenate([p.domains for p in parts]), np.concatenate([p.styles for p in parts]),
                          masks, dict(parts[0].meta) if parts else {})


def _sample_rng(spec: StyleShiftSpec, *key: int) -> np.random.Generator:
    # one substream per sample: parallel and serial generation agree bit for bit
    return np.random.default_rng(np.random.SeedSequence([spec.seed, *key]))


def _split_of(index: int, n: int, fractions) -> int:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if index < n_train:
        return 0
    return 1 if index < n_train + n_val else 2


def generate_dataset(spec: StyleShiftSpec, domains: Optional[Sequence[int]] = None,
                     with_masks: bool = False) -> dict[str, LabeledSet]:
    """Render every requested domain and return {"train", "val", "test"} splits.

    Samples are assigned to splits by their index inside each (domain, class)
    group, so splits are disjoint and class-balanced.
    """
    if domains is None:
        domains = range(spec.num_domains)
    domains = [int(d) for d in domains]
    if not domains:
        raise ValueError("empty domain set")
    for d in domains:
        if not 0 <= d < spec.num_domains:
            raise ValueError(f"unknown domain {d}; spec has {spec.num_domains}")
    patterns = spec.patterns()
    recipes = spec.recipes()
    n = spec.samples_per_class_per_domain
    buckets = {s: ([], [], [], [], []) for s in range(3)}
    for d in domains:
        for k in range(spec.num_classes):
            for i in range(n):
                rng = _sample_rng(spec, d, k, i)
                style = k
                if spec.num_classes > 1 and rng.uniform() >= spec.style_class_corr:
                    style = int((k + rng.integers(1, spec.num_classes)) % spec.num_classes)
                mask = _shifted(patterns[k], rng, spec.shift_px)
                img = render(mask, recipes[(d, style)], spec, rng)
                b = buckets[_split_of(i, n, spec.split_fractions)]
                b[0].append(img)
                b[1].append(k)
                b[2].append(d)
                b[3].append(style)
                b[4].append(mask)
    out = {}
    for s, name in enumerate(SPLITS):
        imgs, labels, doms, styles, masks = buckets[s]
        size = spec.image_size
        out[name] = LabeledSet(
            np.stack(imgs) if imgs else np.zeros((0, 3, size, size), np.float32),
            np.asarray(labels, dtype=np.int64), np.asarray(doms, dtype=np.int64),
            np.asarray(styles, dtype=np.int64),
            (np.stack(masks) if masks else np.zeros((0, size, size), bool)) if with_masks else None,
            {"spec": spec.to_dict(), "split": name},
        )
    return out


def holdout_domain(spec: StyleShiftSpec, target: int, single_source: Optional[int] = None,
                   splits: Sequence[str] = ("train",)) -> tuple[LabeledSet, LabeledSet]:
    """(source, target) for domain generalization.

    Source merges every other domain (or only ``single_source``) over the
    requested splits; the target domain is returned whole for evaluation.
    """
    if not 0 <= target < spec.num_domains:
        raise ValueError(f"unknown target domain {target}")
    if single_source is not None:
        if single_source == target or not 0 <= single_source < spec.num_domains:
            raise ValueError("single_source must be a different, existing domain")
        sources = [single_source]
    else:
        sources = [d for d in range(spec.num_domains) if d != target]
    if not sources:
        raise ValueError("no source domains left")
    src = generate_dataset(spec, sources)
    tgt = generate_dataset(spec, [target])
    source = LabeledSet.concat([src[s] for s in splits])
    target_set = LabeledSet.concat([tgt[s] for s in SPLITS])
    return source, target_set


@dataclass
class StimulusSet:
    images: np.ndarray
    content_labels: np.ndarray
    style_labels: np.ndarray
    domains: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.content_labels)

    def subset(self, idx) -> "StimulusSet":
        idx = np.asarray(idx)
        return StimulusSet(self.images[idx], self.content_labels[idx], self.style_labels[idx],
                           self.domains[idx], self.masks[idx])


def generate_cue_conflict(spec: StyleShiftSpec, n_per_pair: int = 1,
                          domains: Optional[Sequence[int]] = None) -> StimulusSet:
    """Stimuli pairing the geometry of class i with the typical style of class j != i.

    The style donor's recipe is taken from one of ``domains`` (all by default),
    cycling through them. Returns K*(K-1)*n_per_pair stimuli.
    """
    if n_per_pair < 1:
        raise ValueError("n_per_pair must be >= 1")
    domains = list(range(spec.num_domains)) if domains is None else [int(d) for d in domains]
    patterns, recipes = spec.patterns(), spec.recipes()
    imgs, cl, sl, dl, ml = [], [], [], [], []
    count = 0
    for i in range(spec.num_classes):
        for j in range(spec.num_classes):
            if i == j:
                continue
            for r in range(n_per_pair):
                rng = _sample_rng(spec, 0xC0, i, j, r)
                d = domains[count % len(domains)]
                count += 1
                mask = _shifted(patterns[i], rng, spec.shift_px)
                imgs.append(render(mask, recipes[(d, j)], spec, rng))
                cl.append(i)
                sl.append(j)
                dl.append(d)
                ml.append(mask)
    return StimulusSet(np.stack(imgs), np.asarray(cl, np.int64), np.asarray(sl, np.int64),
                       np.asarray(dl, np.int64), np.stack(ml))


def lowpass(x: np.ndarray, cutoff: float = LOWPASS_CUTOFF) -> np.ndarray:
    """Ideal low-pass over the last two axes (cycles per pixel), periodic borders."""
    fy = np.fft.fftfreq(x.shape[-2])[:, None]
    fx = np.fft.fftfreq(x.shape[-1])[None, :]
    keep = np.hypot(fy, fx) < cutoff
    return np.real(np.fft.ifft2(np.fft.fft2(x, axes=(-2, -1)) * keep, axes=(-2, -1)))


def binarize(images: np.ndarray, iters: int = 10) -> np.ndarray:
    """Recover geometry: low-pass away the texture, then split brightness into two clusters.

    The texture band sits above the low-pass cutoff, and the patterns'
    fundamentals sit below it. The threshold starts at the median and is moved to the midpoint of the
    two class means a few times (iterative intermeans).
    """
    lum = lowpass(np.asarray(images, dtype=np.float64).mean(axis=1))
    flat = lum.reshape(len(lum), -1)
    thr = np.median(flat, axis=1, keepdims=True)
    for _ in range(iters):
        hi = flat > thr
        n_hi = hi.sum(axis=1, keepdims=True)
        n_lo = flat.shape[1] - n_hi
        if np.any(n_hi == 0) or np.any(n_lo == 0):
            break
        mean_hi = np.where(hi, flat, 0.0).sum(axis=1, keepdims=True) / n_hi
        mean_lo = np.where(hi, 0.0, flat).sum(axis=1, keepdims=True) / n_lo
        thr = (mean_hi + mean_lo) / 2.0
    return (flat > thr).reshape(lum.shape)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.astype(bool), b.astype(bool)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


# container -------------------------------------------------------------------------------

IMAGE_MAGIC = b"SSIMG\x00\x01\x00"


def save_dataset(ds: LabeledSet, path) -> tuple[Path, Path]:
    """Binary image container plus a JSON sidecar with labels.

    ``<path>``: 8-byte magic, four little-endian uint32 (N, C, H, W), then
    N*C*H*W little-endian float32 in row-major order.
    ``<path>.labels.json``: labels, domains, styles and the generating spec.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<4I", n, c, h, w))
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    side = path.with_name(path.name + ".labels.json")
    side.write_text(json.dumps({"labels": ds.labels.tolist(), "domains": ds.domains.tolist(),
                                "styles": ds.styles.tolist(), "meta": ds.meta}, sort_keys=True))
    return path, side


def load_dataset(path) -> LabeledSet:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != IMAGE_MAGIC:
        raise ValueError(f"{path} is not an image container")
    n, c, h, w = struct.unpack("<4I", raw[8:24])
    images = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=24).reshape(n, c, h, w)
    side = json.loads(path.with_name(path.name + ".labels.json").read_text())
    return LabeledSet(images.astype(np.float32), np.asarray(side["labels"], np.int64),
                      np.asarray(side["domains"], np.int64), np.asarray(side["styles"], np.int64),
                      None, side.get("meta", {}))


def with_overrides(spec: StyleShiftSpec, **kw) -> StyleShiftSpec:
    return replace(spec, **{k: v for k, v in kw.items() if v is not None})
