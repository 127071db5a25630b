"""Dataset construction: bicubic pyramids, patch sampling, synthetic pages.

Low-resolution training inputs are generated purely by repeated 2x bicubic
downsampling of high-resolution patches (no blur or noise augmentation).
Internal image math is real-valued in [0, 1]; 8-bit PNG quantization happens
only at import/export boundaries.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont
from torch import Tensor

from .model import ImageTensor, validate_image

BICUBIC_A = -0.5  # Keys kernel parameter

_FONT_PATH = Path(__file__).parent / "assets" / "fonts" / "DejaVuSans.ttf"


# ---------------------------------------------------------------------------
# Image file I/O
# ---------------------------------------------------------------------------


def load_image(path) -> ImageTensor:
    """Read a PNG (or any PIL-readable file) into a (C,H,W) [0,1] tensor."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("L" if im.mode in ("1", "I", "I;16", "F", "LA") else "RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(arr.copy())


def quantize_to_uint8(img: ImageTensor) -> np.ndarray:
    """Map [0,1] floats to 0..255 with round-half-up."""
    arr = img.detach().cpu().numpy()
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(img: ImageTensor, path) -> None:
    """Quantize a (C,H,W) tensor to 8-bit and write it as PNG."""
    validate_image(img, "image to save")
    arr = quantize_to_uint8(img)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    elif arr.shape[0] == 3:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        raise ValueError(f"cannot export {arr.shape[0]}-channel image as PNG")


# ---------------------------------------------------------------------------
# Bicubic resampling (Keys kernel, a = -0.5, reflected borders)
# ---------------------------------------------------------------------------


def keys_kernel(x: float, a: float = BICUBIC_A) -> float:
    """The piecewise-cubic convolution kernel with parameter ``a``."""
    ax = abs(x)
    if ax <= 1.0:
        return (a + 2.0) * ax**3 - (a + 3.0) * ax**2 + 1.0
    if ax < 2.0:
        return a * ax**3 - 5.0 * a * ax**2 + 8.0 * a * ax - 4.0 * a
    return 0.0


def reflect_index(idx: Tensor, n: int) -> Tensor:
    """Fold out-of-range indices back into [0, n) by mirror reflection
    (no edge repetition: -1 -> 1, n -> n-2)."""
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * n - 2
    m = idx % period
    return torch.where(m < n, m, period - m)


def _resample_axis(x: Tensor, taps: Tensor, weights: Tensor) -> Tensor:
    # x: (..., W_in); taps: (W_out, T) raw indices; weights: (T,)
    n = x.shape[-1]
    idx = reflect_index(taps, n)
    gathered = x[..., idx]                       # (..., W_out, T)
    w = weights.to(x.dtype)
    return (gathered * w).sum(dim=-1)


def _downsample_taps(n_out: int) -> Tuple[Tensor, Tensor]:
    # Output pixel o maps to input coordinate 2o + 1; the antialiasing kernel
    # is stretched by the factor, giving 8 taps at fixed fractional offsets.
    offsets = torch.arange(-3, 5, dtype=torch.float64)          # i - 2o
    rel = (offsets - 0.5) / 2.0                                 # (i + 0.5 - c) / 2
    w = torch.tensor([keys_kernel(float(r)) for r in rel], dtype=torch.float64) / 2.0
    w = w / w.sum()
    base = 2 * torch.arange(n_out, dtype=torch.long).unsqueeze(1)
    taps = base + offsets.to(torch.long)
    return taps, w


def bicubic_downsample(img: ImageTensor, factor: int = 2) -> ImageTensor:
    """Antialiased bicubic 2x downsampling; output is (C, H/2, W/2) in [0,1]."""
    if factor != 2:
        raise ValueError(f"only factor 2 is supported, got {factor}")
    if img.dim() != 3:
        raise ValueError(f"expected (C,H,W) input, got shape {tuple(img.shape)}")
    _, h, w = img.shape
    if h % 2 != 0 or w % 2 != 0:
        raise ValueError(f"dimensions must be even to downsample, got {h}x{w}")
    taps_w, kw = _downsample_taps(w // 2)
    out = _resample_axis(img, taps_w, kw)
    taps_h, kh = _downsample_taps(h // 2)
    out = _resample_axis(out.transpose(-1, -2), taps_h, kh).transpose(-1, -2)
    return out.clamp(0.0, 1.0)


def _upsample_taps(n_out: int) -> Tuple[Tensor, Tensor]:
    # Output pixel o = 2j + r maps to input coordinate j + 0.25 + r/2; the
    # interpolating kernel is not stretched, giving 4 taps per phase.
    taps_rows = []
    weights_rows = []
    for o in range(n_out):
        j, r = divmod(o, 2)
        c = j + 0.25 + 0.5 * r
        base = math.floor(c - 0.5) - 1
        idx = [base + t for t in range(4)]
        w = [keys_kernel(i + 0.5 - c) for i in idx]
        taps_rows.append(idx)
        weights_rows.append(w)
    taps = torch.tensor(taps_rows, dtype=torch.long)
    weights = torch.tensor(weights_rows, dtype=torch.float64)
    weights = weights / weights.sum(dim=1, keepdim=True)
    return taps, weights


def _resample_axis_up(x: Tensor, taps: Tensor, weights: Tensor) -> Tensor:
    n = x.shape[-1]
    idx = reflect_index(taps, n)
    gathered = x[..., idx]                       # (..., W_out, 4)
    return (gathered * weights.to(x.dtype)).sum(dim=-1)


def bicubic_upsample(img: ImageTensor, factor: int = 2) -> ImageTensor:
    """Bicubic 2x interpolation; the classical magnification baseline."""
    if factor != 2:
        raise ValueError(f"only factor 2 is supported, got {factor}")
    if img.dim() != 3:
        raise ValueError(f"expected (C,H,W) input, got shape {tuple(img.shape)}")
    _, h, w = img.shape
    taps_w, kw = _upsample_taps(2 * w)
    out = _resample_axis_up(img, taps_w, kw)
    taps_h, kh = _upsample_taps(2 * h)
    out = _resample_axis_up(out.transpose(-1, -2), taps_h, kh).transpose(-1, -2)
    return out.clamp(0.0, 1.0)


def downsample_by(img: ImageTensor, magnification: int) -> ImageTensor:
    """Repeated 2x downsampling; ``magnification`` must be a power of two."""
    steps = int(round(math.log2(magnification)))
    if 2 ** steps != magnification:
        raise ValueError(f"magnification must be a power of 2, got {magnification}")
    out = img
    for _ in range(steps):
        out = bicubic_downsample(out)
    return out


def upsample_by(img: ImageTensor, magnification: int) -> ImageTensor:
    """Repeated 2x bicubic interpolation (the Bicubic baseline at 2**k)."""
    steps = int(round(math.log2(magnification)))
    if 2 ** steps != magnification:
        raise ValueError(f"magnification must be a power of 2, got {magnification}")
    out = img
    for _ in range(steps):
        out = bicubic_upsample(out)
    return out


# ---------------------------------------------------------------------------
# Pyramids and patches
# ---------------------------------------------------------------------------


@dataclass
class PatchPair:
    """One HR patch plus its chain of 2x-downsampled versions.

    ``pyramid[k-1]`` holds the 2**k-downsampled image; ``level(0)`` is the HR
    patch itself.
    """

    hr: ImageTensor
    pyramid: List[ImageTensor]
    source_id: str = ""
    crop_offset: Tuple[int, int] = (0, 0)

    @property
    def depth(self) -> int:
        return len(self.pyramid)

    def level(self, k: int) -> ImageTensor:
        if not 0 <= k <= self.depth:
            raise ValueError(f"pyramid level {k} out of range [0, {self.depth}]")
        return self.hr if k == 0 else self.pyramid[k - 1]


def make_pyramid(hr: ImageTensor, levels: int, source_id: str = "",
                 crop_offset: Tuple[int, int] = (0, 0),
                 degrade: Optional[Callable[[ImageTensor], ImageTensor]] = None) -> PatchPair:
    """Build ``levels`` successive 2x downsamples of an HR patch.

    The low-resolution levels come purely from downsampling; ``degrade`` is
    an optional hook (blur, noise) applied to each level after downsampling,
    off by default.
    """
    if levels < 0:
        raise ValueError(f"levels must be >= 0, got {levels}")
    _, h, w = hr.shape
    div = 2 ** levels
    if h % div != 0 or w % div != 0:
        raise ValueError(f"HR dims {h}x{w} not divisible by 2**{levels}")
    pyramid = []
    current = hr
    for _ in range(levels):
        current = bicubic_downsample(current)
        if degrade is not None:
            current = degrade(current).clamp(0.0, 1.0)
        pyramid.append(current)
    return PatchPair(hr=hr, pyramid=pyramid, source_id=source_id, crop_offset=crop_offset)


def extract_patches(page: ImageTensor, size: int, count: int, seed: int) -> List[ImageTensor]:
    """Crop ``count`` size x size patches at seed-determined uniform offsets."""
    _, h, w = page.shape
    if h < size or w < size:
        raise ValueError(f"page {h}x{w} is smaller than patch size {size}")
    rng = random.Random(seed)
    patches = []
    for _ in range(count):
        top = rng.randint(0, h - size)
        left = rng.randint(0, w - size)
        patches.append(page[:, top:top + size, left:left + size].clone())
    return patches


# ---------------------------------------------------------------------------
# Synthetic document patches
# ---------------------------------------------------------------------------

_WORDS = (
    "the quick brown fox jumps over lazy dog and then runs far away into "
    "open fields while morning light falls on printed pages of dense text "
    "every document carries lines words letters glyphs that scanners blur "
    "reports invoices letters memos forms tables figures captions headers "
    "numbers dates totals sums names places streets cities codes items "
    "paper ink press type serif column margin folio section clause draft"
).split()


def render_synthetic_patch(text: str, font_size: int, canvas: int,
                           seed: int) -> Tuple[ImageTensor, str]:
    """Render text lines on a light background with seeded jitter.

    Returns the grayscale (1, canvas, canvas) tensor and the ground-truth
    text for OCR-metric tests. Raises if the text is empty or does not fit.
    """
    if not text.strip():
        raise ValueError("text must be nonempty")
    if canvas % 4 != 0:
        raise ValueError(f"canvas size must be divisible by 4, got {canvas}")
    rng = random.Random(seed)
    bg = 255 - rng.randint(0, 16)
    ink = rng.randint(0, 50)
    font = ImageFont.truetype(str(_FONT_PATH), font_size)
    im = Image.new("L", (canvas, canvas), color=bg)
    draw = ImageDraw.Draw(im)
    bbox = draw.multiline_textbbox((0, 0), text, font=font, spacing=2)
    text_w = bbox[2] - bbox[0]
    text_h = bbox[3] - bbox[1]
    margin = 2
    if text_w > canvas - 2 * margin or text_h > canvas - 2 * margin:
        raise ValueError(
            f"text ({text_w}x{text_h}px at size {font_size}) does not fit canvas {canvas}"
        )
    x = margin + rng.randint(0, canvas - 2 * margin - text_w) - bbox[0]
    y = margin + rng.randint(0, canvas - 2 * margin - text_h) - bbox[1]
    draw.multiline_text((x, y), text, fill=ink, font=font, spacing=2)
    arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.copy()).unsqueeze(0), text


def _compose_text(rng: random.Random, font_size: int, canvas: int) -> str:
    # Conservative glyph metrics for the bundled font: ~0.7*size average
    # advance, ~1.35*size line pitch including spacing.
    max_chars = max(2, int((canvas - 8) / (0.7 * font_size)))
    max_lines = max(1, min(6, int((canvas - 8) / (1.35 * font_size))))
    n_lines = rng.randint(min(3, max_lines), max_lines)
    lines = []
    for _ in range(n_lines):
        words: List[str] = []
        while True:
            candidate = rng.choice(_WORDS)
            tentative = (" ".join(words + [candidate])).strip()
            if len(tentative) > max_chars:
                break
            words.append(candidate)
            if len(words) >= 4:
                break
        if not words:
            words = [rng.choice(_WORDS)[: max_chars]]
        lines.append(" ".join(words))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

ROLES = ("train", "val", "test")


@dataclass
class ManifestEntry:
    path: str
    role: str
    label: Optional[str] = None
    sha256: Optional[str] = None


@dataclass
class DatasetManifest:
    """Line-delimited index of a dataset: header record plus one per image."""

    entries: List[ManifestEntry]
    pyramid_depth: int
    patch_size: int
    seed: int
    root: str = "."

    def dataset_id(self) -> str:
        """Location-independent identifier, stable across working directories."""
        return f"docsr-seed{self.seed}-{self.patch_size}px-{len(self.entries)}items"

    def role_entries(self, role: str) -> List[ManifestEntry]:
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        return [e for e in self.entries if e.role == role]

    def resolve(self, entry: ManifestEntry) -> Path:
        return Path(self.root) / entry.path

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            header = {
                "kind": "docsr-manifest",
                "pyramid_depth": self.pyramid_depth,
                "patch_size": self.patch_size,
                "seed": self.seed,
            }
            fh.write(json.dumps(header) + "\n")
            for e in self.entries:
                rec = {"path": e.path, "role": e.role}
                if e.label is not None:
                    rec["label"] = e.label
                if e.sha256 is not None:
                    rec["sha256"] = e.sha256
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or lines[0].get("kind") != "docsr-manifest":
            raise ValueError(f"{path} is not a dataset manifest")
        header = lines[0]
        entries = [
            ManifestEntry(
                path=rec["path"],
                role=rec["role"],
                label=rec.get("label"),
                sha256=rec.get("sha256"),
            )
            for rec in lines[1:]
        ]
        manifest = cls(
            entries=entries,
            pyramid_depth=header["pyramid_depth"],
            patch_size=header["patch_size"],
            seed=header["seed"],
            root=str(path.parent),
        )
        missing = [e.path for e in entries if not manifest.resolve(e).exists()]
        if missing:
            raise FileNotFoundError(
                f"manifest {path} references {len(missing)} missing files, "
                f"first: {missing[0]}"
            )
        return manifest


def split_roles(count: int, fractions: Sequence[float], seed: int) -> List[str]:
    """Deterministically assign train/val/test roles to ``count`` items."""
    if len(fractions) != 3:
        raise ValueError("fractions must be (train, val, test)")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {tuple(fractions)}")
    if any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be >= 0, got {tuple(fractions)}")
    if count < 10:
        raise ValueError(f"need at least 10 items to split, got {count}")
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    n_train = min(n_train, count)
    n_val = min(n_val, count - n_train)
    order = list(range(count))
    random.Random(seed).shuffle(order)
    roles = [""] * count
    for pos, idx in enumerate(order):
        roles[idx] = "train" if pos < n_train else ("val" if pos < n_train + n_val else "test")
    return roles


def build_manifest(
    items: Sequence[Tuple[str, Optional[str], Optional[str]]],
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    pyramid_depth: int = 2,
    patch_size: int = 0,
    root: str = ".",
) -> DatasetManifest:
    """Assemble a manifest from (path, label, sha256) triples with a
    deterministic 80/10/10 split by default."""
    roles = split_roles(len(items), fractions, seed)
    entries = [
        ManifestEntry(path=p, role=r, label=lbl, sha256=digest)
        for (p, lbl, digest), r in zip(items, roles)
    ]
    return DatasetManifest(
        entries=entries,
        pyramid_depth=pyramid_depth,
        patch_size=patch_size,
        seed=seed,
        root=root,
    )


def manifest_from_directory(
    directory,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    pyramid_depth: int = 2,
) -> DatasetManifest:
    """Index every PNG under a directory; a sibling ``<stem>.txt`` file, when
    present, supplies the text label."""
    directory = Path(directory)
    pngs = sorted(directory.glob("*.png"))
    items = []
    for p in pngs:
        label_file = p.with_suffix(".txt")
        label = label_file.read_text(encoding="utf-8").strip() if label_file.exists() else None
        items.append((p.name, label, _sha256_file(p)))
    manifest = build_manifest(items, fractions, seed, pyramid_depth, root=str(directory))
    if manifest.entries:
        with Image.open(directory / manifest.entries[0].path) as im:
            manifest.patch_size = im.size[0]
    return manifest


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_synthetic_corpus(
    out_dir,
    count: int = 200,
    canvas: int = 128,
    seed: int = 0,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    pyramid_depth: int = 2,
    font_sizes: Optional[Tuple[int, int]] = None,
) -> DatasetManifest:
    """Render a self-contained corpus of text patches plus its manifest.

    Everything (word choice, font size, jitter, split) derives from ``seed``,
    so regenerating with the same arguments is byte-identical. When
    ``font_sizes`` is omitted, the range adapts to the canvas size.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if font_sizes is None:
        # body-text scale relative to the patch: 16..22px glyphs on a 128px canvas
        font_sizes = (max(6, canvas // 8), max(7, (canvas * 11) // 64))
    items = []
    for i in range(count):
        rng = random.Random((seed * 1_000_003 + i) & 0x7FFFFFFF)
        font_size = rng.randint(*font_sizes)
        render_seed = rng.randint(0, 2**31 - 1)
        img = None
        while img is None:
            text = _compose_text(rng, font_size, canvas)
            try:
                img, _ = render_synthetic_patch(text, font_size, canvas, seed=render_seed)
            except ValueError:
                # measured metrics can exceed the conservative estimate;
                # shrink deterministically and recompose
                if font_size <= 6:
                    raise
                font_size -= 1
        name = f"patch_{i:05d}.png"
        save_image(img, out_dir / name)
        label = " ".join(text.split())
        items.append((name, label, _sha256_file(out_dir / name)))
    manifest = build_manifest(
        items, fractions, seed, pyramid_depth, patch_size=canvas, root=str(out_dir)
    )
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def load_patch_pairs(manifest: DatasetManifest, role: str,
                     levels: Optional[int] = None) -> List[PatchPair]:
    """Materialize pyramid pairs for one split of a manifest."""
    levels = manifest.pyramid_depth if levels is None else levels
    pairs = []
    for entry in manifest.role_entries(role):
        hr = load_image(manifest.resolve(entry))
        pairs.append(make_pyramid(hr, levels, source_id=entry.path))
    return pairs
