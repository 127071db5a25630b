"""Image-quality and OCR-accuracy metrics plus evaluation-report assembly.

PSNR and SSIM measure reconstruction fidelity; the LCS and Levenshtein
scores measure recognition accuracy of OCR text read from super-resolved
images against ground-truth labels. All four aggregate as arithmetic means
over the evaluated items.
"""

from __future__ import annotations

import json
import math
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from torch import Tensor

from .cascade import Cascade, super_resolve
from .data import downsample_by, save_image

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _to_f64(img: Tensor) -> np.ndarray:
    return img.detach().cpu().numpy().astype(np.float64)


def psnr(a: Tensor, b: Tensor, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical images."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(np.mean((_to_f64(a) - _to_f64(b)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_value**2 / mse))


def _gaussian_kernel1d(sigma: float = SSIM_SIGMA, radius: int = SSIM_WINDOW // 2) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _gaussian_filter2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Separable correlation with edge-repeating symmetric padding.
    r = len(kernel) // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        for i, w in enumerate(kernel):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(i, i + out.shape[axis])
            acc += w * padded[tuple(sl)]
        out = acc
    return out


def ssim(a: Tensor, b: Tensor, max_value: float = 1.0) -> float:
    """Mean local structural similarity, 11x11 Gaussian window, sigma 1.5.

    Local statistics use population (not sample) normalization; a border of
    half the window is cropped before averaging. Multichannel images score
    the per-channel mean.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 3:
        raise ValueError(f"expected (C,H,W) images, got shape {tuple(a.shape)}")
    _, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x = _to_f64(a)
    y = _to_f64(b)
    kernel = _gaussian_kernel1d()
    c1 = (SSIM_K1 * max_value) ** 2
    c2 = (SSIM_K2 * max_value) ** 2
    pad = SSIM_WINDOW // 2
    scores = []
    for ch in range(x.shape[0]):
        ux = _gaussian_filter2d(x[ch], kernel)
        uy = _gaussian_filter2d(y[ch], kernel)
        uxx = _gaussian_filter2d(x[ch] * x[ch], kernel)
        uyy = _gaussian_filter2d(y[ch] * y[ch], kernel)
        uxy = _gaussian_filter2d(x[ch] * y[ch], kernel)
        vx = uxx - ux * ux
        vy = uyy - uy * uy
        vxy = uxy - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
        scores.append(s[pad:-pad, pad:-pad].mean())
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# OCR text metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TextPair:
    """Predicted and target transcription of one image."""

    predicted: str
    target: str


def lcs_length(s: str, t: str) -> int:
    """Longest-common-subsequence length by dynamic programming."""
    if not s or not t:
        return 0
    prev = [0] * (len(t) + 1)
    for i in range(1, len(s) + 1):
        cur = [0] * (len(t) + 1)
        si = s[i - 1]
        for j in range(1, len(t) + 1):
            if si == t[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(t)]


def levenshtein_distance(s: str, t: str) -> int:
    """Edit distance with unit-cost insert/delete/substitute."""
    if not s:
        return len(t)
    if not t:
        return len(s)
    prev = list(range(len(t) + 1))
    for i in range(1, len(s) + 1):
        cur = [i] + [0] * len(t)
        si = s[i - 1]
        for j in range(1, len(t) + 1):
            cost = 0 if si == t[j - 1] else 1
            cur[j] = min(prev[j - 1] + cost, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[len(t)]


def lcs_score(pair: TextPair) -> float:
    """LCS length over the longer string's length; 1.0 iff the strings match.

    Two empty strings count as a perfect match.
    """
    s, t = pair.predicted, pair.target
    maxlen = max(len(s), len(t))
    if maxlen == 0:
        return 1.0
    return lcs_length(s, t) / maxlen


def levenshtein_score(pair: TextPair) -> float:
    """One minus the normalized edit distance; 1.0 iff the strings match."""
    s, t = pair.predicted, pair.target
    maxlen = max(len(s), len(t))
    if maxlen == 0:
        return 1.0
    return 1.0 - levenshtein_distance(s, t) / maxlen


def normalize_ocr_text(text: str) -> str:
    """Collapse whitespace runs and trim; a no-result reading maps to ''."""
    return " ".join(text.split())


# ---------------------------------------------------------------------------
# OCR engines
# ---------------------------------------------------------------------------


class OcrEngine:
    """Interface: read an image tensor, return the recognized text ('' if none)."""

    def recognize(self, img: Tensor) -> str:
        raise NotImplementedError


class TesseractOcr(OcrEngine):
    """Reference adapter shelling out to a locally installed tesseract binary."""

    def __init__(self, binary: str = "tesseract", lang: str = "eng"):
        resolved = shutil.which(binary)
        if resolved is None:
            raise RuntimeError(
                f"OCR engine unavailable: {binary!r} not found on PATH; install "
                f"tesseract-ocr or pass a different OcrEngine"
            )
        self.binary = resolved
        self.lang = lang

    def recognize(self, img: Tensor) -> str:
        with tempfile.TemporaryDirectory() as tmp:
            png = Path(tmp) / "in.png"
            save_image(img, png)
            proc = subprocess.run(
                [self.binary, str(png), "stdout", "-l", self.lang],
                capture_output=True,
                text=True,
            )
            if proc.returncode != 0:
                raise RuntimeError(f"tesseract failed: {proc.stderr.strip()}")
            return proc.stdout


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalItem:
    """One test image: an identifier, the HR reference, optional text label."""

    item_id: str
    hr: Tensor
    label: Optional[str] = None


@dataclass
class MetricReport:
    """Per-item and aggregate metrics for one method on one dataset."""

    method: str
    dataset_id: str
    item_ids: List[str] = field(default_factory=list)
    psnr_values: List[float] = field(default_factory=list)
    ssim_values: List[float] = field(default_factory=list)
    lcs_values: Optional[List[float]] = None
    levenshtein_values: Optional[List[float]] = None

    @property
    def count(self) -> int:
        return len(self.item_ids)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    @property
    def mean_lcs(self) -> Optional[float]:
        return None if self.lcs_values is None else float(np.mean(self.lcs_values))

    @property
    def mean_levenshtein(self) -> Optional[float]:
        return None if self.levenshtein_values is None else float(np.mean(self.levenshtein_values))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dataset_id": self.dataset_id,
            "count": self.count,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "mean_s_lcs": self.mean_lcs,
            "mean_s_ld": self.mean_levenshtein,
        }

    def save_items(self, path) -> None:
        """Write one JSON record per evaluated item."""
        with open(path, "w", encoding="utf-8") as fh:
            for i, item_id in enumerate(self.item_ids):
                rec = {
                    "item": item_id,
                    "method": self.method,
                    "psnr": self.psnr_values[i],
                    "ssim": self.ssim_values[i],
                }
                if self.lcs_values is not None:
                    rec["s_lcs"] = self.lcs_values[i]
                    rec["s_ld"] = self.levenshtein_values[i]
                fh.write(json.dumps(rec) + "\n")


def summary_table(reports: Sequence[MetricReport]) -> str:
    """Fixed-width table with columns Method / PSNR / SSIM / S_LCS / S_LD."""
    rows = [("Method", "PSNR", "SSIM", "S_LCS", "S_LD")]
    for r in reports:
        rows.append((
            r.method,
            f"{r.mean_psnr:.2f}",
            f"{r.mean_ssim:.4f}",
            "-" if r.mean_lcs is None else f"{r.mean_lcs:.4f}",
            "-" if r.mean_levenshtein is None else f"{r.mean_levenshtein:.4f}",
        ))
    widths = [max(len(row[c]) for row in rows) for c in range(5)]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * widths[c] for c in range(5)))
    return "\n".join(lines)


def modcrop(img: Tensor, divisor: int) -> Tensor:
    """Crop H and W down to multiples of ``divisor`` (top-left anchored)."""
    _, h, w = img.shape
    return img[:, : h - h % divisor, : w - w % divisor]


def evaluate_method(
    method: Callable[[Tensor], Tensor],
    magnification: int,
    items: Sequence[EvalItem],
    method_label: str,
    dataset_id: str = "",
    ocr: Optional[OcrEngine] = None,
) -> MetricReport:
    """Full-reference evaluation of one LR -> SR method.

    Each HR image is cropped to a multiple of the magnification, degraded by
    repeated 2x bicubic downsampling, restored by ``method``, and compared
    against the cropped HR. With an OCR engine, the SR image is also read and
    scored against the item's text label.
    """
    if not items:
        raise ValueError("no items to evaluate")
    report = MetricReport(method=method_label, dataset_id=dataset_id)
    if ocr is not None:
        report.lcs_values = []
        report.levenshtein_values = []
    for item in items:
        hr = modcrop(item.hr, magnification)
        lr = downsample_by(hr, magnification)
        sr = method(lr)
        if sr.shape != hr.shape:
            raise ValueError(
                f"method {method_label!r} returned shape {tuple(sr.shape)} "
                f"for HR shape {tuple(hr.shape)}"
            )
        sr = sr.clamp(0.0, 1.0)
        report.item_ids.append(item.item_id)
        report.psnr_values.append(psnr(sr, hr))
        report.ssim_values.append(ssim(sr, hr))
        if ocr is not None:
            if item.label is None:
                raise ValueError(f"OCR evaluation requested but item {item.item_id} has no label")
            pair = TextPair(
                predicted=normalize_ocr_text(ocr.recognize(sr)),
                target=normalize_ocr_text(item.label),
            )
            report.lcs_values.append(lcs_score(pair))
            report.levenshtein_values.append(levenshtein_score(pair))
    return report


def evaluate_sr(
    cascade: Cascade,
    items: Sequence[EvalItem],
    stages: Optional[int] = None,
    ocr: Optional[OcrEngine] = None,
    method_label: Optional[str] = None,
    dataset_id: str = "",
) -> MetricReport:
    """Evaluate a cascade at 2**stages magnification (default: full depth)."""
    n = len(cascade.stages) if stages is None else stages
    label = method_label or f"Cascaded DPNet ({2**n}x)"
    return evaluate_method(
        lambda lr: super_resolve(cascade, lr, n),
        2**n,
        items,
        method_label=label,
        dataset_id=dataset_id,
        ocr=ocr,
    )
