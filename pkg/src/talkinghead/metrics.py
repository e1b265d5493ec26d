"""Frame quality (PSNR, SSIM), AU recognition scores and difference maps.

Frames here are numpy (H, W, 3) arrays in [0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import correlate1d

from .data import AU_NAMES
from .networks import to_nchw

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_WIN = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_val: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(max_val**2 / mse)))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable Gaussian, keeping only fully covered windows
    r = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim(a, b, max_val: float = 1.0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian (sigma 1.5), mean over channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def f1_score(tp: int, fp: int, fn: int) -> float:
    predicted, actual = tp + fp, tp + fn
    if predicted == 0 and actual == 0:
        return 1.0
    if predicted == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def au_scores(pred, gt, threshold: float = 0.5) -> dict:
    """Per-AU F1/accuracy after thresholding the predicted probabilities."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if pred.size == 0 or len(pred) == 0:
        raise ValueError("au_scores needs at least one frame")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    hard = pred >= threshold
    f1, acc, counts = [], [], []
    for i in range(pred.shape[1]):
        p, y = hard[:, i], gt[:, i]
        tp = int(np.sum(p & y))
        fp = int(np.sum(p & ~y))
        fn = int(np.sum(~p & y))
        tn = int(np.sum(~p & ~y))
        f1.append(f1_score(tp, fp, fn))
        acc.append((tp + tn) / len(p))
        counts.append((tp, fp, fn, tn))
    counts = np.array(counts, dtype=np.int64)
    return {
        "tp": counts[:, 0],
        "fp": counts[:, 1],
        "fn": counts[:, 2],
        "tn": counts[:, 3],
        "f1": np.array(f1),
        "accuracy": np.array(acc),
        "avg_f1": float(np.mean(f1)),
        "avg_accuracy": float(np.mean(acc)),
    }


def difference_map(gen, gt) -> np.ndarray:
    """Channel-mean absolute difference; already in [0, 1] for [0, 1] inputs."""
    gen, gt = _check_pair(gen, gt)
    return np.clip(np.abs(gen - gt).mean(axis=-1), 0.0, 1.0)


def save_difference_map(diff: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.round(diff * 255).astype(np.uint8), mode="L").save(path)


@dataclass
class EvalReport:
    psnr_mean: float
    ssim_mean: float
    f1: np.ndarray
    accuracy: np.ndarray
    avg_f1: float
    avg_accuracy: float
    n_frames: int
    per_frame_psnr: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    per_frame_ssim: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @classmethod
    def from_frames(cls, psnrs, ssims, probs, labels, threshold: float = 0.5):
        scores = au_scores(probs, labels, threshold)
        psnrs = np.asarray(psnrs, dtype=np.float64)
        ssims = np.asarray(ssims, dtype=np.float64)
        return cls(
            psnr_mean=float(psnrs.mean()),
            ssim_mean=float(ssims.mean()),
            f1=scores["f1"],
            accuracy=scores["accuracy"],
            avg_f1=scores["avg_f1"],
            avg_accuracy=scores["avg_accuracy"],
            n_frames=len(psnrs),
            per_frame_psnr=psnrs,
            per_frame_ssim=ssims,
        )

    def as_row(self) -> dict:
        """Flat mapping in table column order: PSNR, SSIM, per-AU F1/Acc, averages."""
        row = {"PSNR": self.psnr_mean, "SSIM": self.ssim_mean}
        for i, name in enumerate(AU_NAMES):
            row[f"{name}_F1"] = float(self.f1[i])
            row[f"{name}_Acc"] = float(self.accuracy[i])
        row["Avg_F1"] = self.avg_f1
        row["Avg_Acc"] = self.avg_accuracy
        row["n_frames"] = self.n_frames
        return row

    def write(self, out_dir: str | Path, name: str = "eval", label: str = "model") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        row = self.as_row()
        txt = out_dir / f"{name}.txt"
        txt.write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in row.items()))
        table = out_dir / f"{name}.csv"
        with open(table, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["Method", *row])
            writer.writerow([label, *(_fmt(v) for v in row.values())])
        return txt, table


def _fmt(v):
    return str(v) if isinstance(v, int) else repr(float(v))


def read_report(path: str | Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def evaluate_frames(generated, frames, labels, au_classifier, threshold: float = 0.5) -> EvalReport:
    """Score generated frames against ground truth and labels.

    ``generated`` and ``frames`` are (T, H, W, 3) arrays; ``au_classifier``
    is any callable mapping a (B, 3, 56, 112) tensor to (B, 5) probabilities.
    """
    generated = np.asarray(generated)
    frames = np.asarray(frames)
    if len(generated) != len(frames) or len(frames) != len(labels):
        raise ValueError(
            f"length mismatch: {len(generated)} generated, {len(frames)} frames, {len(labels)} labels"
        )
    psnrs = [psnr(g, f) for g, f in zip(generated, frames)]
    ssims = [ssim(g, f) for g, f in zip(generated, frames)]
    probs = classify_lower_faces(generated, au_classifier)
    return EvalReport.from_frames(psnrs, ssims, probs, labels, threshold)


def classify_lower_faces(frames, au_classifier, batch: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for s in range(0, len(frames), batch):
            x = to_nchw(np.ascontiguousarray(frames[s : s + batch]))
            out.append(au_classifier(x[:, :, x.shape[-2] // 2 :, :]).numpy())
    return np.concatenate(out).astype(np.float64)


def evaluate_clip(generated, clip, au_classifier, threshold: float = 0.5) -> EvalReport:
    return evaluate_frames(generated, clip.frames, clip.labels, au_classifier, threshold)
