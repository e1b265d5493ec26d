"""Clip ingestion, MFCC features and the procedural synthetic dataset.

A clip directory looks like::

    clip_dir/
        frames/000000.png, 000001.png, ...
        audio.wav          # 16-bit PCM, mono
        aus.csv            # header AU10,AU14,AU20,AU25,AU26; one row per frame

Pixels are float32 in [0, 1] with shape (H, W, 3).  MFCC windows are
(12, 28) float32, one per video frame.
"""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.fft import dct
from scipy.interpolate import PchipInterpolator
from scipy.io import wavfile

log = logging.getLogger(__name__)

AU_NAMES = ("AU10", "AU14", "AU20", "AU25", "AU26")
N_AU = len(AU_NAMES)

FRAME_SIZE = 112
HALF = FRAME_SIZE // 2

SAMPLE_RATE = 16000
N_MFCC = 12
WIN_SECONDS = 0.025
HOP_SECONDS = 0.010
N_MELS = 26
N_FFT = 512
WINDOW_COLUMNS = 28  # 280 ms of 10 ms hops
DEFAULT_FPS = 25.0
LABEL_THRESHOLD = 0.5

# rows/cols of the synthetic mouth region, used by the silent-audio probes
MOUTH_BOX = (slice(64, 104), slice(28, 84))

_LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class AudioTrack:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class SampleClip:
    """One aligned training unit.

    ``mfcc[k]``, ``frames[k]`` and ``labels[k]`` belong to video frame k; the
    identity frame is frame 0 by convention.
    """

    clip_id: str
    frames: np.ndarray  # (T, H, W, 3) float32
    mfcc: np.ndarray  # (T, 12, 28) float32
    labels: np.ndarray  # (T, 5) uint8
    audio: AudioTrack
    fps: float = DEFAULT_FPS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = len(self.frames)
        if t < 1 or len(self.mfcc) != t or len(self.labels) != t:
            raise ValueError(
                f"clip {self.clip_id}: frames/mfcc/labels lengths differ "
                f"({len(self.frames)}, {len(self.mfcc)}, {len(self.labels)})"
            )
        validate_frames(self.frames)
        if self.mfcc.shape[1:] != (N_MFCC, WINDOW_COLUMNS):
            raise ValueError(f"MFCC windows must be 12x28, got {self.mfcc.shape[1:]}")
        if self.labels.shape[1:] != (N_AU,) or not np.isin(self.labels, (0, 1)).all():
            raise ValueError("AU labels must be (T, 5) binary")
        for arr in (self.frames, self.mfcc, self.labels):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def identity_frame(self) -> np.ndarray:
        return self.frames[0]

    @property
    def frame_times(self) -> np.ndarray:
        return np.arange(len(self)) / self.fps

    def triples(self):
        """Yield (mfcc window, frame, labels) per video frame."""
        yield from zip(self.mfcc, self.frames, self.labels)


@dataclass
class DatasetManifest:
    train: list[SampleClip]
    test: list[SampleClip] = field(default_factory=list)
    au_occurrence_rates: np.ndarray | None = None

    def __post_init__(self):
        self.train = sorted(self.train, key=lambda c: c.clip_id)
        self.test = sorted(self.test, key=lambda c: c.clip_id)
        if self.au_occurrence_rates is None and self.train:
            self.au_occurrence_rates = compute_au_rates(self)

    def split(self, name: str) -> list[SampleClip]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test


def validate_frames(frames: np.ndarray) -> None:
    if frames.shape[-3:] != (FRAME_SIZE, FRAME_SIZE, 3):
        raise ValueError(f"frames must be {FRAME_SIZE}x{FRAME_SIZE}x3, got {frames.shape[-3:]}")
    if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")


def upper_half(img):
    return img[..., :HALF, :, :]


def lower_half(img):
    return img[..., HALF:, :, :]


# ---------------------------------------------------------------------------
# MFCC


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int = N_FFT, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular HTK-style filters, shape (n_mels, n_fft // 2 + 1)."""
    mel_points = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2), n_mels + 2)
    hz = _mel_to_hz(mel_points)
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_mels, len(bins)))
    for m in range(n_mels):
        lo, mid, hi = hz[m], hz[m + 1], hz[m + 2]
        rising = (bins - lo) / (mid - lo)
        falling = (hi - bins) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def extract_mfcc(audio: AudioTrack) -> np.ndarray:
    """Return a (12, T_a) MFCC matrix with one column per 10 ms hop.

    Column j analyses samples ``[j*hop, j*hop + win)``; the signal is
    zero-padded at the end so that ``T_a = len(samples) // hop``.  The energy
    coefficient c0 is dropped.
    """
    sr = audio.sample_rate
    win = int(round(WIN_SECONDS * sr))
    hop = int(round(HOP_SECONDS * sr))
    x = audio.samples
    if len(x) < win:
        raise ValueError(
            f"audio too short: {len(x)} samples, need at least one {win}-sample window"
        )
    n_cols = len(x) // hop
    padded = np.concatenate([x, np.zeros(n_cols * hop + win - len(x))])
    idx = np.arange(win)[None, :] + hop * np.arange(n_cols)[:, None]
    frames = padded[idx] * np.hamming(win)[None, :]
    n_fft = max(N_FFT, 1 << (win - 1).bit_length())
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2 / n_fft
    mel = power @ mel_filterbank(sr, n_fft).T
    log_mel = np.log(np.maximum(mel, _LOG_FLOOR))
    ceps = dct(log_mel, type=2, norm="ortho", axis=1)[:, 1 : N_MFCC + 1]
    return ceps.T.astype(np.float32)


def window_start(t: float) -> int:
    """Index of the first MFCC column of the 280 ms window centred on ``t``."""
    half_span = WINDOW_COLUMNS * HOP_SECONDS / 2
    return int(np.floor((t - half_span) / HOP_SECONDS + 0.5))


def window_mfcc(mfcc: np.ndarray, frame_times) -> np.ndarray:
    """Cut one 12x28 window per frame time, zero-padding past the audio edges."""
    frame_times = np.asarray(frame_times, dtype=np.float64)
    if frame_times.size == 0:
        raise ValueError("frame_times is empty")
    if np.any(np.diff(frame_times) <= 0):
        raise ValueError("frame_times must be strictly increasing")
    n_coef, n_cols = mfcc.shape
    pad = WINDOW_COLUMNS
    padded = np.zeros((n_coef, n_cols + 2 * pad), dtype=np.float32)
    padded[:, pad : pad + n_cols] = mfcc
    out = np.empty((len(frame_times), n_coef, WINDOW_COLUMNS), dtype=np.float32)
    for k, t in enumerate(frame_times):
        s = window_start(t)
        lo = min(max(s + pad, 0), padded.shape[1])
        hi = min(max(s + pad + WINDOW_COLUMNS, 0), padded.shape[1])
        out[k] = 0.0
        # windows entirely beyond the padded range stay zero
        out[k, :, lo - (s + pad) : hi - (s + pad)] = padded[:, lo:hi]
    return out


def audio_windows(audio: AudioTrack, n_frames: int, fps: float) -> np.ndarray:
    return window_mfcc(extract_mfcc(audio), np.arange(n_frames) / fps)


# ---------------------------------------------------------------------------
# clip I/O


def save_clip(clip: SampleClip, clip_dir: str | Path) -> Path:
    clip_dir = Path(clip_dir)
    (clip_dir / "frames").mkdir(parents=True, exist_ok=True)
    for old in (clip_dir / "frames").glob("*.png"):
        old.unlink()
    for k, frame in enumerate(clip.frames):
        pixels = np.round(frame * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(clip_dir / "frames" / f"{k:06d}.png")
    pcm = np.round(np.clip(clip.audio.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    wavfile.write(clip_dir / "audio.wav", clip.audio.sample_rate, pcm)
    with open(clip_dir / "aus.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AU_NAMES)
        writer.writerows(clip.labels.tolist())
    return clip_dir


def _read_frame(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode in ("L", "I;16", "I", "F") or img.mode == "LA":
        warnings.warn(f"{path.name}: grayscale frame replicated to 3 channels", stacklevel=3)
        img = img.convert("L").convert("RGB")
    elif img.mode != "RGB":
        img = img.convert("RGB")
    if img.size != (FRAME_SIZE, FRAME_SIZE):
        img = img.resize((FRAME_SIZE, FRAME_SIZE), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def read_au_table(path: Path, clip_id: str = "") -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"clip {clip_id}: empty AU table {path}")
    header = [h.strip() for h in rows[0]]
    for name in AU_NAMES:
        if name not in header:
            raise ValueError(f"clip {clip_id}: AU table missing column {name}")
    cols = [header.index(name) for name in AU_NAMES]
    values = np.array([[float(r[c]) for c in cols] for r in rows[1:] if r], dtype=np.float64)
    values = values.reshape(-1, N_AU)
    return (values >= LABEL_THRESHOLD).astype(np.uint8)


def read_audio(path: Path) -> AudioTrack:
    sr, pcm = wavfile.read(path)
    if pcm.ndim > 1:
        pcm = pcm.mean(axis=1)
    if np.issubdtype(pcm.dtype, np.integer):
        samples = pcm.astype(np.float64) / 32767.0
    else:
        samples = pcm.astype(np.float64)
    return AudioTrack(np.clip(samples, -1.0, 1.0), int(sr))


def load_clip(clip_dir: str | Path, fps: float = DEFAULT_FPS) -> SampleClip:
    clip_dir = Path(clip_dir)
    clip_id = clip_dir.name
    frame_paths = sorted((clip_dir / "frames").glob("*.png"))
    if not frame_paths:
        raise ValueError(f"clip {clip_id}: no frames found")
    frames = np.stack([_read_frame(p) for p in frame_paths])
    labels = read_au_table(clip_dir / "aus.csv", clip_id)
    if len(labels) != len(frames):
        raise ValueError(
            f"clip {clip_id}: label/frame count mismatch ({len(labels)} rows, {len(frames)} frames)"
        )
    audio = read_audio(clip_dir / "audio.wav")
    mfcc = audio_windows(audio, len(frames), fps)
    return SampleClip(clip_id, frames, mfcc, labels, audio, fps)


def save_manifest(manifest: DatasetManifest, root: str | Path) -> Path:
    """Write every clip under ``root`` plus a ``manifest.txt`` index."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for split in ("train", "test"):
        for clip in manifest.split(split):
            save_clip(clip, root / clip.clip_id)
            lines.append(f"{split}\t{clip.clip_id}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root / "manifest.txt"


def load_manifest(path: str | Path, fps: float = DEFAULT_FPS, workers: int = 0) -> DatasetManifest:
    """Load a manifest file (or a directory holding ``manifest.txt``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    entries = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        split, rel = line.split("\t") if "\t" in line else line.split(None, 1)
        if split not in ("train", "test"):
            raise ValueError(f"{path}: unknown split tag {split!r}")
        entries.append((split, path.parent / rel))
    with ThreadPoolExecutor(max_workers=workers or None) as pool:
        clips = list(pool.map(lambda e: load_clip(e[1], fps), entries))
    train = [c for (s, _), c in zip(entries, clips) if s == "train"]
    test = [c for (s, _), c in zip(entries, clips) if s == "test"]
    return DatasetManifest(train, test)


def compute_au_rates(manifest: DatasetManifest) -> np.ndarray:
    """Per-AU occurrence rate over all frames of the train split."""
    if not manifest.train:
        raise ValueError("train split is empty")
    labels = np.concatenate([c.labels for c in manifest.train])
    rates = labels.mean(axis=0).astype(np.float64)
    missing = [AU_NAMES[i] for i in np.flatnonzero(rates == 0)]
    if missing:
        raise ValueError(f"AU never occurs in the train split: {', '.join(missing)}")
    return rates


# ---------------------------------------------------------------------------
# synthetic faces

# thresholds on mouth opening (AU25, AU10, AU26) and mouth width (AU14, AU20)
OPEN_PARTED = 0.25
OPEN_UPPER_LIP = 0.45
OPEN_JAW = 0.65
WIDTH_TIGHT = 0.3
WIDTH_STRETCH = 0.65


def au_labels_from_geometry(opening: np.ndarray, width: np.ndarray) -> np.ndarray:
    opening = np.asarray(opening)
    width = np.asarray(width)
    labels = np.stack(
        [
            opening >= OPEN_UPPER_LIP,  # AU10
            width < WIDTH_TIGHT,  # AU14
            width >= WIDTH_STRETCH,  # AU20
            opening >= OPEN_PARTED,  # AU25
            opening >= OPEN_JAW,  # AU26
        ],
        axis=-1,
    )
    return labels.astype(np.uint8)


def _smooth_signal(rng: np.random.Generator, n: int, low: float, high: float, spacing: int = 5):
    """Piecewise-cubic monotone interpolation through random control points.

    The control points always include one value near 0 and one near 1, so every
    clip visits both extremes.
    """
    spacing = max(1, min(spacing, n - 1))
    knots = np.arange(0, n - 1 + spacing, spacing)
    values = rng.uniform(0.0, 1.0, size=len(knots))
    lo_i, hi_i = rng.choice(len(knots), size=2, replace=False)
    values[lo_i] = rng.uniform(0.0, low)
    values[hi_i] = rng.uniform(high, 1.0)
    curve = PchipInterpolator(knots, values)(np.arange(n))
    return np.clip(curve, 0.0, 1.0)


def synth_audio(opening: np.ndarray, width: np.ndarray, fps: float, sample_rate: int = SAMPLE_RATE):
    """Tone whose amplitude follows the mouth opening and pitch the mouth width.

    Each frame owns the samples nearest to its timestamp.  The fundamental is
    a multiple of 50 Hz so every 20 ms half-frame holds whole cycles; louder
    frames also get brighter (stronger 2nd/3rd harmonics).
    """
    n_frames = len(opening)
    n = int(round(n_frames / fps * sample_rate))
    tau = np.arange(n) / sample_rate
    k = np.clip(np.floor(tau * fps + 0.5).astype(int), 0, n_frames - 1)
    o = opening[k]
    f0 = 50.0 * (6 + np.round(12 * width[k]))
    phase = 2 * np.pi * f0 * tau
    wave = np.sin(phase) + 0.6 * o * np.sin(2 * phase) + 0.3 * o * np.sin(3 * phase)
    samples = o * wave / 1.9
    return np.round(samples * 32767.0) / 32767.0


def render_face(identity: dict, opening: float, width: float) -> np.ndarray:
    """Draw one 112x112 face; returns uint8 RGB."""
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64) + 0.5
    img = np.empty((FRAME_SIZE, FRAME_SIZE, 3))
    img[:] = identity["background"]

    def soft(d):
        # d < 0 inside; one-pixel antialiased edge
        return np.clip(0.5 - d, 0.0, 1.0)[..., None]

    def ellipse(cy, cx, ry, rx):
        r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        return soft((r - 1.0) * min(ry, rx))

    def paint(mask, color):
        img[:] = img * (1 - mask) + mask * np.asarray(color)

    fy, fx, ry, rx = identity["face"]
    paint(ellipse(fy, fx, ry, rx), identity["skin"])
    ey, edx, er = identity["eyes"]
    for cx in (fx - edx, fx + edx):
        paint(ellipse(ey, cx, er * 0.8, er * 1.3), (0.95, 0.95, 0.95))
        paint(ellipse(ey, cx, er * 0.6, er * 0.6), identity["iris"])
        paint(ellipse(ey - er * 1.7, cx, 1.2, er * 1.6), identity["brow"])
    paint(ellipse(fy + 2, fx, 6.0, 2.5), np.asarray(identity["skin"]) * 0.85)

    my = identity["mouth_y"]
    half_w = 9.0 + 11.0 * width
    half_h = 1.5 + 10.0 * opening
    lips = np.asarray(identity["skin"]) * np.array([0.9, 0.55, 0.55])
    paint(ellipse(my, fx, half_h + 2.0, half_w + 2.0), lips)
    paint(ellipse(my, fx, max(half_h - 0.5, 0.3), half_w), (0.25, 0.05, 0.08))
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _draw_identity(rng: np.random.Generator) -> dict:
    return {
        "background": rng.uniform(0.15, 0.6, size=3),
        "skin": rng.uniform([0.45, 0.3, 0.2], [0.98, 0.85, 0.75]),
        "iris": rng.uniform(0.0, 0.4, size=3),
        "brow": rng.uniform(0.05, 0.35, size=3),
        "face": (
            rng.uniform(56.0, 60.0),
            rng.uniform(53.0, 59.0),
            rng.uniform(44.0, 50.0),
            rng.uniform(34.0, 40.0),
        ),
        "eyes": (rng.uniform(38.0, 44.0), rng.uniform(13.0, 18.0), rng.uniform(3.5, 5.0)),
        "mouth_y": rng.uniform(80.0, 84.0),
    }


def synth_clip(
    clip_id: str,
    n_frames: int,
    seed,
    fps: float = DEFAULT_FPS,
    opening: np.ndarray | None = None,
    width: np.ndarray | None = None,
) -> SampleClip:
    """Render one procedural clip.  ``opening``/``width`` override the random signals."""
    rng = np.random.default_rng(seed)
    identity = _draw_identity(rng)
    o_sig = _smooth_signal(rng, n_frames, 0.1, 0.75)
    w_sig = _smooth_signal(rng, n_frames, 0.2, 0.75)
    if opening is not None:
        o_sig = np.broadcast_to(np.asarray(opening, dtype=np.float64), (n_frames,)).copy()
    if width is not None:
        w_sig = np.broadcast_to(np.asarray(width, dtype=np.float64), (n_frames,)).copy()
    frames = np.stack([render_face(identity, o, w) for o, w in zip(o_sig, w_sig)])
    frames = frames.astype(np.float32) / 255.0
    audio = AudioTrack(synth_audio(o_sig, w_sig, fps), SAMPLE_RATE)
    mfcc = audio_windows(audio, n_frames, fps)
    labels = au_labels_from_geometry(o_sig, w_sig)
    meta = {"opening": o_sig, "width": w_sig}
    return SampleClip(clip_id, frames, mfcc, labels, audio, fps, meta)


def synth_dataset(
    n_clips: int,
    frames_per_clip: int,
    seed: int,
    n_test: int = 0,
    fps: float = DEFAULT_FPS,
    workers: int = 0,
) -> DatasetManifest:
    """Deterministic synthetic manifest with ``n_clips`` train and ``n_test`` test clips.

    Every clip gets its own identity (background, skin, eyes, face outline)
    drawn from a child seed, so train and test identities never coincide.
    """
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    if frames_per_clip < 2:
        raise ValueError("frames_per_clip must be >= 2")
    if n_test < 0:
        raise ValueError("n_test must be >= 0")
    children = np.random.SeedSequence(seed).spawn(n_clips + n_test)
    ids = [f"train_{i:04d}" for i in range(n_clips)] + [f"test_{i:04d}" for i in range(n_test)]
    with ThreadPoolExecutor(max_workers=workers or None) as pool:
        clips = list(
            pool.map(lambda a: synth_clip(a[0], frames_per_clip, a[1], fps), zip(ids, children))
        )
    return DatasetManifest(clips[:n_clips], clips[n_clips:])
