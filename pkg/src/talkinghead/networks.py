"""Encoders, decoder, AU networks and the perceptual feature extractor.

Images enter the networks as (B, 3, H, W) tensors in [0, 1]; MFCC windows as
(B, 12, 28).  Widths are taken from :class:`ModelConfig` so the same code
serves the full-size layout and the reduced desk-scale layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import FRAME_SIZE, HALF, N_AU, N_MFCC, WINDOW_COLUMNS
from .tcsan import TCSAN, GRUFusion, TcsanConfig


@dataclass(frozen=True)
class ModelConfig:
    id_dim: int = 512
    audio_dim: int = 512
    au_dim: int = 64
    enc_channels: tuple = (64, 128, 256, 512)
    audio_channels: tuple = (32, 64, 128, 256, 512)
    a2au_conv: int = 32
    a2au_hidden: int = 256
    a2au_fc: int = 128
    auclf_channels: tuple = (32, 64)
    auclf_hidden: tuple = (256, 64)
    per_channels: tuple = (16, 32, 64, 128)
    per_seed: int = 1234
    per_weights: str = ""
    fusion: str = "tcsan"  # tcsan | gru
    use_audio2au: bool = True
    tcsan: TcsanConfig = field(default_factory=TcsanConfig)

    @property
    def fused_dim(self) -> int:
        return self.id_dim + self.audio_dim + (N_AU * self.au_dim if self.use_audio2au else 0)

    def __post_init__(self):
        if len(self.enc_channels) != 4:
            raise ValueError("identity encoder needs exactly 4 conv widths")
        if len(self.audio_channels) != 5:
            raise ValueError("audio encoder needs exactly 5 conv widths")
        if self.fusion not in ("tcsan", "gru"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.tcsan.in_channels != self.fused_dim:
            object.__setattr__(self, "tcsan", replace(self.tcsan, in_channels=self.fused_dim))


def to_nchw(frames) -> torch.Tensor:
    """(.., H, W, 3) numpy/tensor -> (.., 3, H, W) float tensor."""
    if not isinstance(frames, torch.Tensor):
        frames = torch.from_numpy(np.array(frames, dtype=np.float32))
    return frames.movedim(-1, -3).float()


def to_hwc(frames: torch.Tensor) -> np.ndarray:
    return frames.detach().movedim(-3, -1).cpu().numpy()


def _check_image(x: torch.Tensor, h: int, w: int, what: str):
    if x.dim() != 4 or tuple(x.shape[1:]) != (3, h, w):
        raise ValueError(f"{what} expects (B, 3, {h}, {w}) input, got {tuple(x.shape)}")


def _check_mfcc(x: torch.Tensor, what: str):
    if x.dim() != 3 or tuple(x.shape[1:]) != (N_MFCC, WINDOW_COLUMNS):
        raise ValueError(f"{what} expects (B, 12, 28) MFCC windows, got {tuple(x.shape)}")


class IdentityEncoder(nn.Module):
    """Four stride-2 convs (112 -> 7) and a linear layer; keeps every conv output for skips."""

    def __init__(self, channels=(64, 128, 256, 512), dim=512):
        super().__init__()
        widths = (3, *channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1) for i in range(4)
        )
        side = FRAME_SIZE // 16
        self.fc = nn.Linear(channels[-1] * side * side, dim)

    def forward(self, img):
        _check_image(img, FRAME_SIZE, FRAME_SIZE, "identity encoder")
        skips = []
        x = img
        for conv in self.convs:
            x = F.relu(conv(x))
            skips.append(x)
        return self.fc(x.flatten(1)), skips


class AudioEncoder(nn.Module):
    def __init__(self, channels=(32, 64, 128, 256, 512), dim=512):
        super().__init__()
        strides = (1, 2, 1, 2, 1)
        widths = (1, *channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=strides[i], padding=1) for i in range(5)
        )
        self.norms = nn.ModuleList(nn.BatchNorm2d(c) for c in channels)
        self.fc1 = nn.Linear(channels[-1], dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, mfcc):
        _check_mfcc(mfcc, "audio encoder")
        x = mfcc.unsqueeze(1)
        for conv, norm in zip(self.convs, self.norms):
            x = F.relu(norm(conv(x)))
        x = x.mean(dim=(2, 3))
        return self.fc2(F.relu(self.fc1(x)))


# by this hop (its 25 ms frame ends 35 ms after the video frame time) the LSTM has
# consumed all of the frame's own +-20 ms of audio
READOUT_COLUMN = WINDOW_COLUMNS // 2 + 1


class Audio2AU(nn.Module):
    """Frequency/time convolutions, two LSTM layers, then one 3-layer head per AU.

    The recurrent state is read out at :data:`READOUT_COLUMN`, the hop aligned
    with the video frame, rather than at the end of the 280 ms window.

    The third head layer (64 -> 1) plus sigmoid is only used for pretraining;
    :meth:`features` stops after the second head layer.
    """

    def __init__(self, conv=32, hidden=256, fc=128, au_dim=64):
        super().__init__()
        self.freq_conv = nn.Conv2d(1, conv, (3, 1), padding=(1, 0))
        self.freq_norm = nn.BatchNorm2d(conv)
        self.time_conv = nn.Conv2d(conv, conv, (1, 3), padding=(0, 1))
        self.time_norm = nn.BatchNorm2d(conv)
        self.lstm = nn.LSTM(conv * N_MFCC, hidden, num_layers=2, batch_first=True)
        self.w1 = nn.Parameter(torch.empty(N_AU, hidden, fc))
        self.b1 = nn.Parameter(torch.zeros(N_AU, fc))
        self.w2 = nn.Parameter(torch.empty(N_AU, fc, au_dim))
        self.b2 = nn.Parameter(torch.zeros(N_AU, au_dim))
        self.w3 = nn.Parameter(torch.empty(N_AU, au_dim))
        self.b3 = nn.Parameter(torch.zeros(N_AU))
        for w, fan_in in ((self.w1, hidden), (self.w2, fc), (self.w3, au_dim)):
            bound = 1.0 / np.sqrt(fan_in)
            nn.init.uniform_(w, -bound, bound)

    def trunk(self, mfcc):
        _check_mfcc(mfcc, "audio-to-AU module")
        x = mfcc.unsqueeze(1)
        x = F.relu(self.freq_norm(self.freq_conv(x)))
        x = F.relu(self.time_norm(self.time_conv(x)))
        seq = x.permute(0, 3, 1, 2).flatten(2)  # (B, 28, C*12)
        out, _ = self.lstm(seq)  # zero initial state per window
        return out[:, READOUT_COLUMN]

    def features(self, mfcc):
        """Per-AU 64-dim representations concatenated in canonical order: (B, 5*au_dim)."""
        h = self.trunk(mfcc)
        h = F.relu(torch.einsum("bh,ahf->baf", h, self.w1) + self.b1)
        h = F.relu(torch.einsum("baf,afd->bad", h, self.w2) + self.b2)
        return h.flatten(1)

    def head(self, feats):
        """The layer removed after pretraining: (B, 5*au_dim) -> probabilities (B, 5)."""
        h = feats.unflatten(1, (N_AU, -1))
        return torch.sigmoid((h * self.w3).sum(-1) + self.b3)

    def forward(self, mfcc):
        return self.head(self.features(mfcc))


class ImageDecoder(nn.Module):
    """Linear layer plus six transposed convs with U-Net style identity skips.

    Stride-1 layers sit at 7 and 56 pixels, stride-2 layers upsample
    7 -> 14 -> 28 -> 56 -> 112.  Each identity skip map is concatenated onto
    the decoder activation of the same resolution.
    """

    def __init__(self, in_dim=512, channels=(64, 128, 256, 512)):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.side = FRAME_SIZE // 16
        self.channels = tuple(channels)
        self.fc = nn.Linear(in_dim, c4 * self.side * self.side)
        self.layers = nn.ModuleList(
            [
                nn.ConvTranspose2d(2 * c4, c4, 3, stride=1, padding=1),  # 7, skip 4
                nn.ConvTranspose2d(c4, c3, 4, stride=2, padding=1),  # 7 -> 14
                nn.ConvTranspose2d(2 * c3, c2, 4, stride=2, padding=1),  # 14 -> 28, skip 3
                nn.ConvTranspose2d(2 * c2, c1, 4, stride=2, padding=1),  # 28 -> 56, skip 2
                nn.ConvTranspose2d(2 * c1, c1, 3, stride=1, padding=1),  # 56, skip 1
                nn.ConvTranspose2d(c1, 3, 4, stride=2, padding=1),  # 56 -> 112
            ]
        )
        # index of the skip map concatenated before each layer (None = no skip)
        self.skip_index = (3, None, 2, 1, 0, None)

    def forward(self, f, skips):
        if len(skips) != 4:
            raise ValueError(f"decoder needs 4 skip maps, got {len(skips)}")
        x = F.relu(self.fc(f)).view(f.shape[0], self.channels[-1], self.side, self.side)
        last = len(self.layers) - 1
        for i, (layer, j) in enumerate(zip(self.layers, self.skip_index)):
            if j is not None:
                skip = skips[j]
                if skip.shape[-2:] != x.shape[-2:] or skip.shape[1] != x.shape[1]:
                    raise ValueError(
                        f"skip map {tuple(skip.shape[1:])} does not match decoder stage {tuple(x.shape[1:])}"
                    )
                if skip.shape[0] != x.shape[0]:
                    skip = skip.expand(x.shape[0], -1, -1, -1)
                x = torch.cat([x, skip], dim=1)
            x = layer(x)
            x = torch.sigmoid(x) if i == last else F.relu(x)
        return x


class AUClassifier(nn.Module):
    """Four convs (max-pool after every two) and three linear layers on the lower face."""

    def __init__(self, channels=(32, 64), hidden=(256, 64)):
        super().__init__()
        a, b = channels
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(3, a, 3, padding=1),
                nn.Conv2d(a, a, 3, padding=1),
                nn.Conv2d(a, b, 3, padding=1),
                nn.Conv2d(b, b, 3, padding=1),
            ]
        )
        flat = b * (HALF // 4) * (FRAME_SIZE // 4)
        self.fc1 = nn.Linear(flat, hidden[0])
        self.fc2 = nn.Linear(hidden[0], hidden[1])
        self.fc3 = nn.Linear(hidden[1], N_AU)

    def forward(self, lower_face):
        _check_image(lower_face, HALF, FRAME_SIZE, "AU classifier")
        x = lower_face
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            if i % 2 == 1:
                x = F.max_pool2d(x, 2)
        x = F.relu(self.fc1(x.flatten(1)))
        x = F.relu(self.fc2(x))
        return torch.sigmoid(self.fc3(x))


class PerceptualExtractor(nn.Module):
    """Frozen feature pyramid: ordered named layers, each feeding the next.

    The default is a seeded random stride-2 conv stack.  ``weights`` may point
    to a ``torch.save``-d state dict with matching shapes to use trained
    filters instead.
    """

    def __init__(self, channels=(16, 32, 64, 128), seed=1234, weights: str | Path = ""):
        super().__init__()
        widths = (3, *channels)
        gen = torch.Generator().manual_seed(seed)
        layers = []
        for i in range(len(channels)):
            conv = nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
            bound = 1.0 / np.sqrt(widths[i] * 9)
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.zero_()
            layers.append(nn.Sequential(conv, nn.ReLU()))
        self.layers = nn.ModuleList(layers)
        self.layer_names = [f"stage{i + 1}" for i in range(len(layers))]
        if weights:
            self.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
        self.requires_grad_(False)
        self._check_pyramid()

    def _check_pyramid(self):
        if len(self.layers) < 2:
            raise ValueError("perceptual extractor needs at least 2 layers")
        with torch.no_grad():
            sizes = [f.shape[-1] for f in self(torch.zeros(1, 3, FRAME_SIZE, FRAME_SIZE))]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"extractor spatial sizes must strictly decrease, got {sizes}")

    def train(self, mode: bool = True):
        # frozen: never switch into training mode
        return super().train(False)

    def forward(self, img):
        feats = []
        x = img
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


def perceptual_features(img, extractor: PerceptualExtractor):
    if len(extractor.layers) < 2:
        raise ValueError("perceptual extractor needs at least 2 layers")
    return extractor(img)


def fuse_features(f_id, f_a, f_au=None):
    """Per-frame concatenation [identity | audio | AU] along the last dim.

    ``f_id`` is one vector per clip, broadcast over the T frames of ``f_a``.
    """
    parts = [f_id.expand(*f_a.shape[:-1], f_id.shape[-1]), f_a]
    if f_au is not None:
        parts.append(f_au)
    return torch.cat(parts, dim=-1)


class TalkingHead(nn.Module):
    """All sub-networks of the generator plus the AU classifier and perceptual extractor."""

    GENERATOR_PARTS = ("identity_encoder", "audio_encoder", "fusion", "decoder")

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        torch.manual_seed(seed)
        self.identity_encoder = IdentityEncoder(cfg.enc_channels, cfg.id_dim)
        self.audio_encoder = AudioEncoder(cfg.audio_channels, cfg.audio_dim)
        self.audio2au = Audio2AU(cfg.a2au_conv, cfg.a2au_hidden, cfg.a2au_fc, cfg.au_dim)
        out_dim = cfg.tcsan.out_channels
        if cfg.fusion == "tcsan":
            self.fusion = TCSAN(cfg.tcsan, seed=seed)
        else:
            self.fusion = GRUFusion(cfg.fused_dim, out_dim)
        self.decoder = ImageDecoder(out_dim, cfg.enc_channels)
        self.au_classifier = AUClassifier(cfg.auclf_channels, cfg.auclf_hidden)
        self.perceptual = PerceptualExtractor(cfg.per_channels, cfg.per_seed, cfg.per_weights)

    def generator_parameters(self):
        for part in self.GENERATOR_PARTS:
            yield from getattr(self, part).parameters()

    def encode_clip(self, identity, mfcc):
        """identity: (1, 3, H, W); mfcc: (T, 12, 28) -> fused (T, C) and identity skips."""
        f_id, skips = self.identity_encoder(identity)
        f_a = self.audio_encoder(mfcc)
        f_au = self.audio2au.features(mfcc) if self.cfg.use_audio2au else None
        return fuse_features(f_id, f_a, f_au), skips

    def forward(self, identity, mfcc):
        """Generate (T, 3, H, W) frames for one clip."""
        fused, skips = self.encode_clip(identity, mfcc)
        f_t = self.fusion(fused)
        return self.decoder(f_t, skips)
