"""Staged training (audio-to-AU, AU classifier, full generator), generation and ablations."""

from __future__ import annotations

import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .checkpoint import (
    Checkpoint,
    load_into,
    load_optimizer,
    optimizer_to_tensors,
    state_to_tensors,
)
from .data import AU_NAMES, AudioTrack, DatasetManifest, SampleClip, audio_windows, lower_half
from .losses import (
    LossWeights,
    au_loss,
    au_weights,
    identity_loss,
    perceptual_loss,
    reconstruction_loss,
    total_loss,
)
from .metrics import EvalReport, au_scores, classify_lower_faces, psnr, ssim
from .networks import AUClassifier, Audio2AU, ModelConfig, TalkingHead, to_hwc, to_nchw

log = logging.getLogger(__name__)


def _frames_tensor(clip: SampleClip) -> torch.Tensor:
    return to_nchw(np.ascontiguousarray(clip.frames))


def _pooled(manifest: DatasetManifest, split: str = "train"):
    clips = manifest.split(split)
    mfcc = np.concatenate([c.mfcc for c in clips])
    frames = np.concatenate([c.frames for c in clips])
    labels = np.concatenate([c.labels for c in clips])
    return mfcc, frames, labels


def _batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step])
    return rng.choice(n, size=min(batch, n), replace=False)


def _check_finite(loss: torch.Tensor, step: int, what: str):
    if not torch.isfinite(loss):
        raise FloatingPointError(f"{what}: non-finite loss {loss.item()} at step {step}")


def _adam(params, cfg: config_mod.TrainConfig, lr: float):
    return torch.optim.Adam(params, lr=lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


def _param_names(module: torch.nn.Module, prefix: str = "") -> dict:
    p = prefix + "." if prefix else ""
    return {id(param): p + name for name, param in module.named_parameters()}


# ---------------------------------------------------------------------------
# pretraining


def _pretrain(
    net: torch.nn.Module,
    prefix: str,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    weights: np.ndarray,
    cfg: config_mod.TrainConfig,
    snapshot: dict,
    resume: Checkpoint | None,
    steps: int | None,
):
    opt = _adam(net.parameters(), cfg, cfg.pretrain_lr)
    names = _param_names(net, prefix)
    start = 0
    history = []
    if resume is not None:
        load_into(net, resume.module_state(prefix))
        load_optimizer(opt, resume.optimizer, names)
        start = resume.step
        history = list(resume.meta.get("loss_history", []))
    total = cfg.pretrain_steps if steps is None else steps
    net.train()
    for step in range(start, total):
        idx = _batch_indices(cfg.seed, step, len(inputs), cfg.pretrain_batch)
        probs = net(inputs[idx])
        loss = au_loss(labels[idx], probs, weights, cfg.dice_eps)
        _check_finite(loss, step, f"pretrain {prefix}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("%s step %d loss %.5f", prefix, step + 1, history[-1])
    net.eval()
    return Checkpoint(
        step=max(total, start),
        tensors=state_to_tensors(net, prefix),
        optimizer=optimizer_to_tensors(opt, names),
        config=config_mod.to_jsonable(snapshot),
        meta={"stage": prefix, "loss_history": history},
    )


def _stage_config(snapshot: dict | None, cfg: config_mod.TrainConfig, model_cfg: ModelConfig) -> dict:
    """Config stored in checkpoints: the caller's snapshot with the typed configs laid over it."""
    merged = dict(config_mod.DEFAULTS if snapshot is None else config_mod.from_snapshot(snapshot))
    merged.update(config_mod.flatten(cfg, model_cfg))
    return merged


def build_audio2au(model_cfg: ModelConfig, seed: int) -> Audio2AU:
    torch.manual_seed(seed)
    return Audio2AU(model_cfg.a2au_conv, model_cfg.a2au_hidden, model_cfg.a2au_fc, model_cfg.au_dim)


def build_au_classifier(model_cfg: ModelConfig, seed: int) -> AUClassifier:
    torch.manual_seed(seed)
    return AUClassifier(model_cfg.auclf_channels, model_cfg.auclf_hidden)


def pretrain_audio2au(
    manifest: DatasetManifest,
    cfg: config_mod.TrainConfig,
    model_cfg: ModelConfig,
    snapshot: dict | None = None,
    resume: Checkpoint | None = None,
    steps: int | None = None,
) -> Checkpoint:
    """Fit the audio-to-AU network on (MFCC window, AU label) pairs of the train split."""
    weights = au_weights(manifest.au_occurrence_rates)
    mfcc, _, labels = _pooled(manifest, "train")
    net = build_audio2au(model_cfg, cfg.seed)
    ckpt = _pretrain(
        net, "audio2au", torch.from_numpy(mfcc), torch.from_numpy(labels).float(), weights,
        cfg, _stage_config(snapshot, cfg, model_cfg), resume, steps,
    )
    ckpt.meta["report"] = _score_report(lambda split: _a2au_probs(net, manifest, split), manifest)
    return ckpt


def _a2au_probs(net, manifest, split):
    mfcc, _, labels = _pooled(manifest, split)
    with torch.no_grad():
        return net(torch.from_numpy(mfcc)).numpy(), labels


def _score_report(fn, manifest) -> dict:
    """Per-AU F1/accuracy on the train and (if present) test splits."""
    report = {}
    for split in ("train", "test"):
        if not manifest.split(split):
            continue
        probs, labels = fn(split)
        s = au_scores(probs, labels)
        report[split] = {
            "f1": s["f1"].tolist(),
            "accuracy": s["accuracy"].tolist(),
            "avg_f1": s["avg_f1"],
            "avg_accuracy": s["avg_accuracy"],
        }
    return report


def pretrain_au_classifier(
    manifest: DatasetManifest,
    cfg: config_mod.TrainConfig,
    model_cfg: ModelConfig,
    snapshot: dict | None = None,
    resume: Checkpoint | None = None,
    steps: int | None = None,
) -> Checkpoint:
    """Fit the AU classifier on real lower-face crops of the train split."""
    weights = au_weights(manifest.au_occurrence_rates)
    _, frames, labels = _pooled(manifest, "train")
    net = build_au_classifier(model_cfg, cfg.seed)
    lower = to_nchw(np.ascontiguousarray(lower_half(frames)))
    ckpt = _pretrain(
        net, "au_classifier", lower, torch.from_numpy(labels).float(), weights,
        cfg, _stage_config(snapshot, cfg, model_cfg), resume, steps,
    )

    def probs(split):
        _, f, y = _pooled(manifest, split)
        return classify_lower_faces(f, net), y

    ckpt.meta["report"] = _score_report(probs, manifest)
    return ckpt


def format_au_table(report: dict) -> str:
    """Per-AU F1/accuracy table for the train and test splits."""
    splits = [s for s in ("train", "test") if s in report]
    head = "AU      " + "".join(f"{s + ' F1':>10}{s + ' Acc':>11}" for s in splits)
    lines = [head]
    for i, name in enumerate(AU_NAMES):
        cells = "".join(
            f"{report[s]['f1'][i]:>10.3f}{100 * report[s]['accuracy'][i]:>10.2f}%" for s in splits
        )
        lines.append(f"{name:<8}{cells}")
    avg = "".join(
        f"{report[s]['avg_f1']:>10.3f}{100 * report[s]['avg_accuracy']:>10.2f}%" for s in splits
    )
    lines.append(f"{'Average':<8}{avg}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# full model


class FullTrainer:
    """Owns the full model, its optimizer and the deterministic step schedule.

    Parameter groups: ``main`` (identity/audio encoders, fusion, decoder) at
    ``lr_main``; ``audio2au`` and ``au_classifier`` at their fine-tune rates,
    updated from the AU loss alone.  The perceptual extractor has no group.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        cfg: config_mod.TrainConfig,
        model_cfg: ModelConfig,
        audio2au: Checkpoint | None = None,
        au_classifier: Checkpoint | None = None,
        snapshot: dict | None = None,
    ):
        if not manifest.train:
            raise ValueError("train split is empty")
        self.manifest = manifest
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.snapshot = _stage_config(snapshot, cfg, model_cfg)
        lam = cfg.loss_weights
        self.model = TalkingHead(model_cfg, seed=cfg.seed)
        self.use_au = lam.au > 0
        if model_cfg.use_audio2au:
            if audio2au is None or not audio2au.has_module("audio2au"):
                raise ValueError("full training needs a pretrained audio-to-AU checkpoint")
            load_into(self.model.audio2au, audio2au.module_state("audio2au"))
        if self.use_au:
            if au_classifier is None or not au_classifier.has_module("au_classifier"):
                raise ValueError("full training with the AU loss needs a pretrained AU classifier")
        if au_classifier is not None and au_classifier.has_module("au_classifier"):
            load_into(self.model.au_classifier, au_classifier.module_state("au_classifier"))
        self.weights = au_weights(manifest.au_occurrence_rates)

        self.main_params = list(self.model.generator_parameters())
        self.a2au_params = list(self.model.audio2au.parameters()) if model_cfg.use_audio2au else []
        self.clf_params = list(self.model.au_classifier.parameters())
        groups = [{"params": self.main_params, "lr": cfg.lr_main, "name": "main"}]
        if self.use_au and self.a2au_params:
            groups.append({"params": self.a2au_params, "lr": cfg.lr_audio2au_ft, "name": "audio2au"})
        if self.use_au:
            groups.append({"params": self.clf_params, "lr": cfg.lr_auclf_ft, "name": "au_classifier"})
        self.opt = torch.optim.Adam(groups, betas=(cfg.adam_beta1, cfg.adam_beta2))
        self.names = _param_names(self.model)
        self.step = 0
        self.history: list[dict] = []
        self.rng = torch.Generator().manual_seed(cfg.seed)

    @property
    def steps_per_epoch(self) -> int:
        return -(-len(self.manifest.train) // self.cfg.batch_clips)

    def clips_for_step(self, step: int) -> list[SampleClip]:
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.manifest.train))
        b = self.cfg.batch_clips
        return [self.manifest.train[i] for i in order[pos * b : (pos + 1) * b]]

    def clip_losses(self, clip: SampleClip) -> dict:
        lam = self.cfg.loss_weights
        frames = _frames_tensor(clip)
        identity = frames[:1]
        gen = self.model(identity, torch.tensor(clip.mfcc))
        comps = {"rec": reconstruction_loss(gen, frames), "id": identity_loss(gen, identity)}
        if lam.per > 0:
            comps["per"] = perceptual_loss(gen, frames, self.model.perceptual)
        if self.use_au:
            probs = self.model.au_classifier(gen[:, :, gen.shape[-2] // 2 :, :])
            labels = torch.tensor(clip.labels).float()
            comps["au"] = au_loss(labels, probs, self.weights, self.cfg.dice_eps)
        return comps

    def train_step(self) -> dict:
        step = self.step
        self.model.identity_encoder.train()
        self.model.audio_encoder.train()
        self.model.fusion.train()
        self.model.decoder.train()
        self.model.audio2au.eval()
        self.model.au_classifier.eval()
        clips = self.clips_for_step(step)
        comps: dict = {}
        for clip in clips:
            for k, v in self.clip_losses(clip).items():
                comps[k] = comps.get(k, 0.0) + v / len(clips)
        loss = total_loss(comps, self.cfg.loss_weights)
        _check_finite(loss, step, "train_full")

        self.opt.zero_grad(set_to_none=True)
        ft_params = self.a2au_params + self.clf_params if self.use_au else []
        grads = torch.autograd.grad(loss, self.main_params, retain_graph=bool(ft_params), allow_unused=True)
        for p, g in zip(self.main_params, grads):
            p.grad = g
        if ft_params:
            ft = torch.autograd.grad(comps["au"], ft_params, allow_unused=True)
            for p, g in zip(ft_params, ft):
                p.grad = g
        self.opt.step()

        record = {"step": step + 1, "total": loss.item()}
        record.update({k: float(v.detach()) for k, v in comps.items()})
        self.history.append(record)
        self.step += 1
        return record

    def train(self, steps: int, out_dir: str | Path | None = None) -> list[dict]:
        while self.step < steps:
            rec = self.train_step()
            if self.cfg.log_every and rec["step"] % self.cfg.log_every == 0:
                log.info("train step %d total %.5f rec %.5f", rec["step"], rec["total"], rec["rec"])
            if out_dir and self.cfg.ckpt_every and rec["step"] % self.cfg.ckpt_every == 0:
                self.checkpoint().save(Path(out_dir) / f"ckpt_{self.step:08d}.bin")
        return self.history

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            step=self.step,
            tensors=state_to_tensors(self.model),
            optimizer=optimizer_to_tensors(self.opt, self.names),
            config=config_mod.to_jsonable(self.snapshot),
            meta={
                "stage": "full",
                "loss_history": self.history,
                "lr": {g["name"]: g["lr"] for g in self.opt.param_groups},
            },
            rng=self.rng.get_state(),
        )

    def restore(self, ckpt: Checkpoint) -> None:
        load_into(self.model, ckpt.tensors)
        load_optimizer(self.opt, ckpt.optimizer, self.names)
        self.step = ckpt.step
        self.history = [dict(r) for r in ckpt.meta.get("loss_history", [])]
        if ckpt.rng is not None:
            self.rng.set_state(ckpt.rng)


def train_full(
    manifest: DatasetManifest,
    cfg: config_mod.TrainConfig,
    model_cfg: ModelConfig,
    audio2au: Checkpoint | None,
    au_classifier: Checkpoint | None,
    steps: int | None = None,
    resume: Checkpoint | None = None,
    out_dir: str | Path | None = None,
    snapshot: dict | None = None,
) -> FullTrainer:
    trainer = FullTrainer(manifest, cfg, model_cfg, audio2au, au_classifier, snapshot)
    if resume is not None:
        trainer.restore(resume)
    trainer.train(cfg.total_steps(len(manifest.train)) if steps is None else steps, out_dir)
    return trainer


def model_from_checkpoint(ckpt: Checkpoint) -> TalkingHead:
    cfg = config_mod.from_snapshot(ckpt.config)
    model = TalkingHead(config_mod.model_config(cfg), seed=cfg["seed"])
    load_into(model, ckpt.tensors)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# generation and evaluation


def generate_frames(model: TalkingHead, identity: np.ndarray, mfcc: np.ndarray) -> np.ndarray:
    """Eval-mode generation from precomputed MFCC windows; returns (T, H, W, 3)."""
    model.eval()
    with torch.no_grad():
        ident = to_nchw(np.ascontiguousarray(identity)[None])
        out = model(ident, torch.tensor(mfcc))
    return to_hwc(out)


def generate_video(identity: np.ndarray, audio: AudioTrack, model, fps: float = 25.0) -> np.ndarray:
    """Drive ``identity`` (H, W, 3) with ``audio``; one frame per 1/fps of audio."""
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model)
    n_frames = int(math.floor(audio.duration * fps + 1e-9))
    if n_frames < 1:
        raise ValueError("audio shorter than one video frame")
    mfcc = audio_windows(audio, n_frames, fps)
    return generate_frames(model, identity, mfcc)


def evaluate(
    model: TalkingHead,
    manifest: DatasetManifest,
    split: str = "test",
    au_classifier: torch.nn.Module | None = None,
) -> EvalReport:
    """Generate every clip of ``split`` and pool per-frame metrics over it."""
    clf = au_classifier if au_classifier is not None else model.au_classifier
    clf.eval()
    clips = manifest.split(split)
    if not clips:
        raise ValueError(f"split {split!r} is empty")
    psnrs, ssims, probs, labels = [], [], [], []
    for clip in clips:
        gen = generate_frames(model, clip.identity_frame, clip.mfcc)
        psnrs += [psnr(g, f) for g, f in zip(gen, clip.frames)]
        ssims += [ssim(g, f) for g, f in zip(gen, clip.frames)]
        probs.append(classify_lower_faces(gen, clf))
        labels.append(clip.labels)
    return EvalReport.from_frames(psnrs, ssims, np.concatenate(probs), np.concatenate(labels))


def load_classifier(ckpt: Checkpoint, model_cfg: ModelConfig) -> AUClassifier:
    net = AUClassifier(model_cfg.auclf_channels, model_cfg.auclf_hidden)
    load_into(net, ckpt.module_state("au_classifier"))
    return net.eval()


# ---------------------------------------------------------------------------
# ablations

# variant -> (fusion, use_audio2au, which loss terms stay on)
VARIANTS = {
    "baseline": ("gru", False, ("rec",)),
    "+per": ("gru", False, ("rec", "per")),
    "+id": ("gru", False, ("rec", "per", "id")),
    "+tcsan": ("tcsan", False, ("rec", "per", "id")),
    "+au": ("tcsan", False, ("rec", "per", "id", "au")),
    "full": ("tcsan", True, ("rec", "per", "id", "au")),
    "audio2au-only": ("gru", True, ("rec", "per", "id", "au")),
}
VARIANT_ALIASES = {"gru-like-baseline-off": "baseline", "tcsan-only": "+au"}


def variant_settings(variant: str, cfg: config_mod.TrainConfig, model_cfg: ModelConfig):
    name = VARIANT_ALIASES.get(variant, variant)
    if name not in VARIANTS:
        valid = ", ".join([*VARIANTS, *VARIANT_ALIASES])
        raise ValueError(f"unknown ablation variant {variant!r}; choose from {valid}")
    fusion, use_a2au, keep = VARIANTS[name]
    lam = cfg.loss_weights
    weights = LossWeights(*(getattr(lam, k) if k in keep else 0.0 for k in ("rec", "id", "per", "au")))
    new_model = replace(model_cfg, fusion=fusion, use_audio2au=use_a2au)
    return replace(cfg, loss_weights=weights), new_model


def run_ablation(
    manifest: DatasetManifest,
    variant: str,
    cfg: config_mod.TrainConfig,
    model_cfg: ModelConfig,
    audio2au: Checkpoint,
    au_classifier: Checkpoint,
    steps: int | None = None,
    split: str = "test",
    snapshot: dict | None = None,
    out_dir: str | Path | None = None,
) -> tuple[EvalReport, FullTrainer]:
    """Train one ablation variant and score it with the (unchanged) pretrained classifier."""
    vcfg, vmodel = variant_settings(variant, cfg, model_cfg)
    trainer = train_full(manifest, vcfg, vmodel, audio2au, au_classifier, steps=steps,
                         out_dir=out_dir, snapshot=snapshot)
    judge = load_classifier(au_classifier, model_cfg)
    report = evaluate(trainer.model, manifest, split, au_classifier=judge)
    return report, trainer
