"""Acceptance suite: one test per criterion, each tagged for the summary report.

The desk-scale tests (7 to 9) share one pretraining + training run of the
``desk`` preset on the seed-7 synthetic dataset.
"""

import dataclasses
import math
import time

import numpy as np
import pytest
import torch

from conftest import TINY_OVERRIDES
from oracles import fd_rel_error, naive_attention, naive_conv, smooth_at
from talkinghead import config as C
from talkinghead import training as T
from talkinghead.checkpoint import Checkpoint
from talkinghead.cli import run
from talkinghead.data import MOUTH_BOX, AudioTrack, synth_dataset
from talkinghead.losses import (
    LossWeights,
    au_loss,
    au_weights,
    bce_loss,
    dice_loss,
    identity_loss,
    perceptual_loss,
    reconstruction_loss,
    total_loss,
)
from talkinghead.metrics import au_scores, psnr, ssim
from talkinghead.networks import IdentityEncoder, ImageDecoder, PerceptualExtractor
from talkinghead.tcsan import (
    TCSAN,
    MultiHeadSelfAttention,
    ResidualAttentionBlock,
    TcsanConfig,
    dilated_noncausal_conv,
    multi_head_self_attention,
    scaled_dot_attention,
)

D = torch.float64
DESK_FULL_STEPS = 1000
ABLATION_STEPS = 300
ABLATION_SEEDS = (0, 1, 2)


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# ---------------------------------------------------------------------------
# 1-3: TCSAN building blocks


@criterion(1, "dilated conv matches triple-loop oracle")
def test_conv_oracle(detail):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, n = 0.0, 0
    for t in range(1, 17):
        for d in (1, 2, 4):
            for _ in range(3):
                c_in, c_out = int(rng.integers(1, 9)), int(rng.integers(1, 9))
                x = rng.uniform(-1, 1, (t, c_in)).astype(np.float32)
                w = rng.uniform(-1, 1, (3, c_in, c_out)).astype(np.float32)
                b = rng.uniform(-1, 1, c_out).astype(np.float32)
                y = dilated_noncausal_conv(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b), d)
                assert y.dtype == torch.float32
                worst = max(worst, float(np.abs(y.numpy() - naive_conv(x, w, b, d)).max()))
                n += 1
    elapsed = time.perf_counter() - start
    detail(f"{n} instances, max abs err {worst:.2e}, {elapsed:.1f}s")
    assert n >= 100
    assert worst < 1e-6
    assert elapsed < 10


def _impulse_support(layers, t=96):
    cfg = TcsanConfig(layers=layers, kernel_size=3, heads=1, token_group_size=1, in_channels=1, out_channels=1)
    net = TCSAN(cfg, seed=0).double()
    with torch.no_grad():
        # all-positive weights so no influence can cancel out
        for block in net.blocks:
            block.conv.weight.fill_(1.0)
            block.conv.bias.zero_()
            block.attn.w_qkv.fill_(1.0)
            block.attn.w_out.fill_(1.0)
            block.proj.weight.fill_(1.0)
        x = torch.zeros(t, 1, dtype=D)
        base = net.features(x)
        x[t // 2] = 1.0
        diff = (net.features(x) - base).abs()[:, 0]
    return np.flatnonzero(diff.numpy() > 0) - t // 2


@criterion(2, "receptive field 7/15/31, symmetric")
def test_receptive_field(detail):
    start = time.perf_counter()
    for layers, size in [(2, 7), (3, 15), (4, 31)]:
        offsets = _impulse_support(layers)
        assert len(offsets) == size == 1 + 2 * (2**layers - 1)
        assert offsets.tolist() == list(range(-(size // 2), size // 2 + 1))
        detail(f"L={layers}: {len(offsets)}")
    elapsed = time.perf_counter() - start
    assert elapsed < 10


def _attention_args(n, dim, gen, dtype=D):
    return (
        torch.randn(n, dim, generator=gen, dtype=dtype),
        torch.randn(3, dim, dim, generator=gen, dtype=dtype) / dim**0.5,
        torch.randn(3, dim, generator=gen, dtype=dtype),
        torch.randn(dim, dim, generator=gen, dtype=dtype) / dim**0.5,
        torch.randn(dim, generator=gen, dtype=dtype),
    )


@criterion(3, "attention oracle, softmax rows, permutation equivariance")
def test_attention(detail):
    gen = torch.Generator().manual_seed(3)
    worst_rel, worst_row = 0.0, 0.0
    for heads, n, dim in [(1, 3, 4), (2, 5, 8), (4, 21, 16), (4, 21, 64), (8, 7, 32)]:
        z, wq, bq, wo, bo = _attention_args(n, dim, gen)
        got = multi_head_self_attention(z, heads, wq, bq, wo, bo).numpy()
        ref = naive_attention(z.numpy(), heads, wq.numpy(), bq.numpy(), wo.numpy(), bo.numpy())
        worst_rel = max(worst_rel, np.abs(got - ref).max() / np.abs(ref).max())

        # identity values expose the attention weights themselves
        for dtype in (torch.float32, D):
            q = torch.randn(n, dim // heads, generator=gen).to(dtype)
            k = torch.randn(n, dim // heads, generator=gen).to(dtype)
            weights = scaled_dot_attention(q, k, torch.eye(n, dtype=dtype))
            assert torch.all(weights >= 0)
            worst_row = max(worst_row, float((weights.sum(-1) - 1).abs().max()))

    for dtype in (torch.float32, D):
        for trial in range(10):
            mod = MultiHeadSelfAttention(16, 4).to(dtype)
            mod.reset_parameters(torch.Generator().manual_seed(trial))
            z = torch.randn(2, 21, 16, generator=gen).to(dtype)
            perm = torch.randperm(21, generator=gen)
            with torch.no_grad():
                assert torch.equal(mod(z)[:, perm], mod(z[:, perm]))
    detail(f"oracle rel err {worst_rel:.1e}, row-sum err {worst_row:.1e}, permutation exact")
    assert worst_rel < 1e-6
    assert worst_row < 1e-6


# ---------------------------------------------------------------------------
# 4: gradients


def _grad_cases():
    gen = torch.Generator().manual_seed(44)
    cases = {name: [] for name in ("conv", "attention", "block", "bce", "dice", "au", "rec", "id", "per",
                                   "total", "decoder")}

    for i in range(20):
        t, c_in, c_out, d = 3 + i % 5, 1 + i % 3, 1 + i % 2, (1, 2, 4)[i % 3]
        args = [torch.randn(t, c_in, generator=gen, dtype=D), torch.randn(3, c_in, c_out, generator=gen, dtype=D),
                torch.randn(c_out, generator=gen, dtype=D)]
        cases["conv"].append((lambda x, w, b, d=d: dilated_noncausal_conv(x, w, b, d), args))

        heads = 1 + i % 2
        cases["attention"].append(
            (lambda *a, h=heads: multi_head_self_attention(a[0], h, *a[1:]), list(_attention_args(2 + i % 3, 4, gen)))
        )

        cfg = TcsanConfig(layers=2, heads=2, token_group_size=2, in_channels=4, out_channels=2)
        block = ResidualAttentionBlock(cfg, 1 + i % 2).double()
        block.reset_parameters(torch.Generator().manual_seed(i))
        names = [n for n, _ in block.named_parameters()]

        def block_fn(x, *ps, block=block, names=names):
            return torch.func.functional_call(block, dict(zip(names, ps)), (x,))

        x = torch.randn(5, 4, generator=gen, dtype=D)
        cases["block"].append((block_fn, [x, *[p.detach().clone() for p in block.parameters()]]))

        w = au_weights(0.05 + 0.9 * torch.rand(5, generator=gen, dtype=D).numpy())
        y = (torch.rand(3, 5, generator=gen) > 0.5).to(D)
        p = 0.05 + 0.9 * torch.rand(3, 5, generator=gen, dtype=D)
        for name, fn in (("bce", bce_loss), ("dice", dice_loss), ("au", au_loss)):
            cases[name].append((lambda q, fn=fn, y=y, w=w: fn(y, q, w), [p]))

        a = torch.rand(1, 3, 8, 8, generator=gen, dtype=D)
        b = torch.rand(1, 3, 8, 8, generator=gen, dtype=D)
        ext = PerceptualExtractor((2, 3), seed=i).double()
        cases["rec"].append((lambda x, b=b: reconstruction_loss(x, b), [a]))
        cases["id"].append((lambda x, b=b: identity_loss(x, b), [a]))
        cases["per"].append((lambda x, b=b, ext=ext: perceptual_loss(x, b, ext), [a]))
        v = torch.rand(4, generator=gen, dtype=D)
        cases["total"].append((lambda v: total_loss(dict(zip(("rec", "id", "per", "au"), v)), LossWeights()), [v]))

    # decoder instances are redrawn when a probe would straddle a ReLU kink
    rejected, draw = 0, 0
    while len(cases["decoder"]) < 20:
        torch.manual_seed(draw)
        draw += 1
        enc = IdentityEncoder((4, 4, 8, 8), 8).double()
        dec = ImageDecoder(8, (4, 4, 8, 8)).double()
        with torch.no_grad():
            _, skips = enc(torch.rand(1, 3, 112, 112, generator=gen, dtype=D))
        f = torch.randn(1, 8, generator=gen, dtype=D)
        if not smooth_at(dec, f, skips):
            rejected += 1
            continue
        # a sparse pixel subset keeps the difference loop short
        cases["decoder"].append((lambda f, dec=dec, skips=skips: dec(f, skips)[..., ::16, ::16], [f]))
    return cases, rejected


def _grad_norm(fn, args):
    inputs = [a.detach().clone().requires_grad_(True) for a in args]
    grads = torch.autograd.grad(fn(*inputs).sum(), inputs, allow_unused=True)
    return sum(0.0 if g is None else g.norm().item() for g in grads)


@criterion(4, "autograd matches central differences (float64)")
def test_gradients(detail):
    start = time.perf_counter()
    worst = {}
    cases, rejected = _grad_cases()
    for name, instances in cases.items():
        assert len(instances) >= 20
        # a dead instance would pass vacuously
        assert all(_grad_norm(fn, args) > 0 for fn, args in instances), name
        worst[name] = max(fd_rel_error(fn, args, seed=i) for i, (fn, args) in enumerate(instances))
    elapsed = time.perf_counter() - start
    detail(f"worst rel err {max(worst.values()):.1e} over {len(worst)} ops x 20, {elapsed:.0f}s, "
           f"{rejected} kink draws skipped")
    assert rejected < 20
    assert all(v < 1e-4 for v in worst.values()), worst
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 5-6: losses and metrics


@criterion(5, "loss fixed points and toy values")
def test_loss_fixed_points(detail):
    y = torch.tensor([[1, 0, 1, 0, 1], [0, 0, 0, 1, 1]], dtype=D)
    ones = np.ones(5)
    assert bce_loss(y, y, ones).item() <= 1e-6
    assert dice_loss(y, y, ones).item() <= 1e-6
    rng = np.random.default_rng(5)
    worst = max(abs(au_weights(rng.uniform(1e-3, 1.0, 5)).sum() - 5) for _ in range(1000))
    assert worst < 1e-9
    np.testing.assert_allclose(au_weights([0.5, 0.25]), [2 / 3, 4 / 3], rtol=1e-12)
    half = bce_loss(torch.tensor([[1.0]], dtype=D), torch.tensor([[0.5]], dtype=D), [1.0]).item()
    assert half == pytest.approx(math.log(2), abs=1e-12)
    total = total_loss({"rec": 0.1, "id": 0.05, "per": 2.0, "au": 0.3}, LossWeights())
    assert total == pytest.approx(0.371, abs=1e-12)
    detail(f"max |sum w - 5| {worst:.1e}")


@criterion(6, "ssim/psnr identities and hand-counted AU scores")
def test_metrics(detail):
    rng = np.random.default_rng(6)
    for _ in range(5):
        a = rng.random((112, 112, 3))
        assert abs(ssim(a, a) - 1) <= 1e-9
    # a uniform 0.1 offset has MSE 0.01
    a = np.full((112, 112, 3), 0.4)
    assert abs(psnr(a, a + 0.1) - 20.0) <= 1e-6
    pred = np.zeros((4, 5))
    gt = np.zeros((4, 5), dtype=int)
    pred[:, 3] = [0.9, 0.4, 0.2, 0.6]
    gt[:, 3] = [1, 1, 0, 0]
    s = au_scores(pred, gt)
    assert (s["tp"][3], s["fp"][3], s["fn"][3], s["tn"][3]) == (1, 1, 1, 1)
    assert s["f1"][3] == 0.5 and s["accuracy"][3] == 0.5
    detail(f"psnr {psnr(a, a + 0.1):.9f} dB")


# ---------------------------------------------------------------------------
# 7-9: desk-scale experiments


def _mean_rec(model, manifest):
    """Eval-mode L1 reconstruction over every train frame."""
    losses = [np.abs(T.generate_frames(model, c.identity_frame, c.mfcc) - c.frames).mean() for c in manifest.train]
    return float(np.mean(losses))


@pytest.fixture(scope="module")
def desk():
    torch.set_num_threads(1)
    start = time.perf_counter()
    manifest = synth_dataset(4, 30, seed=7, n_test=4)
    cfg = C.resolve(preset="desk", overrides=["seed=7", "train.log_every=0"])
    tc, mc = C.train_config(cfg), C.model_config(cfg)
    a2au = T.pretrain_audio2au(manifest, tc, mc, cfg)
    clf = T.pretrain_au_classifier(manifest, tc, mc, cfg)
    trainer = T.FullTrainer(manifest, tc, mc, a2au, clf, cfg)
    rec0 = _mean_rec(trainer.model, manifest)
    trainer.train(DESK_FULL_STEPS)
    rec1 = _mean_rec(trainer.model, manifest)
    return {
        "manifest": manifest, "tc": tc, "mc": mc, "a2au": a2au, "clf": clf, "trainer": trainer,
        "rec": (rec0, rec1), "seconds": time.perf_counter() - start,
    }


@criterion(7, "desk end-to-end: AU25 F1, classifier accuracy, rec loss, runtime")
def test_desk_end_to_end(desk, detail):
    f1_au25 = desk["a2au"].meta["report"]["test"]["f1"][3]
    clf_acc = desk["clf"].meta["report"]["train"]["avg_accuracy"]
    rec0, rec1 = desk["rec"]
    detail(f"AU25 F1 {f1_au25:.3f}, clf acc {clf_acc:.3f}, rec {rec0:.4f}->{rec1:.4f} "
           f"({100 * rec1 / rec0:.1f}%) in {DESK_FULL_STEPS} steps, {desk['seconds']:.0f}s")
    assert f1_au25 >= 0.9
    assert clf_acc >= 0.9
    assert DESK_FULL_STEPS <= 2000
    assert rec1 < 0.25 * rec0
    assert desk["seconds"] <= 20 * 60


@criterion(8, "full variant AU accuracy >= baseline, 3-seed majority")
def test_directional_ablation(desk, detail):
    wins = 0
    for seed in ABLATION_SEEDS:
        tc = dataclasses.replace(desk["tc"], seed=seed)
        acc = {}
        for variant in ("full", "baseline"):
            report, _ = T.run_ablation(desk["manifest"], variant, tc, desk["mc"], desk["a2au"], desk["clf"],
                                       steps=ABLATION_STEPS)
            acc[variant] = report.avg_accuracy
        wins += acc["full"] >= acc["baseline"]
        detail(f"seed {seed}: {acc['full']:.3f} vs {acc['baseline']:.3f}")
    assert wins >= 2


@criterion(9, "silent audio keeps the mouth still")
def test_silent_audio(desk, detail):
    model = desk["trainer"].model
    ratios = []
    for clip in desk["manifest"].train + desk["manifest"].test:
        silent = AudioTrack(np.zeros_like(clip.audio.samples), clip.audio.sample_rate)

        def mouth_var(video):
            return float(video[:, MOUTH_BOX[0], MOUTH_BOX[1]].var(axis=0).mean())

        speech = mouth_var(T.generate_video(clip.identity_frame, clip.audio, model))
        quiet = mouth_var(T.generate_video(clip.identity_frame, silent, model))
        assert quiet < speech, clip.clip_id
        ratios.append(quiet / speech)
    detail(f"silent/speech variance ratio max {max(ratios):.3f} over {len(ratios)} identities")


# ---------------------------------------------------------------------------
# 10: reproducibility


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "run.json"}


def _cli_pipeline(root):
    tiny = TINY_OVERRIDES + ["train.steps=3"]
    d = str(root / "d")
    steps = [
        ["synth-data", "--clips", "2", "--test-clips", "1", "--frames", "6", "--seed", "7", "--out", d],
        ["pretrain-a2au", "--data", d, "--out", str(root / "a"), *tiny],
        ["pretrain-auclf", "--data", d, "--out", str(root / "c"), *tiny],
        ["train", "--data", d, "--a2au", str(root / "a/ckpt_00000006.bin"),
         "--auclf", str(root / "c/ckpt_00000006.bin"), "--out", str(root / "t"), *tiny],
        ["evaluate", "--ckpt", str(root / "t/ckpt_00000003.bin"), "--data", d, "--out", str(root / "e")],
        ["generate", "--ckpt", str(root / "t/ckpt_00000003.bin"), "--identity", str(root / "d/test_0000/frames/000000.png"),
         "--audio", str(root / "d/test_0000/audio.wav"), "--out", str(root / "g")],
        ["diffmap", "--ckpt", str(root / "t/ckpt_00000003.bin"), "--data", d, "--clip", "test_0000",
         "--out", str(root / "m")],
        ["ablate", "--data", d, "--a2au", str(root / "a/ckpt_00000006.bin"),
         "--auclf", str(root / "c/ckpt_00000006.bin"), "--variant", "full", "--variant", "baseline",
         "--out", str(root / "b"), *TINY_OVERRIDES, "train.steps=2"],
    ]
    for argv in steps:
        assert run(argv) == 0, argv[0]
    return [s[0] for s in steps]


@criterion(10, "bit-identical reruns and exact resume")
def test_reproducibility(tmp_path, detail):
    names = _cli_pipeline(tmp_path / "r1")
    _cli_pipeline(tmp_path / "r2")
    first, second = _tree_bytes(tmp_path / "r1"), _tree_bytes(tmp_path / "r2")
    assert first.keys() == second.keys()
    differing = [k for k in first if first[k] != second[k]]
    assert not differing, differing
    assert any(k.endswith(".bin") for k in first) and any(k.endswith(".csv") for k in first)

    # resume from a mid-run checkpoint through the CLI
    root = tmp_path / "r1"
    common = ["--data", str(root / "d"), "--a2au", str(root / "a/ckpt_00000006.bin"),
              "--auclf", str(root / "c/ckpt_00000006.bin"), *TINY_OVERRIDES]
    assert run(["train", *common, "--out", str(tmp_path / "u"), "train.steps=4"]) == 0
    assert run(["train", *common, "--out", str(tmp_path / "h"), "train.steps=2"]) == 0
    assert run(["train", *common, "--out", str(tmp_path / "h"), "train.steps=4",
                "--resume", str(tmp_path / "h/ckpt_00000002.bin")]) == 0
    whole = Checkpoint.load(tmp_path / "u/ckpt_00000004.bin")
    resumed = Checkpoint.load(tmp_path / "h/ckpt_00000004.bin")
    assert whole.meta["loss_history"] == resumed.meta["loss_history"]
    assert (tmp_path / "u/ckpt_00000004.bin").read_bytes() == (tmp_path / "h/ckpt_00000004.bin").read_bytes()
    assert (tmp_path / "u/train_log.csv").read_bytes() == (tmp_path / "h/train_log.csv").read_bytes()
    detail(f"{len(first)} files identical across {len(names)} subcommands; resume 2+2 == 4 steps")
