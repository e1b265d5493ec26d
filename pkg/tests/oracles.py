"""Independent reference implementations and a finite-difference checker."""

import math

import numpy as np
import torch


def naive_conv(x, weight, bias, d):
    """Direct triple loop: y[s, o] = b[o] + sum_i sum_c F[i, c, o] x[s + d((k-1)/2 - i), c]."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    k, c_in, c_out = weight.shape
    t = x.shape[0]
    y = np.zeros((t, c_out))
    for s in range(t):
        for o in range(c_out):
            acc = 0.0 if bias is None else float(bias[o])
            for i in range(k):
                src = s + d * ((k - 1) // 2 - i)
                if 0 <= src < t:
                    for c in range(c_in):
                        acc += weight[i, c, o] * x[src, c]
            y[s, o] = acc
    return y


def naive_attention(z, heads, w_qkv, b_qkv, w_out, b_out):
    """Per-head loops over explicit head slices, softmax written out by hand."""
    z = np.asarray(z, dtype=np.float64)
    n, dim = z.shape
    dh = dim // heads
    q = z @ w_qkv[0] + b_qkv[0]
    k = z @ w_qkv[1] + b_qkv[1]
    v = z @ w_qkv[2] + b_qkv[2]
    concat = np.zeros((n, dim))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for a in range(n):
            logits = np.array([np.dot(q[a, sl], k[b, sl]) / math.sqrt(dh) for b in range(n)])
            e = np.exp(logits - logits.max())
            p = e / e.sum()
            concat[a, sl] = sum(p[b] * v[b, sl] for b in range(n))
    return concat @ w_out + b_out


def fd_rel_error(fn, inputs, eps=1e-5, seed=0):
    """Relative error between autograd and central differences of <fn(*inputs), R>.

    ``inputs`` are float64 tensors; R is a fixed random projection so every
    output element contributes.
    """
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    gen = torch.Generator().manual_seed(seed)
    r = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    grads = torch.autograd.grad((out * r).sum(), inputs, allow_unused=True)
    worst = 0.0
    for t, g in zip(inputs, grads):
        g = torch.zeros_like(t) if g is None else g
        fd = torch.zeros_like(t)
        flat = t.detach().view(-1)
        for j in range(flat.numel()):
            base = [u.detach() for u in inputs]
            orig = flat[j].item()
            flat[j] = orig + eps
            plus = (fn(*base) * r).sum().item()
            flat[j] = orig - eps
            minus = (fn(*base) * r).sum().item()
            flat[j] = orig
            fd.view(-1)[j] = (plus - minus) / (2 * eps)
        scale = max(g.norm().item(), fd.norm().item(), 1e-12)
        worst = max(worst, (g - fd).norm().item() / scale)
    return worst


def decoder_active_set(dec, f, skips):
    """Boolean ReLU on/off pattern of an ImageDecoder forward pass, re-traced by hand."""
    with torch.no_grad():
        pre = dec.fc(f)
        masks = [pre > 0]
        x = torch.relu(pre).view(f.shape[0], dec.channels[-1], dec.side, dec.side)
        for i, (layer, j) in enumerate(zip(dec.layers, dec.skip_index)):
            if j is not None:
                x = torch.cat([x, skips[j].expand(x.shape[0], -1, -1, -1)], dim=1)
            pre = layer(x)
            if i == len(dec.layers) - 1:
                break
            masks.append(pre > 0)
            x = torch.relu(pre)
    return torch.cat([m.reshape(-1) for m in masks])


def smooth_at(dec, f, skips, eps=1e-5):
    """True when no central-difference probe of ``f`` crosses a ReLU kink."""
    base = decoder_active_set(dec, f, skips)
    for j in range(f.numel()):
        for sign in (1.0, -1.0):
            g = f.clone()
            g.view(-1)[j] += sign * eps
            if not torch.equal(decoder_active_set(dec, g, skips), base):
                return False
    return True
