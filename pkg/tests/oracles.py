"""Independent reference computations shared by module tests and the acceptance suite.

Everything here is written with plain Python loops and ``math`` so it shares
no code path with the vectorised implementations under test.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------
def gradient_check(module, scalar_fn, eps: float = 1e-6, abs_floor: float = 1e-5):
    """Worst relative error per parameter tensor between backprop and central differences.

    ``scalar_fn()`` must rebuild the graph from the module's current parameters
    and return a scalar Tensor.  Differences carry roundoff near 1e-10 at this
    step size, so entries smaller than ``abs_floor`` are measured against the
    floor instead of their own magnitude.
    """
    module.zero_grad()
    scalar_fn().backward()
    analytic = {name: np.array(p.grad) for name, p in module.named_parameters()}
    worst = {}
    for name, p in module.named_parameters():
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            old = p.data[idx]
            p.data[idx] = old + eps
            up = scalar_fn().item()
            p.data[idx] = old - eps
            down = scalar_fn().item()
            p.data[idx] = old
            numeric[idx] = (up - down) / (2 * eps)
        a = analytic[name]
        err = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), abs_floor)
        worst[name] = float(err.max())
    return worst


# ---------------------------------------------------------------------------
# decoder loss
# ---------------------------------------------------------------------------
def decoder_loss(logits, labels, recon, targets, mask, alpha, beta):
    """alpha * mean CE + beta * (mean over masked bands of per-band channel MSE)."""
    logits = np.atleast_2d(logits)
    ce = 0.0
    for row, y in zip(logits.tolist(), np.atleast_1d(labels).tolist()):
        top = max(row)
        log_z = top + math.log(sum(math.exp(v - top) for v in row))
        ce += log_z - row[y]
    ce /= len(logits)
    total = alpha * ce
    if beta > 0 and mask is not None and np.sum(mask) > 0:
        acc, count = 0.0, 0
        for b in range(len(mask)):
            for d in range(len(mask[b])):
                if mask[b][d]:
                    sq = [(r - t) ** 2 for r, t in zip(recon[b][d], targets[b][d])]
                    acc += sum(sq) / len(sq)
                    count += 1
        total += beta * acc / count
    return total


# ---------------------------------------------------------------------------
# motion tokenizer and language model
# ---------------------------------------------------------------------------
def brute_force_code(z, codes):
    """Exhaustive scan; a later code wins only on a strictly smaller distance."""
    best, best_d = 0, math.inf
    for i, c in enumerate(codes):
        d = sum((a - b) ** 2 for a, b in zip(z, c))
        if d < best_d:
            best, best_d = i, d
    return best


def _mlp(x, first, second):
    """tanh(x W1 + b1) W2 + b2 on python lists."""
    w1, b1 = first.weight.data.tolist(), first.bias.data.tolist()
    w2, b2 = second.weight.data.tolist(), second.bias.data.tolist()
    h = [math.tanh(sum(x[i] * w1[i][j] for i in range(len(x))) + b1[j]) for j in range(len(b1))]
    return [sum(h[i] * w2[i][j] for i in range(len(h))) + b2[j] for j in range(len(b2))]


def vqvae_terms(x, codebook):
    """Batch means of ||x - D(e_k)||^2, ||E(x) - e_k||^2 and beta_vq ||E(x) - e_k||^2."""
    codes = codebook.codes.data.tolist()
    rec = cb = 0.0
    for row in np.atleast_2d(x).tolist():
        z = _mlp(row, codebook.enc1, codebook.enc2)
        e = codes[brute_force_code(z, codes)]
        out = _mlp(e, codebook.dec1, codebook.dec2)
        rec += sum((a - b) ** 2 for a, b in zip(row, out))
        cb += sum((a - b) ** 2 for a, b in zip(z, e))
    n = len(np.atleast_2d(x))
    return {"reconstruction": rec / n, "codebook": cb / n, "commitment": codebook.beta_vq * cb / n}


def lm_nll(model, x_s, x_t):
    """Sum of -log p(x_t[i] | prefix) with each prefix fed on its own (no causal masking involved)."""
    prefix = list(x_s) + [model.bos]
    total = 0.0
    for tok in x_t:
        p = model.next_token_probs(prefix)
        total -= math.log(p[tok])
        prefix.append(tok)
    return total


# ---------------------------------------------------------------------------
# AMP discriminator loss
# ---------------------------------------------------------------------------
def _disc_value_and_input_grad(x, disc):
    """D(x) and dD/dx for the three-layer tanh discriminator, by the chain rule on lists."""
    w1, b1 = disc.l1.weight.data.tolist(), disc.l1.bias.data.tolist()
    w2, b2 = disc.l2.weight.data.tolist(), disc.l2.bias.data.tolist()
    w3, b3 = disc.out.weight.data.tolist(), disc.out.bias.data.tolist()
    h1 = [math.tanh(sum(x[i] * w1[i][j] for i in range(len(x))) + b1[j]) for j in range(len(b1))]
    h2 = [math.tanh(sum(h1[i] * w2[i][j] for i in range(len(h1))) + b2[j]) for j in range(len(b2))]
    d = sum(h2[i] * w3[i][0] for i in range(len(h2))) + b3[0]
    back2 = [(1 - h2[j] ** 2) * w3[j][0] for j in range(len(h2))]
    back1 = [(1 - h1[i] ** 2) * sum(w2[i][j] * back2[j] for j in range(len(h2))) for i in range(len(h1))]
    grad = [sum(w1[k][i] * back1[i] for i in range(len(h1))) for k in range(len(x))]
    return d, grad


def amp_loss(real, fake, disc, grad_penalty):
    """1/2 E_real (D - 1)^2 + 1/2 E_policy (D + 1)^2 + lambda E_real ||dD/dx||^2."""
    lsq = pen = 0.0
    real = np.atleast_2d(real).tolist()
    fake = np.atleast_2d(fake).tolist()
    for row in real:
        d, g = _disc_value_and_input_grad(row, disc)
        lsq += 0.5 * (d - 1) ** 2 / len(real)
        pen += sum(v * v for v in g) / len(real)
    for row in fake:
        d, _ = _disc_value_and_input_grad(row, disc)
        lsq += 0.5 * (d + 1) ** 2 / len(fake)
    return lsq + grad_penalty * pen
