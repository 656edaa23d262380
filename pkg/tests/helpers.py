"""Brute-force oracles and the finite-difference gradient checker.

Everything here is deliberately naive (explicit loops, two-pass formulas)
and stays independent of the library code paths it is used to verify.
"""

import numpy as np

from fewshot import autodiff as ad
from fewshot import model as M
from fewshot.episodes import Episode


# ---------------------------------------------------------------------------
# layer oracles


def conv2d_oracle(x, kernel, bias):
    """Sliding-window 3x3 convolution by sextuple loop (pad 1, stride 1)."""
    n, cin, h, w = x.shape
    cout = kernel.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, cout, h, w))
    for b in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(w):
                    acc = bias[o]
                    for c in range(cin):
                        for di in range(3):
                            for dj in range(3):
                                acc += kernel[o, c, di, dj] * xp[b, c, i + di, j + dj]
                    out[b, o, i, j] = acc
    return out


def batchnorm_oracle(x, gamma, beta, eps=1e-5):
    """Two-pass per-channel mean/variance normalization."""
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        vals = x[:, c, :, :]
        mu = vals.sum() / vals.size
        var = ((vals - mu) ** 2).sum() / vals.size
        out[:, c, :, :] = gamma[c] * (vals - mu) / np.sqrt(var + eps) + beta[c]
    return out


def maxpool2_oracle(x):
    """Window-by-window 2x2 max, floor semantics."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[b, ch, i, j] = x[b, ch, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    return out


def linear_oracle(x, weight, bias):
    """Triple-loop matrix product x @ weight.T + bias."""
    n, d = x.shape
    m = weight.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = bias[j]
            for k in range(d):
                acc += x[i, k] * weight[j, k]
            out[i, j] = acc
    return out


def softmax_oracle(v):
    """Direct exp/normalize along the last axis."""
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def rotate90_oracle(img):
    """One 90-degree counterclockwise rotation by index permutation."""
    ch, h, w = img.shape
    out = np.empty((ch, w, h))
    for c in range(ch):
        for i in range(w):
            for j in range(h):
                out[c, i, j] = img[c, j, w - 1 - i]
    return out


def resize_bilinear_oracle(img, out_h, out_w):
    """Scalar-loop bilinear resize with the half-pixel source mapping."""
    ch, h, w = img.shape
    out = np.empty((ch, out_h, out_w))
    for c in range(ch):
        for i in range(out_h):
            sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
            y0 = int(np.floor(sy))
            y1 = min(y0 + 1, h - 1)
            fy = sy - y0
            for j in range(out_w):
                sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
                x0 = int(np.floor(sx))
                x1 = min(x0 + 1, w - 1)
                fx = sx - x0
                top = img[c, y0, x0] * (1 - fx) + img[c, y0, x1] * fx
                bot = img[c, y1, x0] * (1 - fx) + img[c, y1, x1] * fx
                out[c, i, j] = top * (1 - fy) + bot * fy
    return out


def adam_oracle_step(p, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Reference Adam update on plain floats/arrays; returns new values."""
    t = t + 1
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    return p - lr * mhat / (np.sqrt(vhat) + eps), m, v, t


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(a, b, floor=1e-2):
    """|a-b| scaled by max(|a|, |b|, floor); the floor keeps near-zero
    gradients from inflating the ratio past what h=1e-4 central
    differences can resolve."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_grads(loss_fn, arrays, h=1e-4):
    """Central differences of loss_fn() w.r.t. every entry of each array.

    ``loss_fn`` must read the (mutated) arrays on every call.
    """
    grads = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            g[i] = (lp - lm) / (2 * h)
        grads[name] = g.reshape(arr.shape)
    return grads


def check_grads_match(analytic, numeric, tol=1e-4):
    """Max relative error across all named gradients; asserts < tol."""
    worst = 0.0
    worst_name = None
    for name in numeric:
        err = relative_error(analytic[name], numeric[name]).max()
        if err > worst:
            worst, worst_name = err, name
    assert worst < tol, f"gradient mismatch on '{worst_name}': rel err {worst:.3e}"
    return worst


# ---------------------------------------------------------------------------
# tiny fixtures


def tiny_model(rng_seed=0, ways=2, shots=2, embed_channels=3, attn_channels=4,
               image_size=24, dropout_keep=0.5):
    config = M.ModelConfig(
        in_channels=1,
        image_size=image_size,
        embed_channels=embed_channels,
        attn_channels=attn_channels,
        m_max=max(ways, shots),
        last_pool=False,
        dropout_keep=dropout_keep,
    )
    params = M.init_params(config, np.random.default_rng(rng_seed))
    return config, params


def random_episode(rng, ways=2, shots=2, n_query=2, image_size=24, in_channels=1):
    def batch(count):
        return rng.uniform(0.0, 1.0, size=(count, in_channels, image_size, image_size))

    sup_y = np.repeat(np.arange(ways), shots)
    qry_y = np.repeat(np.arange(ways), n_query)
    return Episode(
        support_x=batch(ways * shots),
        support_y=sup_y,
        query_x=batch(ways * n_query),
        query_y=qry_y,
        class_map={c: c for c in range(ways)},
        support_refs=[(c, i) for c in range(ways) for i in range(shots)],
        query_refs=[(c, i) for c in range(ways) for i in range(n_query)],
        ways=ways,
        shots=shots,
    )


def episode_loss_value(episode, params, config, mask=None, seed=0, aggregation="attention"):
    rng = np.random.default_rng(seed)
    return M.episode_loss(episode, params, config, mask=mask, rng=rng, aggregation=aggregation).item()


def analytic_episode_grads(episode, params, config, mask=None, seed=0, aggregation="attention"):
    g = ad.Graph()
    watched = M.watch(params, g)
    rng = np.random.default_rng(seed)
    loss = M.episode_loss(episode, watched, config, mask=mask, rng=rng, aggregation=aggregation)
    g.backward(loss)
    return M.grads_of(watched), loss.item()
