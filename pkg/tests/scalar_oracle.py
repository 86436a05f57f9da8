"""Pure-Python reference for the four training losses, used as an independent oracle."""

import math

import numpy as np

from styleagnostic import numcore as nc
from styleagnostic.numcore import Tensor
from styleagnostic.stylestats import EPS_STATS, content_randomize, style_randomize
from styleagnostic.training import adversarial_loss, consistency_from_logp, content_loss, one_hot, style_loss


def _py_stats(ch, eps):
    vals = [v for row in ch for v in row]
    m = sum(vals) / len(vals)
    return m, math.sqrt(sum((v - m) ** 2 for v in vals) / len(vals) + eps)


def _py_logsoftmax(row):
    top = max(row)
    s = sum(math.exp(v - top) for v in row)
    return [v - top - math.log(s) for v in row]


def _py_head(maps, W, b):
    """Global average pooling, linear layer, log-softmax on nested lists."""
    out = []
    for sample in maps:
        pooled = [sum(v for row in ch for v in row) / (len(ch) * len(ch[0])) for ch in sample]
        logits = [sum(W[k][j] * pooled[j] for j in range(len(pooled))) + b[k] for k in range(len(W))]
        out.append(_py_logsoftmax(logits))
    return out


def _py_sr(z, perm, alpha, eps):
    out = []
    for i, sample in enumerate(z):
        chans = []
        for d, ch in enumerate(sample):
            m, s = _py_stats(ch, eps)
            mp, sp = _py_stats(z[perm[i]][d], eps)
            mu = alpha[i] * m + (1 - alpha[i]) * mp
            sg = alpha[i] * s + (1 - alpha[i]) * sp
            chans.append([[sg * (v - m) / s + mu for v in row] for row in ch])
        out.append(chans)
    return out


def _py_cr(z, perm, eps):
    out = []
    for i, sample in enumerate(z):
        chans = []
        for d, ch in enumerate(sample):
            m, s = _py_stats(ch, eps)
            src = z[perm[i]][d]
            mp, sp = _py_stats(src, eps)
            chans.append([[s * (v - mp) / sp + m for v in row] for row in src])
        out.append(chans)
    return out


def loss_fixture_errors(seed, lam_adv=0.7, lam_unl=0.01):
    """|vectorized - scalar| for each loss on one random fixture batch."""
    rng = np.random.default_rng(seed)
    n, d, k = 4, 3, 5
    z = rng.normal(0, 1, (n, d, 3, 3)) * rng.uniform(0.5, 2, (n, d, 1, 1)) + rng.normal(0, 1, (n, d, 1, 1))
    W, b = rng.normal(0, 1, (k, d)), rng.normal(0, 0.1, k)
    labels = rng.integers(0, k, n)
    perm = rng.permutation(n)
    alpha = rng.uniform(0, 1, n)

    def head(t):
        return nc.log_softmax(nc.linear(nc.global_avg_pool(t), Tensor(W), Tensor(b)), axis=1)

    Z = Tensor(z)
    Zp = nc.take(Z, perm, axis=0)
    y = one_hot(labels, k)
    got = {
        "content": content_loss(head(style_randomize(Z, Zp, alpha, EPS_STATS)), y).item(),
        "style": style_loss(head(content_randomize(Z, Zp, EPS_STATS)), y).item(),
        "adv": adversarial_loss(head(content_randomize(Z, Zp, EPS_STATS)), lam_adv).item(),
        "unl": consistency_from_logp(head(style_randomize(Z, Zp, alpha, EPS_STATS)), head(Z), lam_unl).item(),
    }

    zl = z.tolist()
    Wl, bl = W.tolist(), b.tolist()
    lp_sr = _py_head(_py_sr(zl, perm, alpha, EPS_STATS), Wl, bl)
    lp_cr = _py_head(_py_cr(zl, perm, EPS_STATS), Wl, bl)
    lp_plain = _py_head(zl, Wl, bl)
    want = {
        "content": -sum(lp_sr[i][labels[i]] for i in range(n)) / n,
        "style": -sum(lp_cr[i][labels[i]] for i in range(n)) / n,
        "adv": -lam_adv * sum(sum(row) / k for row in lp_cr) / n,
        "unl": lam_unl * sum(sum((math.exp(a) - math.exp(c)) ** 2 for a, c in zip(r1, r2))
                             for r1, r2 in zip(lp_sr, lp_plain)) / n,
    }
    return {name: abs(got[name] - want[name]) for name in want}
