"""Slow, loop-based reference implementations used only by the tests."""
import itertools
import math

import numpy as np


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def attention_oracle(query, key, value, heads, p):
    """Scaled dot-product attention with explicit per-head, per-query loops."""
    d, tq = query.shape
    tk = key.shape[1]
    dh = d // heads
    q = p["wq"] @ query + p["bq"][:, None]
    k = p["wk"] @ key + p["bk"][:, None]
    v = p["wv"] @ value + p["bv"][:, None]
    ctx = np.zeros((d, tq))
    for h in range(heads):
        rows = slice(h * dh, (h + 1) * dh)
        for j in range(tq):
            logits = [float(q[rows, j] @ k[rows, i]) / math.sqrt(dh) for i in range(tk)]
            m = max(logits)
            w = [math.exp(s - m) for s in logits]
            z = sum(w)
            for i in range(tk):
                ctx[rows, j] += (w[i] / z) * v[rows, i]
    return p["wo"] @ ctx + p["bo"][:, None]


def lstm_oracle(x, h, c, p):
    """One LSTM step computed gate by gate (gate order i, f, g, o)."""
    d = h.shape[0]
    z = p["w_ih"] @ x + p["w_hh"] @ h + p["b_ih"] + p["b_hh"]
    c_new, h_new = np.zeros(d), np.zeros(d)
    for j in range(d):
        i, f = sig(z[j]), sig(z[d + j])
        g, o = math.tanh(z[2 * d + j]), sig(z[3 * d + j])
        c_new[j] = f * c[j] + i * g
        h_new[j] = o * math.tanh(c_new[j])
    return h_new, c_new


def eda_oracle(e, p, num_speakers):
    """Encoder LSTM over the columns of ``e``, then decoder on zero inputs."""
    d, t = e.shape
    enc = {k[4:]: v for k, v in p.items() if k.startswith("enc.")}
    dec = {k[4:]: v for k, v in p.items() if k.startswith("dec.")}
    h, c = np.zeros(d), np.zeros(d)
    for i in range(t):
        h, c = lstm_oracle(e[:, i], h, c, enc)
    cols = []
    for _ in range(num_speakers):
        h, c = lstm_oracle(np.zeros(d), h, c, dec)
        cols.append(h)
    a = np.stack(cols, axis=1)
    logits = np.array([float(p["exist.weight"][0] @ a[:, k] + p["exist.bias"][0])
                       for k in range(num_speakers)])
    return a, logits


def na_oracle(e, p, heads):
    attn = {k[5:]: v for k, v in p.items() if k.startswith("attn.")}
    return attention_oracle(p["queries"].T, e, e, heads, attn)


def bce_scalar(y, p, eps=1e-7):
    p = min(max(p, eps), 1 - eps)
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def pit_oracle(y_true, y_pred):
    """Brute force over all permutations; returns (loss, permutation)."""
    c, t = y_true.shape
    best = None
    for perm in itertools.permutations(range(c)):
        total = sum(bce_scalar(y_true[perm[k], j], y_pred[k, j]) for k in range(c) for j in range(t))
        loss = total / (c * t)
        if best is None or loss < best[0]:
            best = (loss, perm)
    return best
