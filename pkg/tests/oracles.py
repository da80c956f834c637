"""Slow, direct reference implementations used as test oracles."""

import math

import numpy as np


def mhsa_loop(x, wq, wk, wv, r, heads):
    """Attention evaluated one (head, query, key) triple at a time, float64."""
    n, dim, t, h, w = x.shape
    d = dim // heads
    pos = [(a, b, c) for a in range(t) for b in range(h) for c in range(w)]
    x = x.astype(np.float64)
    out = np.zeros(x.shape)
    for b in range(n):
        feats = [x[b, :, a, i, j] for a, i, j in pos]
        q = [wq[:, :, 0, 0, 0] @ f for f in feats]
        k = [wk[:, :, 0, 0, 0] @ f for f in feats]
        v = [wv[:, :, 0, 0, 0] @ f for f in feats]
        if r is not None:
            rr = np.broadcast_to(r, (t, dim, h, w))
            k = [k[p] + rr[a, :, i, j] for p, (a, i, j) in enumerate(pos)]
        for head in range(heads):
            s = slice(head * d, (head + 1) * d)
            for pi, (a, i, j) in enumerate(pos):
                logits = [float(np.dot(q[pi][s], k[pj][s])) / math.sqrt(d) for pj in range(len(pos))]
                m = max(logits)
                e = [math.exp(z - m) for z in logits]
                tot = sum(e)
                out[b, s, a, i, j] = sum(e[pj] / tot * v[pj][s] for pj in range(len(pos)))
    return out


def metrics_loop(preds, targets):
    """MAE, RMSE and MAPE accumulated one patient at a time."""
    n = len(preds)
    abs_sum = sq_sum = pct_sum = 0.0
    for p, t in zip(preds, targets):
        e = float(p) - float(t)
        abs_sum += abs(e)
        sq_sum += e * e
        pct_sum += abs(e) / float(t)
    return abs_sum / n, math.sqrt(sq_sum / n), 100.0 * pct_sum / n
