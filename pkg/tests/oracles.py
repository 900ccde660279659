"""Independent reference implementations used as test oracles."""

import itertools

import numpy as np


def collapse(path, blank=0):
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def ctc_brute_force_logprob(log_probs, target, blank=0):
    """log P(target) by summing every length-T path that collapses to ``target``."""
    T, V = log_probs.shape
    terms = [sum(log_probs[t, s] for t, s in enumerate(path))
             for path in itertools.product(range(V), repeat=T) if collapse(path, blank) == list(target)]
    if not terms:
        return -np.inf
    return float(np.logaddexp.reduce(terms))


def smoothed_ce(logits, targets, mask, eps):
    total, count = 0.0, 0
    for row, t, m in zip(logits, targets, mask):
        if not m:
            continue
        p = np.exp(row - row.max())
        p /= p.sum()
        q = np.full(len(row), eps / len(row))
        q[t] += 1 - eps
        total += float(-(q * np.log(p)).sum())
        count += 1
    return total / count


def edit_distance(ref, hyp):
    """Classic Levenshtein table; returns the minimum edit count."""
    d = [[0] * (len(hyp) + 1) for _ in range(len(ref) + 1)]
    for i in range(len(ref) + 1):
        d[i][0] = i
    for j in range(len(hyp) + 1):
        d[0][j] = j
    for i in range(1, len(ref) + 1):
        for j in range(1, len(hyp) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]))
    return d[-1][-1]


def zero_context_decoder_logprobs(params, cfg, tokens):
    """Plain-numpy decoder pass with the cross-attention context forced to zero.

    ``params`` maps names to arrays; returns final-classifier log-probs for each
    position of ``tokens`` (which start with BOS).
    """
    P = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    n = len(tokens)

    def ln(x, p):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * P[p + ".gain"] + P[p + ".bias"]

    def lin(x, p):
        return x @ P[p + ".weight"] + P[p + ".bias"]

    pos = np.arange(n)[:, None] / np.power(10000.0, np.arange(0, d, 2)[None, :] / d)
    pe = np.zeros((n, d))
    pe[:, 0::2], pe[:, 1::2] = np.sin(pos), np.cos(pos[:, : d // 2])
    x = P["decoder.embed"][tokens] + pe
    for i in range(1, cfg.D + 1):
        p = f"decoder.{i}"
        h = ln(x, p + ".norm1")
        q, k, v = (lin(h, f"{p}.self_attn.{m}").reshape(n, H, dh).transpose(1, 0, 2) for m in "qkv")
        s = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
        s = np.where(np.triu(np.ones((n, n), bool), 1), -np.inf, s)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        x = x + lin((a @ v).transpose(1, 0, 2).reshape(n, d), f"{p}.self_attn.o")
        x = x + lin(np.zeros((n, d)), f"{p}.cross_attn.o")
        h = ln(x, p + ".norm3")
        x = x + np.maximum(h @ P[p + ".ff.w1"] + P[p + ".ff.b1"], 0) @ P[p + ".ff.w2"] + P[p + ".ff.b2"]
    rep = ln(x, "decoder.norm")
    logits = rep @ P[f"classifier.{cfg.D}.weight"] + P.get(f"classifier.{cfg.D}.bias", 0.0)
    return logits - np.logaddexp.reduce(logits, axis=-1, keepdims=True)
