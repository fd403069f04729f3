"""Brute-force reference implementations (pure Python loops) for the evaluation metrics."""

import math


def cos(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    return dot / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))


def oracle_retrieval(src, tgt):
    hits = 0
    for i in range(len(src)):
        best, arg = -2.0, -1
        for j in range(len(tgt)):
            c = cos(src[i], tgt[j])
            if c > best:
                best, arg = c, j
        hits += arg == i
    return hits / len(src)


def oracle_margin(src, tgt, k):
    n, m = len(src), len(tgt)
    c = [[cos(src[i], tgt[j]) for j in range(m)] for i in range(n)]
    fwd = [sum(sorted(c[i], reverse=True)[:k]) / k for i in range(n)]
    bwd = [sum(sorted((c[i][j] for i in range(n)), reverse=True)[:k]) / k for j in range(m)]
    return [[c[i][j] / (fwd[i] + bwd[j]) for j in range(m)] for i in range(n)]


def oracle_predict(cands, gamma):
    best = {}
    for i, j, s in cands:
        if s >= gamma and (i not in best or s > best[i][1]):
            best[i] = (j, s)
    return {(i, j) for i, (j, _) in best.items()}


def oracle_prf(pred, gold):
    tp = len(pred & gold)
    p = tp / len(pred) if pred else 0.0
    r = tp / len(gold) if gold else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def oracle_threshold(cands, gold):
    u = sorted(set(s for _, _, s in cands))
    grid = [u[0] - 1.0] + [(a + b) / 2 for a, b in zip(u, u[1:])] + [u[-1] + 1.0]
    best = (None, -1.0)
    for g in grid:
        f = oracle_prf(oracle_predict(cands, g), gold)[2]
        if f >= best[1]:
            best = (g, f)
    return best
