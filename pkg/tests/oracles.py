"""Independent reference implementations used as test oracles.

These are written with plain Python loops and the math module so they share
no code path with the library under test.
"""
from __future__ import annotations

import math
from fractions import Fraction


def _sig(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))


def _conv_across(K, s, p, c, pad, P):
    """sum_{c', dk} K[c][c'][dk] * s[c'][p + dk - pad], zero outside 0..P-1."""
    total = 0.0
    for cp in range(len(s)):
        for dk in range(len(K[c][cp])):
            q = p + dk - pad
            if 0 <= q < P:
                total += K[c][cp][dk] * s[cp][q]
    return total


def sweep_oracle(u, direction: str, prm):
    """Scalar recurrence over ``u[C][H][W]`` (nested lists); returns nested lists.

    ``prm`` maps Kz, Kr, Kc, Lz, Lr, Lc (``[C][C][k]``) and bz, br, bc (``[C]``).
    """
    C, H, W = len(u), len(u[0]), len(u[0][0])
    horizontal = direction in ("LR", "RL")
    T, P = (W, H) if horizontal else (H, W)
    k = len(prm["Kz"][0][0])
    pad = (k - 1) // 2

    def at(t, p):
        if direction == "LR":
            return p, t
        if direction == "RL":
            return p, W - 1 - t
        if direction == "UD":
            return t, p
        return H - 1 - t, p

    out = [[[0.0] * W for _ in range(H)] for _ in range(C)]
    h = [[0.0] * P for _ in range(C)]
    for t in range(T):
        ut = [[u[c][at(t, p)[0]][at(t, p)[1]] for p in range(P)] for c in range(C)]
        r = [[_sig(_conv_across(prm["Kr"], h, p, c, pad, P) + _conv_across(prm["Lr"], ut, p, c, pad, P)
                   + prm["br"][c]) for p in range(P)] for c in range(C)]
        z = [[_sig(_conv_across(prm["Kz"], h, p, c, pad, P) + _conv_across(prm["Lz"], ut, p, c, pad, P)
                   + prm["bz"][c]) for p in range(P)] for c in range(C)]
        rh = [[r[c][p] * h[c][p] for p in range(P)] for c in range(C)]
        cand = [[math.tanh(_conv_across(prm["Kc"], rh, p, c, pad, P) + _conv_across(prm["Lc"], ut, p, c, pad, P)
                           + prm["bc"][c]) for p in range(P)] for c in range(C)]
        h = [[(1 - z[c][p]) * h[c][p] + z[c][p] * cand[c][p] for p in range(P)] for c in range(C)]
        for c in range(C):
            for p in range(P):
                i, j = at(t, p)
                out[c][i][j] = h[c][p]
    return out


def conv2d_oracle(x, K, b=None):
    """Same-padded cross-correlation of ``x[C][H][W]`` with ``K[O][C][k][k]``."""
    C, H, W = len(x), len(x[0]), len(x[0][0])
    k = len(K[0][0])
    pad = k // 2
    out = [[[b[o] if b is not None else 0.0 for _ in range(W)] for _ in range(H)] for o in range(len(K))]
    for o in range(len(K)):
        for i in range(H):
            for j in range(W):
                s = 0.0
                for c in range(C):
                    for di in range(k):
                        for dj in range(k):
                            ii, jj = i + di - pad, j + dj - pad
                            if 0 <= ii < H and 0 <= jj < W:
                                s += K[o][c][di][dj] * x[c][ii][jj]
                out[o][i][j] += s
    return out


def dice_jaccard_counts(a, b):
    """Exact Dice and Jaccard from two flat 0/1 sequences."""
    inter = sum(1 for p, q in zip(a, b) if p and q)
    na, nb = sum(1 for p in a if p), sum(1 for q in b if q)
    if na + nb == 0:
        return Fraction(1), Fraction(1)
    return Fraction(2 * inter, na + nb), Fraction(inter, na + nb - inter)


def adam_scalar(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Parameter trajectory of scalar Adam, one entry per gradient."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p)
    return out
