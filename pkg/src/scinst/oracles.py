"""Slow, loop-based reference implementations used to check the vectorized code.

Everything here works on Python floats or tiny float64 tensors one element at
a time. Only use on inputs with a handful of tokens or pixels.
"""
from __future__ import annotations

import math
from typing import List, Sequence

import torch

from .generator import CrossAttentionFusion
from .scin import MultiHeadAttention, StyleTransformer


def _matvec(w: torch.Tensor, x: Sequence[float], b=None) -> List[float]:
    w = w.detach()
    out = []
    for r in range(w.shape[0]):
        acc = 0.0 if b is None else float(b[r].detach())
        for c in range(w.shape[1]):
            acc += float(w[r, c]) * x[c]
        out.append(acc)
    return out


def _softmax(row: Sequence[float]) -> List[float]:
    m = max(row)
    e = [math.exp(v - m) for v in row]
    z = sum(e)
    return [v / z for v in e]


def _dot(a, b) -> float:
    return sum(x * y for x, y in zip(a, b))


def two_pass_stats(plane: Sequence[float], epsilon: float):
    """Mean, then biased variance from a second pass; returns (mu, sqrt(var + eps))."""
    mu = sum(plane) / len(plane)
    var = sum((v - mu) ** 2 for v in plane) / len(plane)
    return mu, math.sqrt(var + epsilon)


def naive_instance_stats(x: torch.Tensor, epsilon: float):
    """(N, C) lists of mu and sigma for an (N, C, H, W) tensor."""
    N, C = x.shape[:2]
    mus = [[0.0] * C for _ in range(N)]
    sigmas = [[0.0] * C for _ in range(N)]
    for n in range(N):
        for c in range(C):
            mus[n][c], sigmas[n][c] = two_pass_stats(x[n, c].flatten().tolist(), epsilon)
    return mus, sigmas


def naive_attention(q, k, v, heads: int):
    """Per-head softmax(q k^T / sqrt(d)) v on lists of token vectors.

    Returns (outputs per token concatenated over heads, weights[h][i][j]).
    """
    dim = len(q[0])
    d = dim // heads
    out = [[0.0] * dim for _ in q]
    weights = []
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        wh = []
        for i, qi in enumerate(q):
            row = _softmax([_dot(qi[sl], kj[sl]) / math.sqrt(d) for kj in k])
            wh.append(row)
            for t in range(d):
                out[i][h * d + t] = sum(row[j] * v[j][h * d + t] for j in range(len(v)))
        weights.append(wh)
    return out, weights


def naive_mha(x: torch.Tensor, attn: MultiHeadAttention):
    """Oracle for MultiHeadAttention on a single (L, C) sequence."""
    tokens = x.tolist()
    q = [_matvec(attn.w_q.weight, t) for t in tokens]
    k = [_matvec(attn.w_k.weight, t) for t in tokens]
    v = [_matvec(attn.w_v.weight, t) for t in tokens]
    mixed, weights = naive_attention(q, k, v, attn.heads)
    return [_matvec(attn.w_o.weight, m) for m in mixed], weights, q


def _layer_norm(x: Sequence[float], ln: torch.nn.LayerNorm) -> List[float]:
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    s = math.sqrt(var + ln.eps)
    return [(v - mu) / s * float(ln.weight[i].detach()) + float(ln.bias[i].detach()) for i, v in enumerate(x)]


def naive_style_encode(tokens: torch.Tensor, block: StyleTransformer):
    """Oracle for one transformer block on a single (L, C) sequence.

    Returns (encoded tokens, attention weights[h][i][j]).
    """
    mixed, weights, q = naive_mha(tokens, block.attn)
    raw = tokens.tolist()
    encoded = []
    for i, m in enumerate(mixed):
        res = q[i] if block.residual == "query" else raw[i]
        y = _layer_norm([a + b for a, b in zip(m, res)], block.norm1)
        lin1, lin2 = block.ffn[0], block.ffn[2]
        hidden = [max(0.0, h) for h in _matvec(lin1.weight, y, lin1.bias)]
        f = _matvec(lin2.weight, hidden, lin2.bias)
        encoded.append(_layer_norm([a + b for a, b in zip(f, y)], block.norm2))
    return encoded, weights


def naive_cross_attention(content: torch.Tensor, style: torch.Tensor, fusion: CrossAttentionFusion):
    """Oracle for CrossAttentionFusion on one (C, H, W) content and (C, h, w) style map.

    Returns (fused (C, H, W) nested lists, weights[i][j] over flattened positions).
    """
    eps = fusion.epsilon
    C = content.shape[0]

    def normed_positions(fmap):
        planes = [fmap[c].flatten().tolist() for c in range(C)]
        stats = [two_pass_stats(p, eps) for p in planes]
        n_pos = len(planes[0])
        raw = [[planes[c][p] for c in range(C)] for p in range(n_pos)]
        normed = [[(planes[c][p] - stats[c][0]) / stats[c][1] for c in range(C)] for p in range(n_pos)]
        return raw, normed

    def conv1x1(conv, vec):
        return _matvec(conv.weight[:, :, 0, 0], vec, conv.bias)

    c_raw, c_norm = normed_positions(content)
    s_raw, s_norm = normed_positions(style)
    q = [conv1x1(fusion.f, p) for p in c_norm]
    k = [conv1x1(fusion.g, p) for p in s_norm]
    v = [conv1x1(fusion.h, p) for p in s_raw]
    weights = [_softmax([_dot(qi, kj) / math.sqrt(C) for kj in k]) for qi in q]
    fused = []
    for i, row in enumerate(weights):
        att = [sum(row[j] * v[j][c] for j in range(len(v))) for c in range(C)]
        proj = conv1x1(fusion.out, att)
        fused.append([c_raw[i][c] + proj[c] for c in range(C)])
    H, W = content.shape[1:]
    grid = [[[fused[y * W + x][c] for x in range(W)] for y in range(H)] for c in range(C)]
    return grid, weights


def brute_force_infonce(codes, view: str, tau: float) -> float:
    """Enumerate every (anchor, positive) pair of an n x n grid of unit codes.

    ``codes[i][j]`` is the code of style i on content j. A positive shares the
    row (style view) or the column (content view); negatives share neither.
    """
    n = len(codes)
    total, count = 0.0, 0
    for i in range(n):
        for j in range(n):
            a = codes[i][j]
            if view == "style":
                positives = [codes[i][jj] for jj in range(n) if jj != j]
            else:
                positives = [codes[ii][j] for ii in range(n) if ii != i]
            negatives = [codes[ii][jj] for ii in range(n) for jj in range(n) if ii != i and jj != j]
            for p in positives:
                sp = math.exp(_dot(a, p) / tau)
                sn = sum(math.exp(_dot(a, m) / tau) for m in negatives)
                total += -math.log(sp / (sp + sn))
                count += 1
    return total / count


def brute_force_icl(style_codes, content_codes, tau: float) -> float:
    return brute_force_infonce(style_codes, "style", tau) + brute_force_infonce(content_codes, "content", tau)
