"""Naive reference implementations used as independent test oracles.

Everything here is deliberately written with plain Python loops and
``math.exp`` so it shares no code path with the library. Keep it slow
and obvious.
"""

from __future__ import annotations

import math

import numpy as np


def naive_softmax(scores) -> list[float]:
    exps = [math.exp(float(s)) for s in scores]
    total = sum(exps)
    return [e / total for e in exps]


def naive_tag_embed(bits, embedding) -> list[float]:
    tag_count = len(bits)
    channels = len(embedding[0])
    out = [0.0] * channels
    for t in range(tag_count):
        if bits[t]:
            for c in range(channels):
                out[c] += float(embedding[t][c])
    return out


def naive_tag_attend(features, bits, embedding) -> tuple[list[float], list[float]]:
    """Double-loop tag attention: scores, softmax, weighted sum."""
    embedded = naive_tag_embed(bits, embedding)
    locations = len(features)
    channels = len(features[0])
    scores = []
    for l in range(locations):
        s = 0.0
        for c in range(channels):
            s += float(features[l][c]) * embedded[c]
        scores.append(s)
    weights = naive_softmax(scores)
    pooled = [0.0] * channels
    for l in range(locations):
        for c in range(channels):
            pooled[c] += weights[l] * float(features[l][c])
    return weights, pooled


def naive_context_attend(
    features, context, feature_weight, context_weight
) -> tuple[list[float], list[float]]:
    """Double-loop context attention with the linear alignment."""
    locations = len(features)
    channels = len(features[0])
    scores = []
    for l in range(locations):
        s = 0.0
        for c in range(channels):
            s += float(feature_weight[c]) * float(features[l][c])
            s += float(context_weight[l][c]) * float(context[c])
        scores.append(s)
    weights = naive_softmax(scores)
    pooled = [0.0] * channels
    for l in range(locations):
        for c in range(channels):
            pooled[c] += weights[l] * float(features[l][c])
    return weights, pooled


def naive_affine_relu_affine(raw, trunk_w, trunk_b, branch_w, branch_b) -> list[list[float]]:
    """Per-location loop oracle for the trunk+branch feature extractor."""
    locations = len(raw)
    raw_dim = len(raw[0])
    channels = len(trunk_w)
    out = []
    for l in range(locations):
        hidden = []
        for c in range(channels):
            z = float(trunk_b[c])
            for k in range(raw_dim):
                z += float(trunk_w[c][k]) * float(raw[l][k])
            hidden.append(max(z, 0.0))
        row = []
        for c in range(channels):
            f = float(branch_b[c])
            for k in range(channels):
                f += float(branch_w[c][k]) * hidden[k]
            row.append(f)
        out.append(row)
    return out


def naive_l2_normalize(vec) -> list[float]:
    norm = math.sqrt(sum(float(x) * float(x) for x in vec))
    if norm < 1e-12:
        norm = 1e-12
    return [float(x) / norm for x in vec]


def naive_rank(entries, query_embedding, k) -> list[tuple[int, float]]:
    """Exhaustive squared-distance ranking, ties by ascending item id."""
    scored = []
    for item_id, emb in entries:
        d = 0.0
        for a, b in zip(query_embedding, emb):
            d += (float(a) - float(b)) ** 2
        scored.append((item_id, d))
    scored.sort(key=lambda pair: (pair[1], pair[0]))
    return scored[: min(k, len(scored))]


def naive_precision_at_k(ranked_ids_per_query, product_of_item, truth, k) -> float:
    hits = 0
    total = 0
    for query_id, ranked_ids in ranked_ids_per_query.items():
        if query_id not in truth:
            continue
        total += 1
        wanted = truth[query_id]
        if any(product_of_item[i] == wanted for i in ranked_ids[:k]):
            hits += 1
    return hits / total


def as_arrays(*seqs):
    return tuple(np.asarray(s, dtype=np.float64) for s in seqs)
