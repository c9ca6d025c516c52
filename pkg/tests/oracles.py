"""Independent brute-force reference implementations used by the tests.

Written as plain loops over Python floats so they share no code with the
vectorised kernels they check.
"""

import math

import numpy as np


def d2(a, b):
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b))


def fps(points, m):
    pts = [tuple(float(v) for v in p) for p in points]
    n = len(pts)
    # numpy's pairwise mean can differ from a plain loop in the last ulp, which
    # would turn exact ties into near-ties; the centroid is the one shared input
    centroid = tuple(np.asarray(points, dtype=np.float64).mean(axis=0))

    def best(scores):
        top = max(scores)
        ties = [i for i in range(n) if scores[i] == top]
        return min(ties, key=lambda i: (pts[i], i))

    def sq(a, b):
        dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
        return dx * dx + dy * dy + dz * dz

    chosen = [best([sq(p, centroid) for p in pts])]
    mind = [sq(p, pts[chosen[0]]) for p in pts]
    while len(chosen) < m:
        nxt = best(mind)
        chosen.append(nxt)
        mind = [min(mind[i], sq(pts[i], pts[nxt])) for i in range(n)]
    return chosen


def knn(query, source, k):
    out = []
    for q in query:
        d = [(d2(q, s), j) for j, s in enumerate(source)]
        d.sort()
        out.append([j for _, j in d[:k]])
    return out


def ball_query(query, source, radius, k):
    idx, counts = [], []
    r2 = radius * radius
    for q in query:
        dists = [((float(q[0]) - float(s[0])) ** 2 + (float(q[1]) - float(s[1])) ** 2
                  + (float(q[2]) - float(s[2])) ** 2) for s in source]
        found = [j for j, dd in enumerate(dists) if dd <= r2][:k]
        if not found:
            found = [min(range(len(source)), key=lambda j: (dists[j], j))]
        counts.append(len(found))
        idx.append(found + [found[0]] * (k - len(found)))
    return idx, counts


def inverse_distance(fine, coarse, feats, k=3):
    out = []
    for p in fine:
        d = sorted((math.sqrt(d2(p, c)), j) for j, c in enumerate(coarse))[:k]
        if d[0][0] < 1e-8:
            out.append(np.asarray(feats[d[0][1]], dtype=np.float64))
            continue
        w = [1.0 / max(dist, 1e-8) for dist, _ in d]
        s = sum(w)
        out.append(sum(wi / s * np.asarray(feats[j], dtype=np.float64) for wi, (_, j) in zip(w, d)))
    return np.array(out)


def edge_conv(f, f_hat, k, edge_fn):
    """Feature-space graph convolution: neighbours of f_hat among f, max over edge_fn."""
    out = []
    for i in range(len(f)):
        nbrs = knn([f_hat[i]], f, k)[0]
        msgs = [edge_fn(np.concatenate([f_hat[i], f[j] - f_hat[i]])) for j in nbrs]
        out.append(np.max(msgs, axis=0))
    return np.array(out)
