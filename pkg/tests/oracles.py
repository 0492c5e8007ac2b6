"""Independent reference implementations used only by the tests.

Everything here is deliberately naive (dense arrays, exhaustive search,
coordinates rebuilt from scratch) so it shares no code path with the package.
"""

import itertools
import math

import numpy as np


def dense_gf2_rank(mat):
    a = (np.array(mat, dtype=np.uint8) & 1).copy()
    rank = 0
    rows, cols = a.shape
    for col in range(cols):
        pivot = next((r for r in range(rank, rows) if a[r, col]), None)
        if pivot is None:
            continue
        a[[rank, pivot]] = a[[pivot, rank]]
        for r in range(rows):
            if r != rank and a[r, col]:
                a[r] ^= a[rank]
        rank += 1
    return rank


def all_pairings(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for i, partner in enumerate(rest):
        for tail in all_pairings(rest[:i] + rest[i + 1:]):
            yield [(first, partner)] + tail


def brute_force_min_pairing(weights):
    n = len(weights)
    best = math.inf
    for pairing in all_pairings(list(range(n))):
        best = min(best, sum(weights[i][j] for i, j in pairing))
    return 0 if n == 0 else best


def torus_dist(a, b, L):
    dr = abs(a[0] - b[0])
    dc = abs(a[1] - b[1])
    return min(dr, L - dr) + min(dc, L - dc)


def edge_endpoints(L, eid):
    """Vertices joined by an edge, derived from geometry alone."""
    orient, rest = divmod(eid, L * L)
    r, c = divmod(rest, L)
    if orient == 0:
        return (r, c), (r, (c + 1) % L)
    return (r, c), ((r + 1) % L, c)


def edge_faces(L, eid):
    """Faces (labelled by their top-left vertex) bordering an edge."""
    orient, rest = divmod(eid, L * L)
    r, c = divmod(rest, L)
    if orient == 0:
        return (r, c), ((r - 1) % L, c)
    return (r, c), (r, (c - 1) % L)


def incident_check_sets(L):
    """Per edge: set of (kind, r, c) for its two stars and two plaquettes."""
    out = []
    for e in range(2 * L * L):
        s = {("star",) + v for v in edge_endpoints(L, e)}
        s |= {("plaq",) + f for f in edge_faces(L, e)}
        out.append(s)
    return out


def brute_force_mask(L):
    sets = incident_check_sets(L)
    n = len(sets)
    return np.array([[bool(sets[i] & sets[j]) for j in range(n)] for i in range(n)])


def geometric_syndrome(L, x_edges=(), z_edges=()):
    """Syndrome from geometry: X flips the bordering plaquettes, Z flips the endpoint stars."""
    stars = np.zeros((L, L), dtype=np.uint8)
    plaqs = np.zeros((L, L), dtype=np.uint8)
    for e in x_edges:
        for f in edge_faces(L, e):
            plaqs[f] ^= 1
    for e in z_edges:
        for v in edge_endpoints(L, e):
            stars[v] ^= 1
    return np.concatenate([stars.ravel(), plaqs.ravel()])


def wilson(k, n, z=1.959963984540054):
    """Wilson score interval as the roots of (p - phat)^2 = z^2 p (1 - p) / n."""
    phat = k / n
    a = 1 + z * z / n
    b = -(2 * phat + z * z / n)
    c = phat * phat
    disc = math.sqrt(max(b * b - 4 * a * c, 0.0))
    return (-b - disc) / (2 * a), (-b + disc) / (2 * a)


def finite_difference(f, arr, idx, h=1e-5):
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def numpy_softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def pairs_by_combinations(n):
    return list(itertools.combinations(range(n), 2))
