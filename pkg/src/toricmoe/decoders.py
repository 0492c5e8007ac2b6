"""Classical baseline decoders: minimum-weight perfect matching and belief propagation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from toricmoe.blossom import min_weight_perfect_matching
from toricmoe.lattice import HORIZONTAL, PLAQUETTE, STAR, VERTICAL, ToricCode, syndrome_of


class SyndromeError(ValueError):
    """Syndrome violates the even-defects-per-sector constraint."""


def _axis_steps(a: int, b: int, L: int) -> tuple[int, int]:
    """Signed direction and step count from a to b on a cycle of length L.

    Shorter way round wins; on an exact tie the direction that does not
    cross the periodic boundary is taken.
    """
    fwd = (b - a) % L
    back = L - fwd if fwd else 0
    if fwd == 0:
        return 0, 0
    if fwd < back:
        return 1, fwd
    if back < fwd:
        return -1, back
    return (1, fwd) if b > a else (-1, back)


def toroidal_distance(a: tuple[int, int], b: tuple[int, int], L: int) -> int:
    dr = abs(a[0] - b[0]) % L
    dc = abs(a[1] - b[1]) % L
    return min(dr, L - dr) + min(dc, L - dc)


@dataclass(frozen=True)
class DefectGraph:
    """Flipped checks of one sector with their pairwise toroidal distances."""

    kind: int
    defects: tuple[tuple[int, int, int], ...]  # (kind, row, col) of each flipped check, in id order
    weights: np.ndarray

    @classmethod
    def from_syndrome(cls, code: ToricCode, s: np.ndarray, kind: int) -> "DefectGraph":
        L = code.L
        half = np.asarray(s, dtype=np.uint8)[kind * L * L:(kind + 1) * L * L]
        ids = np.flatnonzero(half)
        if len(ids) % 2:
            name = "star" if kind == STAR else "plaquette"
            raise SyndromeError(f"odd number of {name} defects ({len(ids)}): syndrome is corrupted")
        coords = tuple((kind, int(i) // L, int(i) % L) for i in ids)
        w = np.zeros((len(coords), len(coords)), dtype=np.int64)
        for i in range(len(coords)):
            for j in range(i + 1, len(coords)):
                w[i, j] = w[j, i] = toroidal_distance(coords[i][1:], coords[j][1:], L)
        return cls(kind, coords, w)


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int], ...]
    total_weight: int


def blossom_min_matching(g: DefectGraph) -> Matching:
    if len(g.defects) % 2:
        raise ValueError(f"odd vertex count {len(g.defects)}")
    pairs = tuple(min_weight_perfect_matching(g.weights.tolist()))
    return Matching(pairs, int(sum(g.weights[i, j] for i, j in pairs)))


def shortest_toroidal_path(code: ToricCode, a: tuple[int, int, int], b: tuple[int, int, int]) -> list[int]:
    """Edges of a shortest chain joining checks ``a`` and ``b`` = (kind, row, col).

    Rows are traversed first, then columns. Flipping these edges (X for
    plaquettes, Z for stars) flips exactly checks ``a`` and ``b``.
    """
    if a[0] != b[0]:
        raise ValueError("cannot join a star to a plaquette")
    kind, r, c = a
    _, r2, c2 = b
    L = code.L
    edges: list[int] = []
    dr, nr = _axis_steps(r % L, r2 % L, L)
    for _ in range(nr):
        if kind == PLAQUETTE:
            # plaquette (r, c) -> (r + 1, c) crosses its bottom edge h(r + 1, c)
            edges.append(code.edge_id(HORIZONTAL, r + 1 if dr > 0 else r, c))
        else:
            # vertex (r, c) -> (r + 1, c) along v(r, c)
            edges.append(code.edge_id(VERTICAL, r if dr > 0 else r - 1, c))
        r = (r + dr) % L
    dc, nc = _axis_steps(c % L, c2 % L, L)
    for _ in range(nc):
        if kind == PLAQUETTE:
            edges.append(code.edge_id(VERTICAL, r, c + 1 if dc > 0 else c))
        else:
            edges.append(code.edge_id(HORIZONTAL, r, c if dc > 0 else c - 1))
        c = (c + dc) % L
    return edges


def reweight_for_y_correlations(code: ToricCode, graph: DefectGraph, other_correction: np.ndarray) -> np.ndarray:
    """Extension point for correlated (Y-aware) matching; not provided here."""
    raise NotImplementedError("correlated reweighting of the second matching pass is not implemented")


def mwpm_decode(code: ToricCode, s: np.ndarray,
                reweight: Callable[[ToricCode, DefectGraph, np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Independent X/Z matching decoder. The result always reproduces ``s``."""
    s = np.asarray(s, dtype=np.uint8)
    if s.shape != (code.m,):
        raise ValueError(f"syndrome must have length m={code.m}, got {s.shape}")
    n = code.n
    est = np.zeros(2 * n, dtype=np.uint8)
    # plaquette defects come from X components, star defects from Z components
    for kind, offset in ((PLAQUETTE, n), (STAR, 0)):
        g = DefectGraph.from_syndrome(code, s, kind)
        if not g.defects:
            continue
        if reweight is not None:
            g = DefectGraph(kind, g.defects, reweight(code, g, est))
        for i, j in blossom_min_matching(g).pairs:
            for e in shortest_toroidal_path(code, g.defects[i], g.defects[j]):
                est[offset + e] ^= 1
    return est


# belief propagation -----------------------------------------------------------

@dataclass
class BPResult:
    errors: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray


class TannerGraph:
    """Edge lists of the binary Tanner graph of ``s = H_swapped . eps``."""

    def __init__(self, code: ToricCode):
        mat = code.syndrome_matrix
        self.checks, self.vars = np.nonzero(mat)  # row-major: grouped by check
        self.m, self.nvar = mat.shape
        self.check_deg = np.bincount(self.checks, minlength=self.m)
        if len(set(self.check_deg.tolist())) != 1:
            raise ValueError("BP kernel assumes a check-regular graph")
        self.dc = int(self.check_deg[0])
        # edges sorted by variable, for the variable-side sums
        self.var_order = np.argsort(self.vars, kind="stable")
        self.var_deg = np.bincount(self.vars, minlength=self.nvar)
        self.var_start = np.concatenate([[0], np.cumsum(self.var_deg)[:-1]])


def bp_decode(code: ToricCode, s: np.ndarray, p: float, max_iters: int = 50,
              damping: float = 0.5, damping_start: int = 10, graph: TannerGraph | None = None) -> BPResult:
    """Flooding sum-product decoding of one syndrome (1-D) or a batch (2-D).

    Each symplectic bit gets prior probability 2p/3. Messages are damped
    (``new = damping * old + (1 - damping) * update``) after ``damping_start``
    iterations. Samples stop at the first iteration whose hard decision
    reproduces the syndrome.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"BP needs a prior rate in (0, 1), got p={p}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    tg = graph or TannerGraph(code)
    s = np.asarray(s, dtype=np.uint8)
    single = s.ndim == 1
    S = s[None, :] if single else s
    B = S.shape[0]
    q = 2.0 * p / 3.0
    prior = np.log((1.0 - q) / q)
    sign = 1.0 - 2.0 * S[:, tg.checks].astype(np.float64)  # (B, E)
    v2c = np.full((B, len(tg.checks)), prior)
    c2v = np.zeros_like(v2c)
    decided = np.zeros((B, tg.nvar), dtype=np.uint8)
    converged = np.zeros(B, dtype=bool)
    iters = np.full(B, max_iters, dtype=np.int64)
    active = np.arange(B)
    mat_t = code.syndrome_matrix.T.astype(np.int32)
    for it in range(1, max_iters + 1):
        # check update (tanh rule with leave-one-out products)
        t = np.tanh(0.5 * v2c[active]).reshape(len(active), tg.m, tg.dc)
        t = np.where(np.abs(t) < 1e-300, 1e-300, t)
        total = np.prod(t, axis=-1, keepdims=True)
        excl = np.clip(total / t, -1 + 1e-15, 1 - 1e-15).reshape(len(active), -1)
        new_c2v = sign[active] * 2.0 * np.arctanh(excl)
        if it > damping_start:
            new_c2v = damping * c2v[active] + (1.0 - damping) * new_c2v
        c2v[active] = new_c2v
        # variable update
        by_var = new_c2v[:, tg.var_order]
        sums = np.add.reduceat(by_var, tg.var_start, axis=1)
        posterior = prior + sums
        out_by_var = posterior[:, tg.vars[tg.var_order]] - by_var
        upd = np.empty_like(out_by_var)
        upd[:, tg.var_order] = out_by_var
        v2c[active] = upd
        hard = (posterior < 0).astype(np.uint8)
        decided[active] = hard
        ok = np.all(((hard.astype(np.int32) @ mat_t) & 1) == S[active], axis=1)
        if ok.any():
            done = active[ok]
            converged[done] = True
            iters[done] = it
            active = active[~ok]
        if len(active) == 0:
            break
    if single:
        return BPResult(decided[0], converged[0], iters[0])
    return BPResult(decided, converged, iters)


# decoder objects used by the evaluation harness ---------------------------------

class Decoder:
    name = "decoder"

    def decode_batch(self, syndromes: np.ndarray) -> np.ndarray:
        return np.stack([self.decode(s) for s in syndromes]) if len(syndromes) else \
            np.zeros((0, 2 * self.code.n), dtype=np.uint8)

    def decode(self, syndrome: np.ndarray) -> np.ndarray:
        return self.decode_batch(np.asarray(syndrome)[None, :])[0]

    def metadata(self) -> dict:
        return {"algorithm": self.name}


class IdentityDecoder(Decoder):
    """Always predicts the trivial error."""

    name = "identity"

    def __init__(self, code: ToricCode):
        self.code = code

    def decode_batch(self, syndromes):
        return np.zeros((len(syndromes), 2 * self.code.n), dtype=np.uint8)


class MwpmDecoder(Decoder):
    name = "mwpm"

    def __init__(self, code: ToricCode, reweight=None):
        self.code = code
        self.reweight = reweight

    def decode(self, syndrome):
        return mwpm_decode(self.code, syndrome, self.reweight)

    def metadata(self) -> dict:
        return {
            "algorithm": "minimum-weight perfect matching (Edmonds blossom), X and Z sectors independent",
            "weights": "toroidal Manhattan distance",
            "tie_break": "blossom scan order by defect id; paths row-first, shorter wrap, non-wrapping on ties",
            "correlated_reweighting": self.reweight is not None,
        }


class BPDecoder(Decoder):
    name = "bp"

    def __init__(self, code: ToricCode, p: float, max_iters: int = 50):
        self.code = code
        self.p = p
        self.max_iters = max_iters
        self.graph = TannerGraph(code)

    def decode_batch(self, syndromes):
        return bp_decode(self.code, syndromes, self.p, self.max_iters, graph=self.graph).errors

    def metadata(self) -> dict:
        return {
            "algorithm": "sum-product belief propagation, flooding schedule",
            "prior": "2p/3 per symplectic bit",
            "p": self.p,
            "max_iters": self.max_iters,
            "damping": "0.5 after iteration 10",
            "non_convergence": "counted as logical failure (residual syndrome)",
        }


def residual_ok(code: ToricCode, s: np.ndarray, est: np.ndarray) -> np.ndarray:
    return np.all(syndrome_of(code, est) == s, axis=-1)
