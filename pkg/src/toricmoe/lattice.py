"""Toric code construction and F2 / symplectic algebra.

Layout conventions (frozen; datasets, checkpoints and the model input all
depend on them):

* vertices sit at ``(r, c)`` with ``0 <= r, c < L``;
* horizontal edge ``h(r, c)`` joins vertex ``(r, c)`` to ``(r, c + 1)`` and has
  id ``r * L + c``; vertical edge ``v(r, c)`` joins ``(r, c)`` to ``(r + 1, c)``
  and has id ``L**2 + r * L + c``;
* star ``(r, c)`` is the X-check on vertex ``(r, c)``, id ``r * L + c``;
  plaquette ``(r, c)`` is the Z-check on the face whose top-left corner is
  vertex ``(r, c)``, id ``L**2 + r * L + c``;
* Pauli operators are symplectic vectors ``(z | x)`` of length ``2n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

HORIZONTAL = 0
VERTICAL = 1
STAR = 0
PLAQUETTE = 1

LOGICAL_NAMES = ("X1", "X2", "Z1", "Z2")


def pack_row(bits: Sequence[int] | np.ndarray) -> int:
    """Pack a bit vector into a Python int (bit i of the int = entry i)."""
    arr = np.asarray(bits, dtype=np.uint8)
    packed = np.packbits(arr, bitorder="little")
    return int.from_bytes(packed.tobytes(), "little")


def unpack_row(word: int, length: int) -> np.ndarray:
    nbytes = (length + 7) // 8
    raw = np.frombuffer(word.to_bytes(nbytes, "little"), dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[:length].copy()


def gf2_rank(mat: np.ndarray | Sequence[Sequence[int]]) -> int:
    """Rank of a binary matrix over F2.

    Rows are packed into arbitrary-width ints so each elimination step is a
    single word-parallel XOR.
    """
    arr = np.asarray(mat, dtype=np.uint8) & 1
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a nonempty 2-D bit matrix, got shape {arr.shape}")
    pivots: dict[int, int] = {}
    for row in arr:
        word = pack_row(row)
        while word:
            lead = word.bit_length() - 1
            if lead not in pivots:
                pivots[lead] = word
                break
            word ^= pivots[lead]
    return len(pivots)


def in_rowspace(mat: np.ndarray, vec: np.ndarray) -> bool:
    """True iff ``vec`` is an F2 combination of the rows of ``mat``."""
    stacked = np.vstack([np.asarray(mat, dtype=np.uint8), np.asarray(vec, dtype=np.uint8)[None, :]])
    return gf2_rank(stacked) == gf2_rank(mat)


def symplectic_product(a: np.ndarray, b: np.ndarray) -> int:
    """``a_z . b_x + a_x . b_z`` over F2; 1 iff the two Paulis anticommute."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 1 or a.shape[0] % 2:
        raise ValueError(f"symplectic vectors must be 1-D of even length, got {a.shape}")
    n = a.shape[0] // 2
    return int((np.dot(a[:n], b[n:]) + np.dot(a[n:], b[:n])) & 1)


def swap_halves(mat: np.ndarray) -> np.ndarray:
    """Map ``(z | x)`` to ``(x | z)`` along the last axis."""
    n = mat.shape[-1] // 2
    return np.concatenate([mat[..., n:], mat[..., :n]], axis=-1)


@dataclass(frozen=True)
class ToricCode:
    """Distance-``L`` toric code on an ``L x L`` periodic lattice."""

    L: int
    H: np.ndarray = field(repr=False)
    logicals: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return 2 * self.L * self.L

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def k(self) -> int:
        return self.logicals.shape[0] // 2

    # index maps ---------------------------------------------------------

    def edge_id(self, orientation: int, r: int, c: int) -> int:
        L = self.L
        return orientation * L * L + (r % L) * L + (c % L)

    def edge_coord(self, eid: int) -> tuple[int, int, int]:
        L = self.L
        if not 0 <= eid < self.n:
            raise IndexError(f"edge id {eid} out of range [0, {self.n})")
        orientation, rest = divmod(eid, L * L)
        return orientation, rest // L, rest % L

    def check_id(self, kind: int, r: int, c: int) -> int:
        L = self.L
        return kind * L * L + (r % L) * L + (c % L)

    def check_coord(self, cid: int) -> tuple[int, int, int]:
        L = self.L
        if not 0 <= cid < self.m:
            raise IndexError(f"check id {cid} out of range [0, {self.m})")
        kind, rest = divmod(cid, L * L)
        return kind, rest // L, rest % L

    def star_edges(self, r: int, c: int) -> list[int]:
        return [
            self.edge_id(HORIZONTAL, r, c),
            self.edge_id(HORIZONTAL, r, c - 1),
            self.edge_id(VERTICAL, r, c),
            self.edge_id(VERTICAL, r - 1, c),
        ]

    def plaquette_edges(self, r: int, c: int) -> list[int]:
        return [
            self.edge_id(HORIZONTAL, r, c),
            self.edge_id(HORIZONTAL, r + 1, c),
            self.edge_id(VERTICAL, r, c),
            self.edge_id(VERTICAL, r, c + 1),
        ]

    def plus_neighbors(self, eid: int) -> tuple[int, int, int, int]:
        """Check ids around edge ``eid`` in (north, east, south, west) order.

        On the interleaved ``2L x 2L`` grid (stars at even/even sites,
        plaquettes at odd/odd sites) these are the four sites of the plus
        stencil centred on the qubit.
        """
        orientation, r, c = self.edge_coord(eid)
        if orientation == HORIZONTAL:
            return (
                self.check_id(PLAQUETTE, r - 1, c),
                self.check_id(STAR, r, c + 1),
                self.check_id(PLAQUETTE, r, c),
                self.check_id(STAR, r, c),
            )
        return (
            self.check_id(STAR, r, c),
            self.check_id(PLAQUETTE, r, c),
            self.check_id(STAR, r + 1, c),
            self.check_id(PLAQUETTE, r, c - 1),
        )

    # algebra ------------------------------------------------------------

    @property
    def syndrome_matrix(self) -> np.ndarray:
        """``H`` with halves swapped, so that ``s = H_swapped @ eps (mod 2)``."""
        return swap_halves(self.H)

    @property
    def logical_matrix(self) -> np.ndarray:
        return swap_halves(self.logicals)

    def translate_error(self, err: np.ndarray, dr: int, dc: int) -> np.ndarray:
        """Shift an error (or batch of errors) by ``(dr, dc)`` on the torus."""
        L = self.L
        err = np.asarray(err)
        lead = err.shape[:-1]
        grid = err.reshape(*lead, 2, 2, L, L)  # (z|x), orientation, r, c
        return np.roll(grid, (dr, dc), axis=(-2, -1)).reshape(err.shape)

    def translate_syndrome(self, s: np.ndarray, dr: int, dc: int) -> np.ndarray:
        L = self.L
        s = np.asarray(s)
        lead = s.shape[:-1]
        grid = s.reshape(*lead, 2, L, L)
        return np.roll(grid, (dr, dc), axis=(-2, -1)).reshape(s.shape)

    def dump_text(self) -> str:
        """Plain-text dump (dimensions, H, logicals) for cross-implementation diffs."""
        lines = [
            f"L {self.L}",
            f"n {self.n}",
            f"m {self.m}",
            f"k {self.k}",
            f"rank {gf2_rank(self.H)}",
            "H",
        ]
        lines += ["".join(map(str, row)) for row in self.H]
        lines.append("logicals")
        lines += [f"{name} " + "".join(map(str, row)) for name, row in zip(LOGICAL_NAMES, self.logicals)]
        return "\n".join(lines) + "\n"


def build_toric_code(L: int) -> ToricCode:
    """Build the toric code; ``L`` must be even and in ``[2, 64]``."""
    if isinstance(L, bool) or not isinstance(L, (int, np.integer)):
        raise TypeError(f"L must be an integer, got {type(L).__name__}")
    L = int(L)
    if L % 2 or not 2 <= L <= 64:
        raise ValueError(f"L must be an even integer in [2, 64], got {L}")
    n = 2 * L * L
    H = np.zeros((n, 2 * n), dtype=np.uint8)
    proto = ToricCode(L, H, np.zeros((4, 2 * n), dtype=np.uint8))
    for r in range(L):
        for c in range(L):
            # star = product of X on incident edges -> x half
            H[proto.check_id(STAR, r, c), [n + e for e in proto.star_edges(r, c)]] = 1
            # plaquette = product of Z on boundary edges -> z half
            H[proto.check_id(PLAQUETTE, r, c), proto.plaquette_edges(r, c)] = 1

    logicals = np.zeros((4, 2 * n), dtype=np.uint8)
    for i in range(L):
        logicals[0, n + proto.edge_id(HORIZONTAL, i, 0)] = 1  # X1: column of horizontal edges
        logicals[1, n + proto.edge_id(VERTICAL, 0, i)] = 1  # X2: row of vertical edges
        logicals[2, proto.edge_id(HORIZONTAL, 0, i)] = 1  # Z1: row of horizontal edges
        logicals[3, proto.edge_id(VERTICAL, i, 0)] = 1  # Z2: column of vertical edges
    H.setflags(write=False)
    logicals.setflags(write=False)
    return ToricCode(L, H, logicals)


def _as_error(code: ToricCode, err: np.ndarray) -> np.ndarray:
    err = np.asarray(err, dtype=np.uint8)
    if err.shape[-1] != 2 * code.n:
        raise ValueError(f"error vectors must have length 2n={2 * code.n}, got {err.shape[-1]}")
    return err


def syndrome_of(code: ToricCode, err: np.ndarray) -> np.ndarray:
    """Syndrome of an error (1-D) or a batch of errors (2-D, one per row)."""
    err = _as_error(code, err)
    return ((err.astype(np.int32) @ code.syndrome_matrix.T.astype(np.int32)) & 1).astype(np.uint8)


def logical_effect(code: ToricCode, err: np.ndarray) -> np.ndarray:
    """Anticommutation pattern of ``err`` with the rows (X1, X2, Z1, Z2) of ``logicals``."""
    err = _as_error(code, err)
    return ((err.astype(np.int32) @ code.logical_matrix.T.astype(np.int32)) & 1).astype(np.uint8)


def pauli_error(code: ToricCode, x: Iterable[int] = (), z: Iterable[int] = (), y: Iterable[int] = ()) -> np.ndarray:
    """Build a ``(z | x)`` vector from edge-id lists of X, Z and Y components."""
    n = code.n
    err = np.zeros(2 * n, dtype=np.uint8)
    for e in x:
        err[n + e] ^= 1
    for e in z:
        err[e] ^= 1
    for e in y:
        err[e] ^= 1
        err[n + e] ^= 1
    return err


def sector_parities(code: ToricCode, s: np.ndarray) -> tuple[int, int]:
    """XOR of all star bits and of all plaquette bits (both 0 for valid syndromes)."""
    s = np.asarray(s, dtype=np.uint8)
    half = code.L * code.L
    return int(s[..., :half].sum() & 1), int(s[..., half:].sum() & 1)
