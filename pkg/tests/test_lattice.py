import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import dense_gf2_rank, geometric_syndrome
from toricmoe.lattice import (HORIZONTAL, PLAQUETTE, STAR, VERTICAL, build_toric_code, gf2_rank, in_rowspace,
                              logical_effect, pack_row, pauli_error, sector_parities, symplectic_product,
                              syndrome_of, unpack_row)

CODES = {L: build_toric_code(L) for L in (2, 4, 6, 8)}


@pytest.mark.parametrize("L", [2, 4, 6, 8])
def test_dimensions_and_rank(L):
    code = CODES[L]
    assert (code.n, code.m, code.k) == (2 * L * L, 2 * L * L, 2)
    assert gf2_rank(code.H) == 2 * L * L - 2
    assert dense_gf2_rank(code.H) == 2 * L * L - 2


def test_l2_and_l6_counts():
    assert (CODES[2].n, CODES[2].m, gf2_rank(CODES[2].H)) == (8, 8, 6)
    assert (CODES[6].n, CODES[6].m, CODES[6].k) == (72, 72, 2)


def test_rows_weight_four_and_commute_at_l4():
    code = CODES[4]
    assert (code.H.sum(axis=1) == 4).all()
    for i in range(code.m):
        for j in range(code.m):
            assert symplectic_product(code.H[i], code.H[j]) == 0


def test_logical_pairing():
    code = CODES[4]
    gram = np.array([[symplectic_product(a, b) for b in code.logicals] for a in code.logicals])
    # X_i anticommutes with Z_i only
    expected = np.array([[0, 0, 1, 0], [0, 0, 0, 1], [1, 0, 0, 0], [0, 1, 0, 0]])
    assert (gram == expected).all()
    for row in code.logicals:
        assert all(symplectic_product(row, h) == 0 for h in code.H)
        assert not in_rowspace(code.H, row)


def test_build_rejects_bad_l():
    for bad in (3, 0, 66, -2):
        with pytest.raises(ValueError):
            build_toric_code(bad)
    with pytest.raises(TypeError):
        build_toric_code(4.0)


def test_deterministic_build():
    a, b = build_toric_code(6), build_toric_code(6)
    assert (a.H == b.H).all() and (a.logicals == b.logicals).all()
    assert a.dump_text() == b.dump_text()


def test_index_maps_are_bijections():
    code = CODES[6]
    assert sorted(code.edge_id(*code.edge_coord(e)) for e in range(code.n)) == list(range(code.n))
    assert sorted(code.check_id(*code.check_coord(c)) for c in range(code.m)) == list(range(code.m))
    assert code.edge_coord(0) == (HORIZONTAL, 0, 0)
    assert code.edge_coord(36) == (VERTICAL, 0, 0)
    assert code.check_coord(36) == (PLAQUETTE, 0, 0)
    assert code.check_coord(7) == (STAR, 1, 1)


def test_symplectic_product_examples():
    code = CODES[4]
    assert symplectic_product(pauli_error(code, x=[0]), pauli_error(code, z=[0])) == 1
    assert symplectic_product(pauli_error(code, x=[0]), pauli_error(code, z=[1])) == 0
    y = pauli_error(code, y=[3])
    assert symplectic_product(y, y) == 0
    with pytest.raises(ValueError):
        symplectic_product(np.zeros(4), np.zeros(6))
    with pytest.raises(ValueError):
        symplectic_product(np.zeros(5), np.zeros(5))


def test_single_qubit_syndromes_match_geometry():
    for L in (4, 6):
        code = CODES[L]
        for e in range(code.n):
            sx = syndrome_of(code, pauli_error(code, x=[e]))
            assert (sx == geometric_syndrome(L, x_edges=[e])).all()
            assert sx[:L * L].sum() == 0 and sx[L * L:].sum() == 2
            sz = syndrome_of(code, pauli_error(code, z=[e]))
            assert (sz == geometric_syndrome(L, z_edges=[e])).all()
            assert sz[:L * L].sum() == 2 and sz[L * L:].sum() == 0


def test_stabilizers_have_zero_syndrome_and_logical_effect():
    code = CODES[4]
    assert not syndrome_of(code, code.H).any()
    assert not logical_effect(code, code.H).any()
    assert not syndrome_of(code, np.zeros(2 * code.n, dtype=np.uint8)).any()
    rng = np.random.default_rng(5)
    for _ in range(100):
        subset = rng.integers(0, 2, code.m).astype(bool)
        h = np.bitwise_xor.reduce(code.H[subset], axis=0) if subset.any() else np.zeros(2 * code.n, np.uint8)
        assert not logical_effect(code, h).any()


def test_logical_loop_has_one_bit():
    code = CODES[4]
    loop = pauli_error(code, x=[code.edge_id(HORIZONTAL, i, 0) for i in range(4)])
    assert not syndrome_of(code, loop).any()
    assert logical_effect(code, loop).sum() == 1


def test_gf2_rank_examples():
    assert gf2_rank(np.eye(4, dtype=np.uint8)) == 4
    assert gf2_rank(np.zeros((3, 7), dtype=np.uint8)) == 0
    assert gf2_rank(CODES[4].H) == 30
    with pytest.raises(ValueError):
        gf2_rank(np.zeros((0, 3)))


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2 ** 31))
def test_gf2_rank_matches_dense_oracle(rows, cols, seed):
    mat = np.random.default_rng(seed).integers(0, 2, (rows, cols))
    assert gf2_rank(mat) == dense_gf2_rank(mat)


@given(st.integers(1, 200), st.integers(0, 2 ** 31))
def test_pack_roundtrip(length, seed):
    bits = np.random.default_rng(seed).integers(0, 2, length).astype(np.uint8)
    assert (unpack_row(pack_row(bits), length) == bits).all()


@given(st.sampled_from([2, 4, 6]), st.integers(0, 2 ** 31))
def test_coset_invariance_and_linearity(L, seed):
    code = CODES[L]
    rng = np.random.default_rng(seed)
    e1 = rng.integers(0, 2, 2 * code.n).astype(np.uint8)
    e2 = rng.integers(0, 2, 2 * code.n).astype(np.uint8)
    subset = rng.integers(0, 2, code.m).astype(bool)
    h = np.bitwise_xor.reduce(code.H[subset], axis=0) if subset.any() else np.zeros_like(e1)
    assert (syndrome_of(code, e1 ^ h) == syndrome_of(code, e1)).all()
    assert (logical_effect(code, e1 ^ h) == logical_effect(code, e1)).all()
    assert (syndrome_of(code, e1 ^ e2) == syndrome_of(code, e1) ^ syndrome_of(code, e2)).all()
    assert sector_parities(code, syndrome_of(code, e1)) == (0, 0)


@given(st.integers(0, 2 ** 31))
def test_symplectic_product_symmetric_bilinear(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.integers(0, 2, 16).astype(np.uint8) for _ in range(3))
    assert symplectic_product(a, b) == symplectic_product(b, a)
    assert symplectic_product(a ^ c, b) == symplectic_product(a, b) ^ symplectic_product(c, b)


def test_translation_commutes_with_syndrome():
    code = CODES[6]
    rng = np.random.default_rng(1)
    e = rng.integers(0, 2, 2 * code.n).astype(np.uint8)
    for dr, dc in [(1, 0), (0, 1), (2, 5)]:
        assert (syndrome_of(code, code.translate_error(e, dr, dc))
                == code.translate_syndrome(syndrome_of(code, e), dr, dc)).all()


def test_plus_neighbors_are_incident_checks():
    code = CODES[4]
    for e in range(code.n):
        nb = code.plus_neighbors(e)
        hx = code.syndrome_matrix[:, code.n + e]
        hz = code.syndrome_matrix[:, e]
        assert set(nb) == set(np.flatnonzero(hx | hz).tolist())
        kinds = sorted(code.check_coord(c)[0] for c in nb)
        assert kinds == [STAR, STAR, PLAQUETTE, PLAQUETTE]


def test_dump_text_layout():
    text = CODES[2].dump_text().splitlines()
    assert text[:5] == ["L 2", "n 8", "m 8", "k 2", "rank 6"]
    assert text[5] == "H" and len(text[6]) == 16
