import math

import numpy as np
import pytest

import toricmoe.autodiff as ad
from gradcheck import check_gradients
from oracles import brute_force_mask, incident_check_sets
from toricmoe.autodiff import Tensor
from toricmoe.lattice import build_toric_code, pauli_error, syndrome_of
from toricmoe.model import (Forward, QuantumSMoE, SmoeConfig, build_layout, grid_to_syndrome,
                            slot_orthogonality_loss, syndrome_grid)
from toricmoe.noise import generate_dataset
from toricmoe.optim import AdamW

CODE4 = build_toric_code(4)
TINY = dict(embed_dim=16, heads=2, layers=2, moe_layers=(1,), experts=2, slots_per_expert=2,
            expert_hidden=32, mlp_hidden=32, head_hidden=32)


def tiny(**kw):
    cfg = dict(TINY)
    cfg.update(kw)
    return SmoeConfig(L=4, **cfg)


# layout -------------------------------------------------------------------------

@pytest.mark.parametrize("L", [4, 6, 8])
def test_mask_matches_brute_force(L):
    layout = build_layout(build_toric_code(L))
    mask = layout.attention_mask
    assert np.array_equal(mask, brute_force_mask(L))
    assert (mask == mask.T).all() and mask.diagonal().all()
    weights = mask.sum(axis=1)
    assert (weights == weights[0]).all() and weights[0] == 9  # 12 neighbours, 4 counted twice, plus self


def test_incident_checks_two_of_each_kind():
    code = build_toric_code(6)
    layout = build_layout(code)
    sets = incident_check_sets(6)
    for e, row in enumerate(layout.incident_checks):
        coords = {("star" if k == 0 else "plaq", r, c) for k, r, c in map(code.check_coord, row)}
        assert coords == sets[e]


def test_syndrome_grid_bijection_and_translation():
    code = build_toric_code(6)
    s = syndrome_of(code, pauli_error(code, x=[3], z=[40]))
    g = syndrome_grid(code, s)
    assert g.shape == (2, 6, 6) and (grid_to_syndrome(g) == s).all()
    assert g[1].sum() == 2 and g[0].sum() == 2
    moved = syndrome_grid(code, code.translate_syndrome(s, 1, 2))
    assert (moved == np.roll(g, (1, 2), axis=(-2, -1))).all()


# embedding ----------------------------------------------------------------------

def test_zero_syndrome_embedding_is_bias_plus_position():
    m = QuantumSMoE(tiny(), seed=1)
    m.params["embed.b"].data[:] = np.linspace(-1, 1, 16)
    x = m.embed(np.zeros(CODE4.m)).data[0]
    assert np.allclose(x, m.params["embed.b"].data + m.params["embed.pos"].data)


def test_single_error_touches_expected_tokens():
    m = QuantumSMoE(tiny(), seed=1)
    e = 5
    s = syndrome_of(CODE4, pauli_error(CODE4, x=[e]))
    flipped = set(np.flatnonzero(s).tolist())
    contrib = m.embed(s, with_position=False).data[0] - m.params["embed.b"].data
    touched = {i for i in range(CODE4.n) if np.abs(contrib[i]).max() > 0}
    expected = {i for i, row in enumerate(m.layout.incident_checks) if flipped & set(row.tolist())}
    assert touched == expected and len(expected) == 7


def test_translation_permutes_stencil_contributions():
    m = QuantumSMoE(tiny(), seed=2)
    rng = np.random.default_rng(0)
    e = (rng.random(2 * CODE4.n) < 0.1).astype(np.uint8)
    s = syndrome_of(CODE4, e)
    a = m.embed(s, with_position=False).data[0]
    b = m.embed(CODE4.translate_syndrome(s, 1, 3), with_position=False).data[0]
    # token ids follow the same (orientation, r, c) grid as the error vector halves;
    # source[j] is the token that lands on position j after the shift
    source = CODE4.translate_error(np.arange(2 * CODE4.n), 1, 3)[:CODE4.n]
    assert np.allclose(b, a[source])


# blocks -------------------------------------------------------------------------

def test_masked_attention_probability_is_zero():
    m = QuantumSMoE(tiny(), seed=0)
    fwd = m.forward(generate_dataset(CODE4, [0.1], 4, 0).syndromes)
    blocked = ~m.layout.attention_mask
    for probs in fwd.attention:
        assert probs[..., blocked].max() < 1e-12


def test_degenerate_block_is_mlp():
    m = QuantumSMoE(tiny(use_mask=False, moe_layers=()), seed=3)
    pre = "block0."
    for name in ("attn.qkv.w", "attn.qkv.b", "attn.o.w", "attn.o.b"):
        m.params[pre + name].data[:] = 0.0
    x = Tensor(np.random.default_rng(1).normal(size=(2, CODE4.n, 16)))
    out, _, _ = m.block(x, 0)
    h = ad.layer_norm(x, m.params[pre + "ln2.g"], m.params[pre + "ln2.b"])
    assert np.allclose(out.data, x.data + m._mlp(h, pre).data)


def test_softmoe_normalization_and_invocations():
    m = QuantumSMoE(SmoeConfig.full(L=4, embed_dim=16, heads=2, layers=2, moe_layers=(0, 1),
                                     expert_hidden=8, mlp_hidden=8), seed=0)
    rng = np.random.default_rng(4)
    for _ in range(100):
        fwd = m.forward((rng.random((1, CODE4.m)) < 0.3).astype(np.uint8))
        for tr in fwd.moe:
            assert np.abs(tr.dispatch.sum(axis=-2) - 1).max() < 1e-12
            assert np.abs(tr.combine.sum(axis=-1) - 1).max() < 1e-12
            assert tr.expert_calls == 32 and tr.slot_inputs.shape == (1, 32, 16)


def test_single_expert_identical_tokens():
    m = QuantumSMoE(tiny(experts=1, slots_per_expert=1), seed=5)
    row = np.random.default_rng(2).normal(size=16)
    x = Tensor(np.tile(row, (1, CODE4.n, 1)))
    out, tr = m.softmoe(x, "block1.")
    P = m.params
    hidden = ad.gelu(Tensor(row @ P["block1.moe.w1"].data[0] + P["block1.moe.b1"].data[0, 0])).data
    expect = hidden @ P["block1.moe.w2"].data[0] + P["block1.moe.b2"].data[0, 0]
    assert np.allclose(out.data[0], expect)


# slot orthogonality ----------------------------------------------------------------

def test_os_anchors():
    d = 32
    ortho = Tensor(np.eye(d)[:32])
    assert abs(float(slot_orthogonality_loss(ortho, 8, 4).data)) < 1e-10
    same = Tensor(np.tile(np.random.default_rng(0).normal(size=d), (32, 1)))
    assert abs(float(slot_orthogonality_loss(same, 8, 4).data) - 16.0) < 1e-8
    assert float(slot_orthogonality_loss(same, 1, 32).data) == 0.0


def test_os_negation_changes_loss():
    x = np.random.default_rng(3).normal(size=(8, 5))
    base = float(slot_orthogonality_loss(Tensor(x), 4, 2).data)
    y = x.copy()
    y[0] *= -1
    assert float(slot_orthogonality_loss(Tensor(y), 4, 2).data) != base


def test_os_bounds():
    x = np.random.default_rng(9).normal(size=(3, 32, 6))
    v = float(slot_orthogonality_loss(Tensor(x), 8, 4).data)
    assert -16 <= v <= 16


# losses and decisions ----------------------------------------------------------------

def _fixed(m, logits):
    return Forward(Tensor(np.asarray(logits, dtype=float)), [], [])


def test_saturated_logits_give_near_zero_losses():
    m = QuantumSMoE(tiny(), seed=0)
    ds = generate_dataset(CODE4, [0.15], 8, 2)
    logits = np.where(ds.errors == 1, 40.0, -40.0)
    losses = m.losses(_fixed(m, logits), ds.errors)
    assert float(losses.ber.data) < 1e-12 and float(losses.ler.data) < 1e-9
    assert np.allclose(m.soft_logical_parity(Tensor(logits)).data, ds.logicals)


def test_zero_logits_give_ln2():
    m = QuantumSMoE(tiny(), seed=0)
    ds = generate_dataset(CODE4, [0.15], 8, 2)
    losses = m.losses(_fixed(m, np.zeros((8, 2 * CODE4.n))), ds.errors)
    assert math.isclose(float(losses.ler.data), math.log(2), rel_tol=1e-12)
    assert math.isclose(float(losses.ber.data), math.log(2), rel_tol=1e-12)
    assert float(losses.overall.data) == pytest.approx(0.5 * math.log(2) + math.log(2))


def test_loss_weights():
    c = SmoeConfig()
    assert (c.lambda_ber, c.lambda_ler, c.lambda_os) == (0.5, 1.0, 0.1)
    assert (c.embed_dim, c.heads, c.layers, c.moe_layers, c.experts, c.slots_per_expert, c.expert_hidden) == \
        (128, 8, 6, (4, 5), 8, 4, 512)


@pytest.mark.parametrize("head", ["pool", "token"])
def test_zero_head_decodes_to_zero(head):
    m = QuantumSMoE(tiny(head=head), seed=0)
    for name in m.params.names():
        if name.startswith("head.w"):
            m.params[name].data[:] = 0.0
    s = generate_dataset(CODE4, [0.2], 6, 1).syndromes
    assert (m.predict(s) == 0).all() and not m.decode_hard(s).any()


def test_decode_hard_pure_and_saturated():
    m = QuantumSMoE(tiny(head="token"), seed=0)
    s = generate_dataset(CODE4, [0.2], 6, 1).syndromes
    assert (m.decode_hard(s) == m.decode_hard(s)).all()
    assert m.decode_hard(s[0]).shape == (2 * CODE4.n,)
    m.params["head.w"].data[:] = 0.0
    m.params["head.b"].data[:] = [50.0, -50.0]  # z bits on, x bits off
    est = m.decode_hard(s)
    assert (est[:, :CODE4.n] == 1).all() and (est[:, CODE4.n:] == 0).all()


@pytest.mark.parametrize("head", ["pool", "token"])
def test_full_model_gradcheck(head):
    m = QuantumSMoE(tiny(head=head, layers=2, moe_layers=(1,), init_std=0.3), seed=7)
    ds = generate_dataset(CODE4, [0.1], 3, 5)
    params = dict(m.params.items())
    coords = max(1, 50 // len(params))
    check_gradients(lambda: m.loss(ds.syndromes, ds.errors).overall, params, coords_per_param=coords, seed=1)


def test_one_small_step_decreases_loss():
    ds = generate_dataset(CODE4, [0.1], 16, 3)
    for seed in range(10):
        m = QuantumSMoE(tiny(), seed=seed)
        before = m.loss(ds.syndromes, ds.errors)
        m.params.zero_grad()
        before.overall.backward()
        AdamW(m.params, lr=1e-4).step()
        after = m.loss(ds.syndromes, ds.errors)
        assert float(after.overall.data) < float(before.overall.data)


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        SmoeConfig(embed_dim=10, heads=3)
    with pytest.raises(ValueError):
        SmoeConfig(layers=4, moe_layers=(4,))
    with pytest.raises(ValueError):
        SmoeConfig(head="conv")
    with pytest.raises(ValueError):
        SmoeConfig.from_dict({"L": 4, "bogus": 1})
    c = SmoeConfig.desk()
    assert SmoeConfig.from_dict(c.to_dict()) == c
    assert (c.embed_dim, c.layers, c.moe_layers) == (64, 4, (2, 3))


def test_model_rejects_wrong_l():
    with pytest.raises(ValueError):
        QuantumSMoE(tiny(), code=build_toric_code(6))
    m = QuantumSMoE(tiny(), seed=0)
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 10)))


def test_same_seed_same_parameters():
    a, b = QuantumSMoE(tiny(), seed=3), QuantumSMoE(tiny(), seed=3)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.params, b.params))
    assert a.params.names() == b.params.names()
