"""QuantumSMoE: a masked vision-transformer decoder with soft mixture-of-experts blocks.

Tokens are data qubits (edges). Each token is embedded from the four checks
around its edge (the plus stencil), attends only to tokens sharing a check,
and the last blocks replace the dense MLP by a SoftMoE layer.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from toricmoe import autodiff as ad
from toricmoe.autodiff import Tensor
from toricmoe.lattice import ToricCode, build_toric_code
from toricmoe.optim import ModelParams, NonFiniteError, truncated_normal


@dataclass(frozen=True)
class SmoeConfig:
    L: int = 4
    embed_dim: int = 128
    heads: int = 8
    layers: int = 6
    moe_layers: tuple[int, ...] = (4, 5)
    experts: int = 8
    slots_per_expert: int = 4
    expert_hidden: int = 512
    mlp_hidden: int = 512
    head_hidden: int = 256
    head: str = "pool"  # "pool": mean-pool + MLP over all bits; "token": per-token logits
    use_mask: bool = True
    lambda_ber: float = 0.5
    lambda_ler: float = 1.0
    lambda_os: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "moe_layers", tuple(int(i) for i in self.moe_layers))
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim={self.embed_dim} is not divisible by heads={self.heads}")
        bad = [i for i in self.moe_layers if not 0 <= i < self.layers]
        if bad:
            raise ValueError(f"moe_layers {bad} outside [0, {self.layers})")
        if self.head not in ("pool", "token"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.experts < 1 or self.slots_per_expert < 1:
            raise ValueError("experts and slots_per_expert must be positive")

    @property
    def slots(self) -> int:
        return self.experts * self.slots_per_expert

    @classmethod
    def full(cls, L: int = 4, **overrides) -> "SmoeConfig":
        """Full-size configuration used in the published experiments."""
        return cls(L=L, **overrides)

    @classmethod
    def desk(cls, L: int = 4, **overrides) -> "SmoeConfig":
        """Reduced model for single-CPU training (embed 64, 4 blocks, last 2 MoE, per-token head)."""
        base = dict(embed_dim=64, heads=2, layers=4, moe_layers=(2, 3), expert_hidden=64,
                    mlp_hidden=64, head_hidden=64, head="token")
        base.update(overrides)
        return cls(L=L, **base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["moe_layers"] = list(self.moe_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SmoeConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class TokenLayout:
    """One token per edge, with its plus stencil and the shared-check attention mask."""

    L: int
    incident_checks: np.ndarray  # (N, 4) check ids in north/east/south/west order
    attention_mask: np.ndarray = field(repr=False)  # (N, N) bool

    @property
    def tokens(self) -> int:
        return self.incident_checks.shape[0]

    def additive_mask(self) -> np.ndarray:
        return np.where(self.attention_mask, 0.0, ad.MASK_NEG)


def syndrome_grid(code: ToricCode, s: np.ndarray) -> np.ndarray:
    """View syndromes as two L x L channels: 0 = stars, 1 = plaquettes."""
    s = np.asarray(s)
    if s.shape[-1] != code.m:
        raise ValueError(f"syndrome length {s.shape[-1]} does not match m={code.m}")
    return s.reshape(*s.shape[:-1], 2, code.L, code.L)


def grid_to_syndrome(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid)
    return grid.reshape(*grid.shape[:-3], -1)


def build_layout(code: ToricCode) -> TokenLayout:
    incident = np.array([code.plus_neighbors(e) for e in range(code.n)], dtype=np.int64)
    touch = np.zeros((code.n, code.m), dtype=np.int64)
    touch[np.repeat(np.arange(code.n), 4), incident.ravel()] = 1
    mask = (touch @ touch.T) > 0
    incident.setflags(write=False)
    mask.setflags(write=False)
    return TokenLayout(code.L, incident, mask)


def slot_orthogonality_loss(slots: Tensor, experts: int, slots_per_expert: int) -> Tensor:
    """Cross-expert cosine similarity of slot inputs, scaled by 1/(2(n_e - 1) p_s).

    ``slots`` is ``(S, d)`` or ``(B, S, d)``; batched input is averaged over B.
    """
    S = experts * slots_per_expert
    if slots.shape[-2] != S:
        raise ValueError(f"expected {S} slots, got {slots.shape[-2]}")
    if experts == 1:
        return Tensor(0.0)
    owner = np.arange(S) // slots_per_expert
    cross = (owner[:, None] != owner[None, :]).astype(np.float64)
    sims = ad.cosine_similarity_matrix(slots)
    per = ad.tsum(ad.mul(sims, cross), axis=(-2, -1))
    per = ad.mul(per, 1.0 / (2 * (experts - 1) * slots_per_expert))
    return ad.mean(per) if slots.ndim == 3 else per


class MoeTrace(NamedTuple):
    slot_inputs: Tensor  # (B, S, d)
    dispatch: np.ndarray  # (B, N, S), columns sum to 1 over tokens
    combine: np.ndarray  # (B, N, S), rows sum to 1 over slots
    expert_calls: int  # slot vectors pushed through experts per sample


class Forward(NamedTuple):
    logits: Tensor  # (B, 2n)
    moe: list[MoeTrace]
    attention: list[np.ndarray]  # (B, H, N, N) per block


class Losses(NamedTuple):
    ber: Tensor
    ler: Tensor
    os: Tensor
    overall: Tensor


class QuantumSMoE:
    """Decoder model; parameters live in :attr:`params` in a fixed order."""

    def __init__(self, config: SmoeConfig, seed: int = 0, code: ToricCode | None = None):
        self.config = config
        self.code = code or build_toric_code(config.L)
        if self.code.L != config.L:
            raise ValueError(f"code L={self.code.L} does not match config L={config.L}")
        self.layout = build_layout(self.code)
        self._mask = self.layout.additive_mask() if config.use_mask else None
        supports = [np.flatnonzero(row) for row in self.code.logical_matrix]
        if len({len(s) for s in supports}) != 1:
            raise ValueError("logical supports of unequal weight are not supported")
        self._logical_support = np.stack(supports)
        self.params = self._init_params(np.random.default_rng(seed))

    # parameters -------------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> ModelParams:
        c = self.config
        d, N, std = c.embed_dim, self.layout.tokens, c.init_std
        P = ModelParams()
        tn = lambda *shape: truncated_normal(rng, shape, std)  # noqa: E731
        P.add("embed.w", tn(4, d))
        P.add("embed.b", np.zeros(d))
        P.add("embed.pos", tn(N, d))
        for i in range(c.layers):
            pre = f"block{i}."
            P.add(pre + "ln1.g", np.ones(d))
            P.add(pre + "ln1.b", np.zeros(d))
            P.add(pre + "attn.qkv.w", tn(d, 3 * d))
            P.add(pre + "attn.qkv.b", np.zeros(3 * d))
            P.add(pre + "attn.o.w", tn(d, d))
            P.add(pre + "attn.o.b", np.zeros(d))
            P.add(pre + "ln2.g", np.ones(d))
            P.add(pre + "ln2.b", np.zeros(d))
            if i in c.moe_layers:
                E, h = c.experts, c.expert_hidden
                P.add(pre + "moe.phi", tn(d, c.slots))
                P.add(pre + "moe.w1", tn(E, d, h))
                P.add(pre + "moe.b1", np.zeros((E, 1, h)))
                P.add(pre + "moe.w2", tn(E, h, d))
                P.add(pre + "moe.b2", np.zeros((E, 1, d)))
            else:
                P.add(pre + "mlp.w1", tn(d, c.mlp_hidden))
                P.add(pre + "mlp.b1", np.zeros(c.mlp_hidden))
                P.add(pre + "mlp.w2", tn(c.mlp_hidden, d))
                P.add(pre + "mlp.b2", np.zeros(d))
        P.add("final_ln.g", np.ones(d))
        P.add("final_ln.b", np.zeros(d))
        if c.head == "pool":
            P.add("head.w1", tn(d, c.head_hidden))
            P.add("head.b1", np.zeros(c.head_hidden))
            P.add("head.w2", tn(c.head_hidden, 2 * self.code.n))
            P.add("head.b2", np.zeros(2 * self.code.n))
        else:
            P.add("head.w", tn(d, 2))
            P.add("head.b", np.zeros(2))
        return P

    # layers -------------------------------------------------------------------

    def embed(self, syndromes: np.ndarray, with_position: bool = True) -> Tensor:
        """Plus-stencil embedding: affine map of each edge's four checks (+ position)."""
        s = np.asarray(syndromes, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.shape[-1] != self.code.m:
            raise ValueError(f"syndrome length {s.shape[-1]} does not match m={self.code.m}")
        P = self.params
        x = ad.stencil_conv(Tensor(s), self.layout.incident_checks, P["embed.w"], P["embed.b"])
        return ad.add(x, P["embed.pos"]) if with_position else x

    def _attention(self, x: Tensor, pre: str) -> tuple[Tensor, np.ndarray]:
        P = self.params
        qkv = ad.linear(x, P[pre + "attn.qkv.w"], P[pre + "attn.qkv.b"])
        out, probs = ad.multihead_attention(qkv, self.config.heads, self._mask, return_probs=True)
        return ad.linear(out, P[pre + "attn.o.w"], P[pre + "attn.o.b"]), probs

    def _mlp(self, x: Tensor, pre: str) -> Tensor:
        P = self.params
        h = ad.gelu(ad.linear(x, P[pre + "mlp.w1"], P[pre + "mlp.b1"]))
        return ad.linear(h, P[pre + "mlp.w2"], P[pre + "mlp.b2"])

    def softmoe(self, x: Tensor, pre: str) -> tuple[Tensor, MoeTrace]:
        """SoftMoE: dispatch tokens into slots, run each expert on its slots, combine back."""
        c, P = self.config, self.params
        B, N, d = x.shape
        E, Ps = c.experts, c.slots_per_expert
        logits = ad.linear(x, P[pre + "moe.phi"])  # (B, N, S)
        dispatch = ad.softmax(logits, axis=-2)  # normalized over tokens
        combine = ad.softmax(logits, axis=-1)  # normalized over slots
        slots_in = ad.matmul(ad.transpose(dispatch, (0, 2, 1)), x)  # (B, S, d)
        grouped = ad.reshape(slots_in, (B, E, Ps, d))
        h = ad.gelu(ad.add(ad.matmul(grouped, P[pre + "moe.w1"]), P[pre + "moe.b1"]))
        y = ad.add(ad.matmul(h, P[pre + "moe.w2"]), P[pre + "moe.b2"])
        y = ad.reshape(y, (B, E * Ps, d))
        out = ad.matmul(combine, y)
        return out, MoeTrace(slots_in, dispatch.data, combine.data, E * Ps)

    def block(self, x: Tensor, i: int) -> tuple[Tensor, MoeTrace | None, np.ndarray]:
        pre = f"block{i}."
        P = self.params
        a, probs = self._attention(ad.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"]), pre)
        x = ad.add(x, a)
        h = ad.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        trace = None
        if i in self.config.moe_layers:
            f, trace = self.softmoe(h, pre)
        else:
            f = self._mlp(h, pre)
        return ad.add(x, f), trace, probs

    def head(self, x: Tensor) -> Tensor:
        P = self.params
        x = ad.layer_norm(x, P["final_ln.g"], P["final_ln.b"])
        if self.config.head == "pool":
            pooled = ad.mean_pool(x)
            h = ad.gelu(ad.linear(pooled, P["head.w1"], P["head.b1"]))
            return ad.linear(h, P["head.w2"], P["head.b2"])
        B, N, _ = x.shape
        per_token = ad.linear(x, P["head.w"], P["head.b"])  # (B, N, 2): (z, x) of each edge
        return ad.reshape(ad.transpose(per_token, (0, 2, 1)), (B, 2 * N))

    def forward(self, syndromes: np.ndarray) -> Forward:
        x = self.embed(syndromes)
        traces, attn = [], []
        for i in range(self.config.layers):
            x, tr, probs = self.block(x, i)
            attn.append(probs)
            if tr is not None:
                traces.append(tr)
        return Forward(self.head(x), traces, attn)

    # losses ---------------------------------------------------------------

    def soft_logical_parity(self, logits: Tensor) -> Tensor:
        """Differentiable logical parities: (1 - prod(1 - 2 q_i)) / 2 over each logical support."""
        factors = ad.neg(ad.tanh(ad.mul(logits, 0.5)))  # 1 - 2 sigmoid(z) = -tanh(z / 2)
        prods = ad.prod(ad.gather(factors, self._logical_support), axis=-1)
        return ad.mul(ad.add(ad.neg(prods), 1.0), 0.5)

    def losses(self, fwd: Forward, errors: np.ndarray, logical_targets: np.ndarray | None = None) -> Losses:
        c = self.config
        errors = np.asarray(errors, dtype=np.float64)
        if errors.ndim == 1:
            errors = errors[None, :]
        if logical_targets is None:
            logical_targets = (errors.astype(np.int64) @ self.code.logical_matrix.T.astype(np.int64)) & 1
        ber = ad.bce_with_logits(fwd.logits, errors)
        ler = ad.bce(self.soft_logical_parity(fwd.logits), np.asarray(logical_targets, dtype=np.float64))
        if fwd.moe:
            terms = [slot_orthogonality_loss(t.slot_inputs, c.experts, c.slots_per_expert) for t in fwd.moe]
            os_loss = terms[0]
            for t in terms[1:]:
                os_loss = ad.add(os_loss, t)
            os_loss = ad.mul(os_loss, 1.0 / len(terms))
        else:
            os_loss = Tensor(0.0)
        overall = ad.add(ad.add(ad.mul(ber, c.lambda_ber), ad.mul(ler, c.lambda_ler)), ad.mul(os_loss, c.lambda_os))
        if not np.isfinite(overall.data):
            raise NonFiniteError(
                f"non-finite loss: ber={ber.data} ler={ler.data} os={os_loss.data}")
        return Losses(ber, ler, os_loss, overall)

    def loss(self, syndromes: np.ndarray, errors: np.ndarray, logical_targets=None) -> Losses:
        return self.losses(self.forward(syndromes), errors, logical_targets)

    # inference ---------------------------------------------------------------

    def predict(self, syndromes: np.ndarray, batch: int = 512) -> np.ndarray:
        s = np.asarray(syndromes)
        single = s.ndim == 1
        s = s[None, :] if single else s
        out = np.concatenate([self.forward(s[i:i + batch]).logits.data for i in range(0, len(s), batch)]) \
            if len(s) else np.zeros((0, 2 * self.code.n))
        return out[0] if single else out

    def decode_hard(self, syndromes: np.ndarray) -> np.ndarray:
        """Threshold sigmoid(logits) at 0.5; a logit of exactly 0 maps to bit 0."""
        return (self.predict(syndromes) > 0).astype(np.uint8)

    def __call__(self, syndromes: np.ndarray) -> np.ndarray:
        return self.decode_hard(syndromes)

    def dispatch_weights(self, syndrome: np.ndarray) -> list[np.ndarray]:
        """Dispatch matrices ``D`` (tokens x slots) of every MoE block for one syndrome."""
        fwd = self.forward(np.asarray(syndrome)[None, :])
        return [t.dispatch[0] for t in fwd.moe]
