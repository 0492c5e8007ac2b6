"""Training loop with cosine-decayed AdamW, validation LER, and resumable checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from toricmoe.decoders import Decoder
from toricmoe.model import QuantumSMoE, SmoeConfig
from toricmoe.noise import Dataset, dataset_bytes
from toricmoe.optim import AdamW, NonFiniteError, clip_grad_norm, cosine_lr, load_tensors, save_tensors

LAST_CKPT = "last.ckpt"
BEST_CKPT = "best.ckpt"
LOG_NAME = "train_log.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if self.weight_decay < 0 or self.clip_norm < 0:
            raise ValueError("weight_decay and clip_norm must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    steps: int
    lr_end: float
    ber: float
    ler: float
    os: float
    overall: float
    val_ler: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    best_val_ler: float = math.inf
    out_dir: Path | None = None


def dataset_hash(ds: Dataset) -> str:
    return hashlib.sha256(dataset_bytes(ds)).hexdigest()


def logical_failure_rate(model: QuantumSMoE, ds: Dataset, batch: int = 512) -> float:
    """Fraction of samples whose hard prediction leaves a residual syndrome or a logical flip."""
    code = model.code
    est = model.decode_hard(ds.syndromes) if len(ds) <= batch else np.concatenate(
        [model.decode_hard(ds.syndromes[i:i + batch]) for i in range(0, len(ds), batch)])
    resid = (est ^ ds.errors).astype(np.int64)
    bad_syn = ((resid @ code.syndrome_matrix.T.astype(np.int64)) & 1).any(axis=1)
    bad_log = ((resid @ code.logical_matrix.T.astype(np.int64)) & 1).any(axis=1)
    return float(np.mean(bad_syn | bad_log)) if len(ds) else 0.0


def steps_per_epoch(n: int, batch: int) -> int:
    return -(-n // batch)


def _save(path: Path, model: QuantumSMoE, opt: AdamW, meta: dict) -> str:
    tensors = dict(model.params.state())
    tensors.update(opt.state())
    return save_tensors(path, tensors, meta)


def load_model(path: str | Path) -> tuple[QuantumSMoE, dict]:
    """Rebuild a model from a checkpoint written by :func:`train`."""
    tensors, meta, digest = load_tensors(path)
    cfg = SmoeConfig.from_dict(meta["model_config"])
    model = QuantumSMoE(cfg, seed=int(meta.get("train_config", {}).get("seed", 0)))
    model.params.load_state(tensors)
    meta = dict(meta)
    meta["checkpoint_sha256"] = digest
    return model, meta


def train(model_config: SmoeConfig, train_config: TrainConfig, dataset: Dataset, val_set: Dataset,
          out_dir: str | Path, resume: bool = False,
          progress: Callable[[str], None] | None = None, max_epochs: int | None = None) -> TrainResult:
    """Train from scratch (or resume from ``out_dir/last.ckpt``).

    Writes ``last.ckpt`` after every epoch, ``best.ckpt`` whenever validation
    LER improves (strictly), and appends one JSON line per epoch to the log.
    ``max_epochs`` stops early after that many epochs in this call, which is
    how resumption is tested.
    """
    if dataset.L != model_config.L or val_set.L != model_config.L:
        raise ValueError(f"dataset L={dataset.L}/{val_set.L} does not match model L={model_config.L}")
    if len(dataset) == 0:
        raise ValueError("empty training set")
    overlap = np.intersect1d(dataset.seed_id, val_set.seed_id) if dataset.seed == val_set.seed else []
    if len(overlap):
        raise ValueError(f"validation records overlap the training set ({len(overlap)} shared seeds)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = train_config
    model = QuantumSMoE(model_config, seed=tc.seed)
    opt = AdamW(model.params, lr=tc.lr_max, weight_decay=tc.weight_decay)
    spe = steps_per_epoch(len(dataset), tc.batch_size)
    total = spe * tc.epochs
    prov = {
        "model_config": model_config.to_dict(),
        "train_config": tc.to_dict(),
        "train_data_sha256": dataset_hash(dataset),
        "val_data_sha256": dataset_hash(val_set),
        "train_samples": len(dataset),
        "val_samples": len(val_set),
    }
    result = TrainResult(out_dir=out)
    start_epoch = 0
    log_path = out / LOG_NAME
    if resume:
        tensors, meta, _ = load_tensors(out / LAST_CKPT)
        for key in ("model_config", "train_config", "train_data_sha256", "val_data_sha256"):
            if meta[key] != prov[key]:
                raise ValueError(f"cannot resume: {key} differs from the checkpoint")
        model.params.load_state(tensors)
        opt.load_state(tensors, meta["optimizer_step"])
        start_epoch = meta["epoch"] + 1
        result.history = [EpochLog(**h) for h in meta["history"]]
        result.best_epoch = meta["best_epoch"]
        result.best_val_ler = meta["best_val_ler"] if meta["best_epoch"] >= 0 else math.inf
        # drop log lines from epochs after the checkpoint (a crash can leave them behind)
        log_path.write_text("".join(h.to_json() + "\n" for h in result.history))
    else:
        log_path.write_text("")

    stop = tc.epochs if max_epochs is None else min(tc.epochs, start_epoch + max_epochs)
    for epoch in range(start_epoch, stop):
        order = np.random.default_rng([tc.seed, epoch]).permutation(len(dataset))
        sums = np.zeros(4)
        lr = tc.lr_max
        for b in range(spe):
            idx = order[b * tc.batch_size:(b + 1) * tc.batch_size]
            step = epoch * spe + b
            try:
                losses = model.loss(dataset.syndromes[idx], dataset.errors[idx], dataset.logicals[idx])
                model.params.zero_grad()
                losses.overall.backward()
                clip_grad_norm(model.params, tc.clip_norm)
                lr = cosine_lr(step, total, tc.lr_max, tc.lr_min)
                opt.step(lr)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch} batch {b} (step {step}): {exc}") from exc
            sums += [float(losses.ber.data), float(losses.ler.data), float(losses.os.data),
                     float(losses.overall.data)]
            if progress and b % 100 == 0:
                progress(f"epoch {epoch} batch {b}/{spe} loss {float(losses.overall.data):.5f}")
        means = sums / spe
        val = logical_failure_rate(model, val_set)
        entry = EpochLog(epoch, (epoch + 1) * spe, lr, *map(float, means), val)
        result.history.append(entry)
        with log_path.open("a") as fh:
            fh.write(entry.to_json() + "\n")
        if val < result.best_val_ler:
            result.best_val_ler = val
            result.best_epoch = epoch
            best_meta = dict(prov, epoch=epoch, optimizer_step=opt.t, val_ler=val)
            _save(out / BEST_CKPT, model, opt, best_meta)
        meta = dict(prov, epoch=epoch, optimizer_step=opt.t,
                    history=[asdict(h) for h in result.history],
                    best_epoch=result.best_epoch,
                    best_val_ler=result.best_val_ler if result.best_epoch >= 0 else None)
        _save(out / LAST_CKPT, model, opt, meta)
        if progress:
            progress(f"epoch {epoch}: overall {means[3]:.5f} ber {means[0]:.5f} ler {means[1]:.5f} "
                     f"os {means[2]:.5f} val_ler {val:.4f}")
    return result


def stderr_progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


class ModelDecoder(Decoder):
    """Hard-decision neural decoder wrapped for the evaluation harness."""

    name = "model"

    def __init__(self, model: QuantumSMoE, checkpoint_meta: dict | None = None, batch: int = 512):
        self.model = model
        self.code = model.code
        self.meta = checkpoint_meta or {}
        self.batch = batch

    def decode_batch(self, syndromes):
        return self.model.decode_hard(np.asarray(syndromes)) if len(syndromes) else \
            np.zeros((0, 2 * self.code.n), dtype=np.uint8)

    def metadata(self) -> dict:
        return {
            "algorithm": "QuantumSMoE hard decision (logit > 0)",
            "model_config": self.model.config.to_dict(),
            "checkpoint_sha256": self.meta.get("checkpoint_sha256"),
            "train_data_sha256": self.meta.get("train_data_sha256"),
            "syndrome_inconsistent_output": "counted as logical failure",
        }
