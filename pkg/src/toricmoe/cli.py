"""Command-line entry point: ``toricmoe <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical abort.
Relative output paths resolve against ``--out-dir`` (default: the
``TORICMOE_OUT_DIR`` environment variable, else the working directory).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from toricmoe.decoders import BPDecoder, IdentityDecoder, MwpmDecoder
from toricmoe.evaluate import (MIN_TRIALS, EvalCounts, check_grids, compare, evaluate, merge_counts, read_csv,
                               render_csv, render_svg)
from toricmoe.lattice import LOGICAL_NAMES, build_toric_code, gf2_rank
from toricmoe.model import SmoeConfig
from toricmoe.noise import generate_dataset, rate_grid, read_dataset, write_dataset
from toricmoe.optim import NonFiniteError
from toricmoe.train import BEST_CKPT, ModelDecoder, TrainConfig, load_model, stderr_progress, train

OUT_ENV = "TORICMOE_OUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SHARD = 2000  # fixed trial-shard size, so results do not depend on --workers
DECODERS = ("identity", "mwpm", "bp", "model")


class ConfigError(Exception):
    pass


class ArtifactError(Exception):
    """Unreadable or corrupted input file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: config error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _grid_arg(text: str) -> tuple[float, float, int]:
    try:
        lo, hi, count = text.split(":")
        return float(lo), float(hi), int(count)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected LO:HI:COUNT, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    top = _Parser(prog="toricmoe", description="Toric-code decoding experiments.", formatter_class=fmt)
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--out-dir", default=None,
                       help=f"directory for relative output paths (default: ${OUT_ENV} or cwd)")
        if seed:
            p.add_argument("--seed", type=int, default=0, help="master seed")

    p = sub.add_parser("code-info", help="print code dimensions, rank and logicals", formatter_class=fmt)
    p.add_argument("--L", type=int, required=True, help="lattice size (even, 2..64)")
    p.add_argument("--dump", default=None, help="write a plain-text dump of H and the logicals here")
    common(p, seed=False)

    p = sub.add_parser("gen-data", help="write a seeded dataset file", formatter_class=fmt)
    p.add_argument("--L", type=int, default=4, help="lattice size")
    p.add_argument("--p", type=float, nargs="+", default=None, help="explicit list of rates")
    p.add_argument("--p-grid", type=_grid_arg, default="0.05:0.2:9", help="evenly spaced rates LO:HI:COUNT")
    p.add_argument("--count-per-rate", type=int, default=22222, help="samples per rate")
    p.add_argument("--start", type=int, default=0, help="first record counter (use disjoint ranges for splits)")
    p.add_argument("--out", required=True, help="dataset path")
    common(p)

    p = sub.add_parser("train", help="train the SoftMoE decoder", formatter_class=fmt)
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--val-data", required=True, help="validation dataset (disjoint record range)")
    p.add_argument("--model-config", default=None, help="JSON model config; overrides --preset")
    p.add_argument("--preset", choices=("desk", "full"), default="desk", help="model size preset")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr-max", type=float, default=1e-3)
    p.add_argument("--lr-min", type=float, default=1e-6)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--run-dir", default="run", help="directory for checkpoints and the loss log")
    p.add_argument("--resume", action="store_true", help="continue from RUN_DIR/last.ckpt")
    p.add_argument("--max-epochs", type=int, default=None, help="stop after this many epochs in this call")
    p.add_argument("--quiet", action="store_true", help="no progress on stderr")
    common(p)

    p = sub.add_parser("eval", help="Monte Carlo BER/LER of one decoder", formatter_class=fmt)
    p.add_argument("--decoder", choices=DECODERS, required=True)
    p.add_argument("--L", type=int, default=None, help="lattice size (model: taken from checkpoint)")
    p.add_argument("--p", type=float, nargs="+", default=None, help="explicit list of rates")
    p.add_argument("--p-grid", type=_grid_arg, default=None, help="evenly spaced rates LO:HI:COUNT")
    p.add_argument("--trials", type=int, default=10000, help=f"trials per rate (>= {MIN_TRIALS})")
    p.add_argument("--start", type=int, default=0, help="first trial counter")
    p.add_argument("--checkpoint", default=None, help="model checkpoint (decoder=model)")
    p.add_argument("--bp-iters", type=int, default=50, help="BP iteration cap")
    p.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
    p.add_argument("--timing", action="store_true", help="fill ns_per_decode (makes output non-reproducible)")
    p.add_argument("--csv", default=None, help="write the report CSV here")
    common(p)

    p = sub.add_parser("compare", help="merge reports, rank, and plot LER curves", formatter_class=fmt)
    p.add_argument("reports", nargs="+", help="report CSVs from eval")
    p.add_argument("--csv", default=None, help="merged CSV output")
    p.add_argument("--svg", default=None, help="LER-vs-p curve output")
    p.add_argument("--reference", action="store_true", help="overlay the full-scale L=6 reference values")
    common(p, seed=False)

    p = sub.add_parser("slots-export", help="dispatch weights of every MoE block for one syndrome",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--defects", default="", help="comma-separated flipped check ids (empty: zero syndrome)")
    p.add_argument("--error", default="",
                   help="alternative: Pauli error as comma-separated X<q>/Y<q>/Z<q> terms, e.g. X3,Z10")
    p.add_argument("--csv", required=True, help="output CSV")
    common(p, seed=False)
    return top


# helpers ------------------------------------------------------------------------

def _out_path(args, name: str | None) -> Path | None:
    if name is None:
        return None
    path = Path(name)
    if path.is_absolute():
        return path
    base = args.out_dir if args.out_dir is not None else os.environ.get(OUT_ENV, ".")
    return Path(base) / path


def _resolved(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("out_dir", "quiet")}
    return json.loads(json.dumps(cfg, default=str))


def _file_sha(path: Path) -> str:
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def _rates(args) -> list[float]:
    if args.p is not None:
        rates = list(args.p)
    elif args.p_grid is not None:
        lo, hi, count = args.p_grid if isinstance(args.p_grid, tuple) else _grid_arg(args.p_grid)
        rates = [float(x) for x in rate_grid(lo, hi, count)]
    else:
        raise ConfigError("give --p or --p-grid")
    for p in rates:
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"rate {p} outside [0, 1)")
    return rates


def _load_checkpoint(path):
    try:
        return load_model(path)
    except (KeyError, ValueError) as exc:
        raise ArtifactError(f"{path}: {exc}") from exc


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# subcommands --------------------------------------------------------------------

def cmd_code_info(args) -> int:
    code = build_toric_code(args.L)
    print(f"L={code.L} n={code.n} m={code.m} k={code.k} rank={gf2_rank(code.H)}")
    for name, row in zip(LOGICAL_NAMES, code.logicals):
        print(f"{name}: weight {int(row.sum())}")
    if args.dump:
        path = _out_path(args, args.dump)
        _write(path, "# config " + json.dumps(_resolved(args), sort_keys=True) + "\n" + code.dump_text())
        print(f"wrote {path}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    code = build_toric_code(args.L)
    rates = _rates(args)
    if args.count_per_rate < 1 or args.start < 0:
        raise ConfigError("--count-per-rate must be >= 1 and --start >= 0")
    ds = generate_dataset(code, rates, args.count_per_rate, args.seed, start=args.start)
    path = _out_path(args, args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = write_dataset(ds, path, config=_resolved(args))
    print(ds.summary(), end="")
    print(f"wrote {path} sha256={digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        ds = read_dataset(_out_path(args, args.data))
        val = read_dataset(_out_path(args, args.val_data))
    except ValueError as exc:
        raise ArtifactError(str(exc)) from exc
    if args.model_config:
        try:
            mc = SmoeConfig.from_dict(json.loads(Path(args.model_config).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.model_config}: {exc}") from exc
        if mc.L != ds.L:
            raise ConfigError(f"model config L={mc.L} does not match dataset L={ds.L}")
    else:
        mc = SmoeConfig.desk(L=ds.L) if args.preset == "desk" else SmoeConfig.full(L=ds.L)
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr_max=args.lr_max, lr_min=args.lr_min,
                     weight_decay=args.weight_decay, clip_norm=args.clip_norm, seed=args.seed)
    run_dir = _out_path(args, args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = {"command": _resolved(args), "model_config": mc.to_dict(), "train_config": tc.to_dict()}
    _write(run_dir / "run_config.json", json.dumps(echo, sort_keys=True, indent=2) + "\n")
    result = train(mc, tc, ds, val, run_dir, resume=args.resume,
                   progress=None if args.quiet else stderr_progress, max_epochs=args.max_epochs)
    for h in result.history:
        print(f"epoch {h.epoch:3d}  overall {h.overall:.5f}  ber {h.ber:.5f}  ler {h.ler:.5f}  "
              f"os {h.os:.5f}  val_ler {h.val_ler:.4f}")
    print(f"best epoch {result.best_epoch} val_ler {result.best_val_ler:.4f}; checkpoints in {run_dir}")
    return EXIT_OK


def _make_decoder(args, code):
    if args.decoder == "identity":
        return IdentityDecoder(code)
    if args.decoder == "mwpm":
        return MwpmDecoder(code)
    if args.decoder == "model":
        model, meta = _load_checkpoint(args.checkpoint)
        return ModelDecoder(model, meta)
    raise AssertionError(args.decoder)


def _eval_shard(job):
    args, p, lo, cnt = job
    code = build_toric_code(args.L)
    dec = BPDecoder(code, p, args.bp_iters) if args.decoder == "bp" else _make_decoder(args, code)
    return evaluate(dec, code, p, cnt, args.seed, start=args.start + lo, timing=args.timing)


def cmd_eval(args) -> int:
    if args.decoder == "model":
        if not args.checkpoint:
            raise ConfigError("--decoder model needs --checkpoint")
        model, meta = _load_checkpoint(args.checkpoint)
        if args.L is not None and args.L != model.config.L:
            raise ConfigError(f"--L {args.L} does not match checkpoint L={model.config.L}")
        args.L = model.config.L
        ckpt_hash = meta["checkpoint_sha256"]
    else:
        if args.checkpoint:
            raise ConfigError("--checkpoint only applies to --decoder model")
        ckpt_hash = None
    if args.L is None:
        raise ConfigError("--L is required")
    build_toric_code(args.L)
    if args.trials < MIN_TRIALS:
        raise ConfigError(f"--trials must be >= {MIN_TRIALS}")
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    rates = _rates(args)
    if args.decoder == "bp" and min(rates) <= 0:
        raise ConfigError("BP needs p > 0")
    # trial shards have a fixed size; counts are summed, so worker count cannot change the result
    jobs = [(args, p, lo, min(SHARD, args.trials - lo)) for p in rates for lo in range(0, args.trials, SHARD)]
    if args.workers == 1:
        parts = [_eval_shard(j) for j in jobs]
    else:
        with ProcessPoolExecutor(args.workers) as pool:
            parts = list(pool.map(_eval_shard, jobs))
    counts = merge_counts(parts)
    counts.sort(key=lambda c: c.p)
    header = {"command": _resolved(args), "inputs": {"checkpoint_sha256": ckpt_hash},
              "decoder_metadata": _decoder_metadata(args)}
    print(f"{'decoder':8s} {'L':>3s} {'p':>8s} {'trials':>7s} {'BER':>10s} {'LER':>8s}  LER 95% CI  exceptions")
    for c in counts:
        r = c.row()
        print(f"{c.decoder:8s} {c.L:3d} {c.p:8.4f} {c.trials:7d} {c.ber:10.3e} {c.ler:8.5f}  "
              f"[{float(r['ler_lo']):.5f}, {float(r['ler_hi']):.5f}]  {c.exceptions}")
    if args.csv:
        path = _out_path(args, args.csv)
        _write(path, render_csv(counts, header))
        print(f"wrote {path}")
    return EXIT_OK


def _decoder_metadata(args) -> dict:
    code = build_toric_code(args.L)
    if args.decoder == "bp":
        meta = BPDecoder(code, 0.1, args.bp_iters).metadata()
        meta["p"] = "equal to the evaluated channel rate"
        return meta
    return _make_decoder(args, code).metadata()


def cmd_compare(args) -> int:
    parts: list[EvalCounts] = []
    inputs = {}
    for name in args.reports:
        path = Path(name)
        inputs[str(path)] = _file_sha(path)
        try:
            counts, _ = read_csv(path)
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise ArtifactError(f"{path}: {exc}") from exc
        parts.extend(counts)
    try:
        ranked = compare(parts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    grid = check_grids(ranked)
    header = {"command": _resolved(args), "inputs_sha256": inputs}
    for c in ranked:
        print(f"L={c.L} p={c.p:.4f} {c.decoder:8s} LER {c.ler:.5f} BER {c.ber:.3e}")
    print(f"{len(ranked)} rows over {len(grid)} rates")
    if args.csv:
        path = _out_path(args, args.csv)
        _write(path, render_csv(ranked, header))
        print(f"wrote {path}")
    if args.svg:
        path = _out_path(args, args.svg)
        svg = render_svg(ranked, reference=args.reference)
        svg = svg.replace("<!-- data", "<!-- config " + json.dumps(header, sort_keys=True).replace("--", "- -")
                          + " -->\n<!-- data", 1)
        _write(path, svg)
        print(f"wrote {path}")
    return EXIT_OK


def _parse_error(code, text: str) -> np.ndarray:
    e = np.zeros(2 * code.n, dtype=np.uint8)
    for term in filter(None, (t.strip() for t in text.split(","))):
        kind, q = term[0].upper(), term[1:]
        if kind not in "XYZ" or not q.isdigit() or int(q) >= code.n:
            raise ConfigError(f"bad error term {term!r}")
        q = int(q)
        if kind in "XY":
            e[code.n + q] ^= 1
        if kind in "YZ":
            e[q] ^= 1
    return e


def cmd_slots_export(args) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    code = model.code
    if args.defects and args.error:
        raise ConfigError("give either --defects or --error, not both")
    if args.error:
        s = (code.syndrome_matrix.astype(np.int64) @ _parse_error(code, args.error)) % 2
    else:
        s = np.zeros(code.m, dtype=np.uint8)
        for t in filter(None, (t.strip() for t in args.defects.split(","))):
            if not t.isdigit() or int(t) >= code.m:
                raise ConfigError(f"bad check id {t!r}")
            s[int(t)] ^= 1
    mats = model.dispatch_weights(s.astype(np.uint8))
    if not mats:
        raise ConfigError("model has no MoE blocks")
    header = {"command": _resolved(args), "inputs": {"checkpoint_sha256": meta["checkpoint_sha256"]},
              "syndrome": "".join(map(str, s.astype(int)))}
    lines = ["# config " + json.dumps(header, sort_keys=True),
             "block,token,edge_kind,row,col," + ",".join(f"slot{j}" for j in range(mats[0].shape[1]))]
    for b, D in enumerate(mats):
        for tok in range(D.shape[0]):
            kind, r, c = code.edge_coord(tok)
            lines.append(f"{b},{tok},{'h' if kind == 0 else 'v'},{r},{c}," + ",".join(repr(float(x)) for x in D[tok]))
    path = _out_path(args, args.csv)
    _write(path, "\n".join(lines) + "\n")
    print(f"wrote {len(mats)} dispatch grids ({mats[0].shape[0]} tokens x {mats[0].shape[1]} slots) to {path}")
    return EXIT_OK


COMMANDS = {"code-info": cmd_code_info, "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "compare": cmd_compare, "slots-export": cmd_slots_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, TypeError) as exc:
        print(f"toricmoe {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, OSError) as exc:
        print(f"toricmoe {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"toricmoe {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"toricmoe {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
