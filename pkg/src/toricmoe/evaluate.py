"""Monte Carlo BER/LER evaluation with Wilson intervals, CSV reports, and SVG curves."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from toricmoe.decoders import Decoder
from toricmoe.lattice import ToricCode
from toricmoe.noise import DepolarizingChannel, record_rng, sample_error

MIN_TRIALS = 1000
Z95 = 1.959963984540054

CSV_COLUMNS = ("decoder", "L", "p", "trials", "ber", "ber_lo", "ber_hi",
               "ler", "ler_lo", "ler_hi", "ns_per_decode", "config_hash")

# QuantumSMoE LER at L=6 reported for the full-scale model (reference overlay only)
REFERENCE_L6 = {0.05: 0.0035, 0.07: 0.0124, 0.09: 0.0492, 0.11: 0.0985, 0.13: 0.169, 0.15: 0.256}


def wilson_interval(k: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("Wilson interval needs n > 0")
    if not 0 <= k <= n:
        raise ValueError(f"count {k} outside [0, {n}]")
    phat = k / n
    denom = 1.0 + z * z / n
    centre = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    # clamp round-off so the interval always contains the estimate
    return max(0.0, min(centre - half, phat)), min(1.0, max(centre + half, phat))


@dataclass(frozen=True)
class EvalCounts:
    """Exact tallies for one (decoder, L, p); merging adds counts."""

    decoder: str
    L: int
    p: float
    config_hash: str
    trials: int
    bits: int
    bit_errors: int
    failures: int
    logical_failures: int  # residual acts on the logicals (syndrome ignored)
    syndrome_failures: int  # residual leaves a nonzero syndrome
    exceptions: int
    decode_ns: int | None = None  # total decode time; only filled when timing is requested

    def __post_init__(self):
        if self.trials <= 0:
            raise ValueError("trials must be > 0")

    @property
    def key(self) -> tuple:
        return (self.decoder, self.L, self.p, self.config_hash)

    def merge(self, other: "EvalCounts") -> "EvalCounts":
        if other.key != self.key:
            raise ValueError(f"cannot merge {other.key} into {self.key}")
        ns = None if self.decode_ns is None or other.decode_ns is None else self.decode_ns + other.decode_ns
        return EvalCounts(self.decoder, self.L, self.p, self.config_hash,
                          self.trials + other.trials, self.bits + other.bits,
                          self.bit_errors + other.bit_errors, self.failures + other.failures,
                          self.logical_failures + other.logical_failures,
                          self.syndrome_failures + other.syndrome_failures,
                          self.exceptions + other.exceptions, ns)

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits

    @property
    def ler(self) -> float:
        return self.failures / self.trials

    def row(self) -> dict:
        ber_lo, ber_hi = wilson_interval(self.bit_errors, self.bits)
        ler_lo, ler_hi = wilson_interval(self.failures, self.trials)
        ns = "" if self.decode_ns is None else f"{self.decode_ns / self.trials:.1f}"
        return {"decoder": self.decoder, "L": self.L, "p": repr(self.p), "trials": self.trials,
                "ber": repr(self.ber), "ber_lo": repr(ber_lo), "ber_hi": repr(ber_hi),
                "ler": repr(self.ler), "ler_lo": repr(ler_lo), "ler_hi": repr(ler_hi),
                "ns_per_decode": ns, "config_hash": self.config_hash}


def merge_counts(parts: Iterable[EvalCounts]) -> list[EvalCounts]:
    """Merge shards by key; the result is sorted, so it does not depend on input order."""
    acc: dict[tuple, EvalCounts] = {}
    for c in parts:
        acc[c.key] = acc[c.key].merge(c) if c.key in acc else c
    return [acc[k] for k in sorted(acc, key=lambda k: (k[0], k[1], k[2], k[3]))]


def config_hash(decoder: Decoder, L: int, p: float, seed: int) -> str:
    blob = json.dumps({"decoder": decoder.name, "metadata": decoder.metadata(), "L": L, "p": p,
                       "seed": seed}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def sample_trials(code: ToricCode, p: float, seed: int, start: int, count: int) -> np.ndarray:
    """Errors for trials ``start .. start+count-1``; trial i always draws from stream (seed, i)."""
    ch = DepolarizingChannel(p)
    out = np.empty((count, 2 * code.n), dtype=np.uint8)
    for i in range(count):
        out[i] = sample_error(ch, code, record_rng(seed, start + i))
    return out


def _decode_guarded(decoder: Decoder, syndromes: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Decode a batch; on failure fall back to per-sample calls and flag the ones that raise."""
    try:
        est = np.asarray(decoder.decode_batch(syndromes), dtype=np.uint8)
        if est.shape == (len(syndromes), width):
            return est, np.zeros(len(syndromes), dtype=bool)
    except Exception:  # noqa: BLE001 - decoder failures are tallied, not fatal
        pass
    est = np.zeros((len(syndromes), width), dtype=np.uint8)
    raised = np.zeros(len(syndromes), dtype=bool)
    for i, s in enumerate(syndromes):
        try:
            e = np.asarray(decoder.decode(s), dtype=np.uint8)
            if e.shape != (width,):
                raise ValueError(f"decoder returned shape {e.shape}")
            est[i] = e
        except Exception:  # noqa: BLE001
            raised[i] = True
    return est, raised


def evaluate(decoder: Decoder, code: ToricCode, p: float, trials: int, seed: int, start: int = 0,
             batch: int = 1000, timing: bool = False) -> EvalCounts:
    """Monte Carlo estimate of BER and LER on trials ``start .. start+trials-1``.

    A trial fails if the residual ``eps_hat ^ eps`` has a nonzero syndrome or
    flips a logical. A decoder exception counts as a failure (its estimate is
    taken as the all-zero error for BER) and is also tallied separately.
    """
    if trials < MIN_TRIALS:
        raise ValueError(f"trials must be >= {MIN_TRIALS}, got {trials}")
    width = 2 * code.n
    hs = code.syndrome_matrix.T.astype(np.int64)
    hl = code.logical_matrix.T.astype(np.int64)
    bit_err = fail = lfail = sfail = exc = 0
    ns = 0
    for lo in range(0, trials, batch):
        cnt = min(batch, trials - lo)
        errs = sample_trials(code, p, seed, start + lo, cnt)
        syn = ((errs.astype(np.int64) @ hs) & 1).astype(np.uint8)
        t0 = time.perf_counter_ns()
        est, raised = _decode_guarded(decoder, syn, width)
        ns += time.perf_counter_ns() - t0
        resid = (est ^ errs).astype(np.int64)
        bad_syn = ((resid @ hs) & 1).any(axis=1)
        bad_log = ((resid @ hl) & 1).any(axis=1)
        failed = bad_syn | bad_log | raised
        bit_err += int(resid.sum())
        fail += int(failed.sum())
        lfail += int(bad_log.sum())
        sfail += int(bad_syn.sum())
        exc += int(raised.sum())
    return EvalCounts(decoder.name, code.L, float(p), config_hash(decoder, code.L, float(p), seed),
                      trials, trials * width, bit_err, fail, lfail, sfail, exc, ns if timing else None)


# reports ------------------------------------------------------------------------

def render_csv(counts: Sequence[EvalCounts], header: dict) -> str:
    """CSV text: '#'-prefixed JSON provenance lines, the column header, rows, then exact counts."""
    buf = io.StringIO()
    buf.write("# config " + json.dumps(header, sort_keys=True, default=str) + "\n")
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for c in counts:
        w.writerow(c.row())
    for c in counts:
        buf.write("# counts " + json.dumps(asdict(c), sort_keys=True) + "\n")
    return buf.getvalue()


def write_csv(path: str | Path, counts: Sequence[EvalCounts], header: dict) -> None:
    Path(path).write_text(render_csv(counts, header))


def read_csv(path: str | Path) -> tuple[list[EvalCounts], dict]:
    header: dict = {}
    counts = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# config "):
            header = json.loads(line[len("# config "):])
        elif line.startswith("# counts "):
            counts.append(EvalCounts(**json.loads(line[len("# counts "):])))
    if not counts:
        raise ValueError(f"{path}: no count records found")
    return counts, header


def check_grids(counts: Sequence[EvalCounts]) -> list[float]:
    """Every (decoder, L) series must cover the same set of rates; returns the shared grid."""
    grids: dict[tuple, set] = {}
    for c in counts:
        grids.setdefault((c.decoder, c.L), set()).add(c.p)
    values = list(grids.values())
    if any(g != values[0] for g in values[1:]):
        detail = {f"{d}/L={L}": sorted(g) for (d, L), g in sorted(grids.items())}
        raise ValueError(f"reports do not share a p-grid: {detail}")
    return sorted(values[0]) if values else []


def compare(counts: Sequence[EvalCounts]) -> list[EvalCounts]:
    """Merge all shards, check the grid, and rank rows by (L, p, LER, decoder)."""
    merged = merge_counts(counts)
    check_grids(merged)
    return sorted(merged, key=lambda c: (c.L, c.p, c.ler, c.decoder))


# curves -------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_svg(counts: Sequence[EvalCounts], reference: bool = False, width: int = 640, height: int = 440) -> str:
    """LER vs p on a log-scale y axis. Each measured point is one <circle>.

    A LER of exactly 0 cannot be drawn on a log axis; such points sit on the
    bottom edge and carry ``data-clamped="1"``.
    """
    series: dict[tuple, list[EvalCounts]] = {}
    for c in counts:
        series.setdefault((c.decoder, c.L), []).append(c)
    ps = [c.p for c in counts] + (list(REFERENCE_L6) if reference else [])
    positive = [c.ler for c in counts if c.ler > 0] + (list(REFERENCE_L6.values()) if reference else [])
    ymin = 10 ** math.floor(math.log10(min(positive))) if positive else 1e-4
    ymax = 1.0
    xmin, xmax = (min(ps), max(ps)) if ps else (0.0, 1.0)
    if xmax == xmin:
        xmax = xmin + 1e-3
    left, right, top, bottom = 70, width - 150, 30, height - 50

    def sx(p):
        return left + (p - xmin) / (xmax - xmin) * (right - left)

    def sy(v):
        v = max(v, ymin)
        return bottom - (math.log10(v) - math.log10(ymin)) / (math.log10(ymax) - math.log10(ymin)) * (bottom - top)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">']
    table = ["decoder,L,p,ler,ler_lo,ler_hi"]
    for c in counts:
        r = c.row()
        table.append(f"{c.decoder},{c.L},{r['p']},{r['ler']},{r['ler_lo']},{r['ler_hi']}")
    if reference:
        table += [f"reference,6,{p!r},{v!r},," for p, v in REFERENCE_L6.items()]
    out.append("<!-- data\n" + "\n".join(table) + "\n-->")
    out.append(f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
               f'fill="none" stroke="black"/>')
    decade = ymin
    while decade <= ymax * 1.0001:
        y = _fmt(sy(decade))
        out.append(f'<line x1="{left}" y1="{y}" x2="{right}" y2="{y}" stroke="#dddddd"/>')
        out.append(f'<text x="{left - 6}" y="{y}" font-size="11" text-anchor="end">{decade:.0e}</text>')
        decade *= 10
    for p in sorted(set(ps)):
        out.append(f'<text x="{_fmt(sx(p))}" y="{bottom + 16}" font-size="10" text-anchor="middle">{p:g}</text>')
    out.append(f'<text x="{(left + right) // 2}" y="{height - 12}" font-size="12" text-anchor="middle">'
               f'physical error rate p</text>')
    out.append(f'<text x="16" y="{(top + bottom) // 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 16 {(top + bottom) // 2})">logical error rate</text>')
    for i, ((dec, L), pts) in enumerate(sorted(series.items())):
        colour = _PALETTE[i % len(_PALETTE)]
        pts = sorted(pts, key=lambda c: c.p)
        path = " ".join(f"{_fmt(sx(c.p))},{_fmt(sy(c.ler))}" for c in pts)
        out.append(f'<polyline fill="none" stroke="{colour}" points="{path}"/>')
        for c in pts:
            clamped = ' data-clamped="1"' if c.ler <= 0 else ""
            out.append(f'<circle class="point" cx="{_fmt(sx(c.p))}" cy="{_fmt(sy(c.ler))}" r="3" fill="{colour}" '
                       f'data-decoder="{dec}" data-L="{L}" data-p="{c.p!r}" data-ler="{c.ler!r}"{clamped}/>')
        ly = top + 16 * i + 10
        out.append(f'<text x="{right + 10}" y="{ly}" font-size="11" fill="{colour}">{dec} L={L}</text>')
    if reference:
        ly = top + 16 * len(series) + 10
        for p, v in REFERENCE_L6.items():
            out.append(f'<rect class="reference" x="{_fmt(sx(p) - 3)}" y="{_fmt(sy(v) - 3)}" width="6" height="6" '
                       f'fill="none" stroke="black" data-p="{p!r}" data-ler="{v!r}"/>')
        out.append(f'<text x="{right + 10}" y="{ly}" font-size="11">reference L=6 (full-scale)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
