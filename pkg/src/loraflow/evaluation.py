"""Baseline and denoise-then-dechirp sweeps, advantage metrics and reports.

Every (sf, snr) grid point draws its symbols and noise from a seed derived
from ``(grid.seed, sf, snr index)``. Baseline and denoised pipelines see
the same draws, and results do not depend on evaluation order.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .augment import null_condition
from .exceptions import ParameterError
from .flow import OracleVelocity, euler_sample, insert_received
from .modem import LoRaParams, add_awgn, dechirp_demod, modulate_symbol, symbol_error_rate

DEFAULT_SNRS = tuple(float(s) for s in np.arange(-40.0, -10.0 + 1e-9, 2.5))
DEFAULT_NFES = (1, 2, 4, 8, 16, 32)
COLUMNS = ("sf", "snr_db", "nfe", "baseline_acc", "denoised_acc", "advantage",
           "baseline_ser", "denoised_ser", "ser_advantage")


@dataclass(frozen=True)
class SweepGrid:
    snr_db: tuple[float, ...] = DEFAULT_SNRS
    nfe: tuple[int, ...] = DEFAULT_NFES
    trials: int = 1000
    sf: tuple[int, ...] = (7,)
    seed: int = 0
    bw: float = 125_000.0
    direction: str = "up"
    chunk: int = 1000

    def __post_init__(self):
        if self.trials < 1:
            raise ParameterError("trials must be >= 1")
        if list(self.snr_db) != sorted(self.snr_db):
            raise ParameterError("snr_db must be sorted ascending")
        if any(n < 1 for n in self.nfe):
            raise ParameterError("nfe values must be >= 1")


@dataclass
class ReportRow:
    sf: int
    snr_db: float
    nfe: int
    baseline_acc: float
    denoised_acc: float
    advantage: float
    baseline_ser: float
    denoised_ser: float
    ser_advantage: float


@dataclass
class AdvantageReport:
    rows: list[ReportRow] = field(default_factory=list)

    def curve(self, sf: int, nfe: int) -> tuple[np.ndarray, np.ndarray]:
        pts = sorted((r.snr_db, r.advantage) for r in self.rows if r.sf == sf and r.nfe == nfe)
        return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])

    @property
    def auc(self) -> dict[int, dict[int, float]]:
        """Trapezoidal area under advantage-vs-SNR(dB), per sf and nfe."""
        out: dict[int, dict[int, float]] = {}
        for sf in sorted({r.sf for r in self.rows}):
            for nfe in sorted({r.nfe for r in self.rows if r.sf == sf}):
                snr, adv = self.curve(sf, nfe)
                if len(snr) >= 2:
                    out.setdefault(sf, {})[nfe] = auc(snr, adv)
        return out

    def mean_advantage(self, sf: int, nfe: int, lo: float = -np.inf, hi: float = np.inf) -> float:
        vals = [r.advantage for r in self.rows if r.sf == sf and r.nfe == nfe and lo <= r.snr_db <= hi]
        return float(np.mean(vals))


def make_row(sf, snr_db, nfe, baseline_acc, denoised_acc) -> ReportRow:
    baseline_ser, denoised_ser = 1.0 - baseline_acc, 1.0 - denoised_acc
    return ReportRow(int(sf), float(snr_db), int(nfe), float(baseline_acc), float(denoised_acc),
                     float(denoised_acc - baseline_acc), float(baseline_ser), float(denoised_ser),
                     float(baseline_ser - denoised_ser))


def auc(snr_db, advantage) -> float:
    snr_db = np.asarray(snr_db, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    if snr_db.size < 2 or snr_db.shape != advantage.shape:
        raise ParameterError("need at least two (snr, advantage) points of equal length")
    return float(np.trapezoid(advantage, snr_db))


def draw_point(grid: SweepGrid, sf: int, snr_index: int):
    """Symbols, clean chirps and received buffers for one grid point."""
    params = LoRaParams(sf, grid.bw, grid.direction)
    rng = np.random.default_rng(np.random.SeedSequence([grid.seed, sf, snr_index]))
    symbols = rng.integers(0, params.n_samples, grid.trials)
    clean = modulate_symbol(params, symbols)
    received = add_awgn(clean, grid.snr_db[snr_index], rng)
    return params, symbols, clean, received


def run_baseline(grid: SweepGrid) -> dict[tuple[int, float], tuple[float, float]]:
    """Plain dechirp accuracy and SER per (sf, snr)."""
    out = {}
    for sf in grid.sf:
        for i, snr in enumerate(grid.snr_db):
            params, symbols, _, received = draw_point(grid, sf, i)
            pred, _ = dechirp_demod(params, received)
            ser = symbol_error_rate(symbols, pred)
            out[(sf, snr)] = (1.0 - ser, ser)
    return out


FieldFactory = Callable[[LoRaParams, np.ndarray, object], Callable]
"""``factory(params, clean, start_state) -> velocity field`` for one chunk."""


def oracle_factory(params, clean, start):
    return OracleVelocity(clean, start)


class ModelFieldFactory:
    """Builds counted model velocity fields from a checkpoint path or model."""

    def __init__(self, model=None, checkpoint_path=None):
        self.model = model
        self.checkpoint_path = checkpoint_path

    def _load(self):
        if self.model is None:
            from .checkpoint import Checkpoint
            from .train import from_checkpoint
            self.model, _ = from_checkpoint(Checkpoint.load(self.checkpoint_path))
        self.model.eval()
        return self.model

    def __call__(self, params, clean, start):
        model = self._load()
        if params.sf > model.config.sf_max:
            raise ParameterError(f"checkpoint supports sf <= {model.config.sf_max}, grid asks for {params.sf}")
        return model.velocity_field(params.direction)

    def __getstate__(self):
        # Workers reload from disk rather than pickling live modules.
        return {"model": None if self.checkpoint_path else self.model, "checkpoint_path": self.checkpoint_path}


def _denoise_point(args):
    grid, factory, sf, i = args
    params, symbols, clean, received = draw_point(grid, sf, i)
    snr = grid.snr_db[i]
    baseline_pred, _ = dechirp_demod(params, received)
    baseline_acc = 1.0 - symbol_error_rate(symbols, baseline_pred)
    rows, counts = [], {}
    for nfe in grid.nfe:
        preds, evaluations = [], 0
        for lo in range(0, grid.trials, grid.chunk):
            sl = slice(lo, lo + grid.chunk)
            start = insert_received(received[sl], snr)
            cond = null_condition(received[sl].shape[0])
            assert not cond.any(), "evaluation must run with an all-zero condition"
            field_ = factory(params, clean[sl], start)
            calls_before = field_.calls
            denoised = euler_sample(field_, start, nfe, cond)
            evaluations += (field_.calls - calls_before) * received[sl].shape[0]
            preds.append(dechirp_demod(params, denoised)[0])
        pred = np.concatenate(preds)
        rows.append(make_row(sf, snr, nfe, baseline_acc, 1.0 - symbol_error_rate(symbols, pred)))
        counts[(sf, snr, nfe)] = evaluations
    return rows, counts


def run_denoised(factory: FieldFactory, grid: SweepGrid, workers: int = 1,
                 counts: Optional[dict] = None) -> AdvantageReport:
    """Insert, Euler-integrate and dechirp every trial at every (sf, snr, nfe).

    ``counts``, if given, receives the number of per-signal field
    evaluations spent at each grid point (``nfe * trials``).
    """
    jobs = [(grid, factory, sf, i) for sf in grid.sf for i in range(len(grid.snr_db))]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_denoise_point, jobs))
    else:
        results = [_denoise_point(job) for job in jobs]
    rows = []
    for r, c in results:
        rows.extend(r)
        if counts is not None:
            counts.update(c)
    rows.sort(key=lambda r: (r.sf, r.snr_db, r.nfe))
    return AdvantageReport(rows)


def _format(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def report_to_csv(report: AdvantageReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in report.rows:
        writer.writerow([_format(getattr(row, c)) for c in COLUMNS])
    return buf.getvalue()


def report_to_json(report: AdvantageReport) -> str:
    auc_table = {str(sf): {str(n): v for n, v in by_nfe.items()} for sf, by_nfe in report.auc.items()}
    return json.dumps({"columns": list(COLUMNS), "rows": [asdict(r) for r in report.rows],
                       "auc": auc_table}, indent=1)


def report_to_dat(report: AdvantageReport) -> str:
    """gnuplot ``splot ... with image`` input: one block per sf, one line per (snr, nfe)."""
    lines = []
    for sf in sorted({r.sf for r in report.rows}):
        lines.append(f"# sf={sf} columns: snr_db nfe advantage")
        snrs = sorted({r.snr_db for r in report.rows if r.sf == sf})
        for snr in snrs:
            for r in sorted((r for r in report.rows if r.sf == sf and r.snr_db == snr), key=lambda r: r.nfe):
                lines.append(f"{r.snr_db!r} {r.nfe} {r.advantage!r}")
            lines.append("")
        lines.append("")
    return "\n".join(lines)


def emit_report(report: AdvantageReport, path, format: str = "csv") -> Path:
    writers = {"csv": report_to_csv, "json": report_to_json, "dat": report_to_dat}
    if format not in writers:
        raise ParameterError(f"unknown report format {format!r}")
    path = Path(path)
    try:
        path.write_text(writers[format](report))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror}") from exc
    return path


_TYPES = {f.name: f.type for f in fields(ReportRow)}


def _coerce(name, value):
    return int(value) if _TYPES[name] in (int, "int") else float(value)


def parse_report(path) -> AdvantageReport:
    """Read a CSV or JSON report written by :func:`emit_report`."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        return AdvantageReport([ReportRow(**{k: _coerce(k, v) for k, v in r.items()}) for r in data["rows"]])
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != COLUMNS:
        raise ParameterError(f"unexpected CSV columns {reader.fieldnames}")
    return AdvantageReport([ReportRow(**{k: _coerce(k, v) for k, v in r.items()}) for r in reader])


def sweep(grid: SweepGrid, factory: Optional[FieldFactory] = None, workers: int = 1,
          counts: Optional[dict] = None) -> AdvantageReport:
    """Full advantage report; ``factory=None`` uses the oracle straight-line field."""
    return run_denoised(factory or oracle_factory, grid, workers, counts)
