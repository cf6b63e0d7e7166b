"""AUC, per-step gradient telemetry and run summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import UndefinedAUCError


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative label")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # tie groups [start, end) in sorted order get the mean of ranks start+1..end
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(group_rank, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RunRecord:
    """One training step of telemetry.  ``None`` marks quantities a mode does not have."""

    step: int
    loss_task1: float
    loss_task2: float
    loss_total: float
    xi_a: float | None = None
    xi_b: float | None = None
    norm_g1p: float | None = None
    norm_g1pp: float | None = None
    norm_g2: float | None = None
    lambda_a: float | None = None
    lambda_b: float | None = None
    mu_p: float | None = None
    mu_pp: float | None = None
    norm_gR1p: float | None = None
    norm_gR1pp: float | None = None


TELEMETRY_COLUMNS = tuple(f.name for f in fields(RunRecord))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


class Telemetry:
    """Append-only stream of :class:`RunRecord` rows for one run."""

    def __init__(self, stride: int = 1):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.stride = stride
        self.records: list[RunRecord] = []

    def record_step(self, rec: RunRecord) -> bool:
        """Store ``rec`` if it falls on the stride; returns whether it was kept."""
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError(f"telemetry step {rec.step} does not follow {self.records[-1].step}")
        for name, v in zip(TELEMETRY_COLUMNS, astuple(rec)):
            if v is not None and not math.isfinite(v):
                raise ValueError(f"non-finite {name} at step {rec.step}")
        if rec.step % self.stride:
            return False
        self.records.append(rec)
        return True

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TELEMETRY_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(v) for v in astuple(r)])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())


def write_telemetry(telemetry: Telemetry, path) -> None:
    telemetry.write(path)


def read_telemetry(path) -> list[RunRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            vals = {}
            for k in TELEMETRY_COLUMNS:
                v = row[k]
                vals[k] = None if v == "" else (int(v) if k == "step" else float(v))
            out.append(RunRecord(**vals))
    return out


def _window_mean(values: Sequence[float | None], take_last: bool, frac: float) -> float:
    n = len(values)
    k = max(1, int(n * frac))
    win = values[-k:] if take_last else values[:k]
    vals = [v for v in win if v is not None and math.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def norm_ratio(a: float | None, b: float | None) -> float | None:
    """``max(a/b, b/a)``; ``None`` when undefined."""
    if a is None or b is None or a <= 0 or b <= 0:
        return None
    return max(a / b, b / a)


def convergence_summary(records: Sequence[RunRecord], window: float = 0.1) -> dict[str, float]:
    """Means of |xi| and of the g1p/g2 norm ratio over the first and last windows."""
    if len(records) < 20:
        raise ValueError(f"need at least 20 telemetry steps, got {len(records)}")
    xi_a = [None if r.xi_a is None else abs(r.xi_a) for r in records]
    xi_b = [None if r.xi_b is None else abs(r.xi_b) for r in records]
    ratio = [norm_ratio(r.norm_g1p, r.norm_g2) for r in records]
    return {
        "xi_a_first": _window_mean(xi_a, False, window),
        "xi_a_last": _window_mean(xi_a, True, window),
        "xi_b_first": _window_mean(xi_b, False, window),
        "xi_b_last": _window_mean(xi_b, True, window),
        "ratio_first": _window_mean(ratio, False, window),
        "ratio_last": _window_mean(ratio, True, window),
    }


@dataclass
class EvalReport:
    mode: str
    seed: int
    dataset: str
    split: str
    epoch: int
    step: int
    auc: tuple[float, float]
    loss: tuple[float, float]

    def __post_init__(self):
        for a in self.auc:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"AUC {a} outside [0, 1]")

    def row(self) -> list:
        return [self.mode, self.seed, self.dataset, self.split, self.epoch, self.step, *self.auc, *self.loss]


EVAL_COLUMNS = ("mode", "seed", "dataset", "split", "epoch", "step", "auc_task1", "auc_task2", "loss_task1", "loss_task2")


def eval_csv(reports: Iterable[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for r in reports:
        w.writerow([_fmt(v) if isinstance(v, float) else v for v in r.row()])
    return buf.getvalue()


def read_eval_csv(path) -> list[EvalReport]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                EvalReport(
                    mode=row["mode"],
                    seed=int(row["seed"]),
                    dataset=row["dataset"],
                    split=row["split"],
                    epoch=int(row["epoch"]),
                    step=int(row["step"]),
                    auc=(float(row["auc_task1"]), float(row["auc_task2"])),
                    loss=(float(row["loss_task1"]), float(row["loss_task2"])),
                )
            )
    return out


def result_table(reports: Sequence[EvalReport]) -> tuple[str, str]:
    """One row per (mode, seed) plus a mean row per mode, as aligned text and CSV.

    When a (mode, seed) pair has several reports the latest step wins.
    """
    if not reports:
        raise ValueError("no reports to tabulate")
    latest: dict[tuple[str, int], EvalReport] = {}
    for r in reports:
        key = (r.mode, r.seed)
        if key not in latest or r.step >= latest[key].step:
            latest[key] = r
    modes = list(dict.fromkeys(r.mode for r in reports))
    rows: list[list[str]] = []
    for mode in modes:
        group = [latest[k] for k in latest if k[0] == mode]
        group.sort(key=lambda r: r.seed)
        for r in group:
            rows.append([mode, str(r.seed), _fmt(r.auc[0]), _fmt(r.auc[1]), _fmt(r.loss[0]), _fmt(r.loss[1])])
        means = [float(np.mean([getattr(r, a)[t] for r in group])) for a in ("auc", "loss") for t in (0, 1)]
        rows.append([mode, "mean", *(_fmt(m) for m in (means[0], means[1], means[2], means[3]))])
    header = ["mode", "seed", "auc_task1", "auc_task2", "loss_task1", "loss_task2"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    shown = [r[:2] + [f"{float(c):.4f}" for c in r[2:]] for r in rows]
    widths = [max(len(header[j]), *(len(r[j]) for r in shown)) for j in range(len(header))]
    lines = ["  ".join(h.ljust(wd) for h, wd in zip(header, widths))]
    for r in shown:
        cells = [r[0].ljust(widths[0]), r[1].ljust(widths[1])]
        cells += [c.rjust(widths[j + 2]) for j, c in enumerate(r[2:])]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n", buf.getvalue()
