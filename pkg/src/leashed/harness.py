"""Experiment orchestration: run lifecycle, telemetry aggregation, CSV emission.

Four delimited files describe a run, all keyed by ``run_id`` so that several
runs can share one output directory:

* ``summary.csv``  -- run_id,algo,m,eta,tp,batch,seed,status,f0,eps,eps_time_ns,eps_iters,mean_iter_ns
* ``updates.csv``  -- run_id,thread_id,seq,wall_ns,tau_c,tau_s,tries,abandoned
* ``progress.csv`` -- run_id,wall_ns,seq,loss
* ``memory.csv``   -- run_id,wall_ns,live_payloads,live_bytes

``summary.csv`` carries one row per requested epsilon (empty time/iteration
fields when the threshold was not reached); abandoned gradients appear in
``updates.csv`` with seq 0 since they never published.  Parsing the files
reproduces the in-memory :class:`RunReport` exactly.

Wall-clock fields are nanoseconds on the monotonic clock, measured from the
start of the run proper (dataset loading and setup excluded).
"""

from __future__ import annotations

import csv
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import Dataset
from .nn import Network
from .optimizers import (
    STATUS_CONVERGED,
    STATUS_DIVERGE,
    OptimizerConfig,
    RunResult,
    UpdateRecord,
    run,
)

SUMMARY_FIELDS = (
    "run_id,algo,m,eta,tp,batch,seed,status,f0,eps,eps_time_ns,eps_iters,mean_iter_ns"
).split(",")
UPDATES_FIELDS = "run_id,thread_id,seq,wall_ns,tau_c,tau_s,tries,abandoned".split(",")
PROGRESS_FIELDS = "run_id,wall_ns,seq,loss".split(",")
MEMORY_FIELDS = "run_id,wall_ns,live_payloads,live_bytes".split(",")

EXIT_CONVERGED = 0
EXIT_USAGE = 1
EXIT_DIVERGE = 2
EXIT_CRASH = 3


@dataclass
class RunReport:
    """Everything the CSV schemas can express about one run."""

    run_id: str
    algo: str
    m: int
    eta: float
    persistence: Optional[int]  # None = unbounded
    batch_size: int
    seed: int
    status: str
    f0: float
    epsilons: tuple[float, ...]
    eps_time_ns: dict[float, Optional[int]]
    eps_iters: dict[float, Optional[int]]
    mean_iter_ns: Optional[float]
    records: list[UpdateRecord]
    progress: list[tuple[int, int, float]]
    memory: list[tuple[int, int, int]]

    @property
    def published(self) -> int:
        return sum(1 for r in self.records if not r.abandoned)

    def exit_code(self) -> int:
        if self.status == STATUS_CONVERGED:
            return EXIT_CONVERGED
        if self.status == STATUS_DIVERGE:
            return EXIT_DIVERGE
        return EXIT_CRASH


def report_from_result(result: RunResult, run_id: Optional[str] = None) -> RunReport:
    cfg = result.config
    rid = run_id or f"{cfg.algo}-m{cfg.m}-s{cfg.seed}-{uuid.uuid4().hex[:8]}"
    eps_time: dict[float, Optional[int]] = {}
    eps_iters: dict[float, Optional[int]] = {}
    for eps in cfg.epsilon_list:
        hit = result.eps_hits.get(eps)
        eps_time[eps] = hit[0] if hit else None
        eps_iters[eps] = hit[1] if hit else None
    mean_iter = result.wall_ns / result.published if result.published else None
    return RunReport(
        run_id=rid,
        algo=cfg.algo,
        m=cfg.m,
        eta=cfg.eta,
        persistence=cfg.persistence,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        status=result.status,
        f0=result.f0,
        epsilons=tuple(cfg.epsilon_list),
        eps_time_ns=eps_time,
        eps_iters=eps_iters,
        mean_iter_ns=mean_iter,
        records=list(result.records),
        progress=list(result.progress),
        memory=list(result.memory),
    )


# -- CSV serialization -----------------------------------------------------------


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _fmt_opt(x) -> str:
    return "" if x is None else str(x)


def _fmt_bool(x: bool) -> str:
    return "true" if x else "false"


def _summary_rows(report: RunReport) -> list[list[str]]:
    base = [
        report.run_id,
        report.algo,
        str(report.m),
        _fmt_float(report.eta),
        "inf" if report.persistence is None else str(report.persistence),
        str(report.batch_size),
        str(report.seed),
        report.status,
        _fmt_float(report.f0),
    ]
    tail = "" if report.mean_iter_ns is None else _fmt_float(report.mean_iter_ns)
    if not report.epsilons:
        return [base + ["", "", "", tail]]
    rows = []
    for eps in report.epsilons:
        rows.append(
            base
            + [
                _fmt_float(eps),
                _fmt_opt(report.eps_time_ns[eps]),
                _fmt_opt(report.eps_iters[eps]),
                tail,
            ]
        )
    return rows


def write_report(report: RunReport, out_dir: Path, append: bool = False) -> None:
    """Emit the four CSV files for a run (appending keeps prior runs' rows)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = "a" if append else "w"

    def _write(name: str, header: list[str], rows: Iterable[Sequence[str]]) -> None:
        path = out_dir / name
        fresh = not (append and path.exists())
        with open(path, mode, newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            if fresh:
                w.writerow(header)
            w.writerows(rows)

    _write("summary.csv", SUMMARY_FIELDS, _summary_rows(report))
    _write(
        "updates.csv",
        UPDATES_FIELDS,
        (
            [
                report.run_id,
                str(r.thread_id),
                str(r.seq),
                str(r.wall_ns),
                str(r.tau_c),
                str(r.tau_s),
                str(r.tries),
                _fmt_bool(r.abandoned),
            ]
            for r in report.records
        ),
    )
    _write(
        "progress.csv",
        PROGRESS_FIELDS,
        (
            [report.run_id, str(w_), str(s), _fmt_float(loss)]
            for (w_, s, loss) in report.progress
        ),
    )
    _write(
        "memory.csv",
        MEMORY_FIELDS,
        (
            [report.run_id, str(w_), str(live), str(nbytes)]
            for (w_, live, nbytes) in report.memory
        ),
    )


def _read_rows(path: Path, expected_header: list[str]) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != expected_header:
            raise ValueError(f"{path}: unexpected header {header}")
        return [dict(zip(header, row)) for row in reader]


def read_reports(out_dir: Path) -> dict[str, RunReport]:
    """Parse the four CSV files back into reports, keyed by run_id."""
    out_dir = Path(out_dir)
    summary = _read_rows(out_dir / "summary.csv", SUMMARY_FIELDS)
    updates = _read_rows(out_dir / "updates.csv", UPDATES_FIELDS)
    progress = _read_rows(out_dir / "progress.csv", PROGRESS_FIELDS)
    memory = _read_rows(out_dir / "memory.csv", MEMORY_FIELDS)

    reports: dict[str, RunReport] = {}
    for row in summary:
        rid = row["run_id"]
        if rid not in reports:
            reports[rid] = RunReport(
                run_id=rid,
                algo=row["algo"],
                m=int(row["m"]),
                eta=float(row["eta"]),
                persistence=None if row["tp"] == "inf" else int(row["tp"]),
                batch_size=int(row["batch"]),
                seed=int(row["seed"]),
                status=row["status"],
                f0=float(row["f0"]),
                epsilons=(),
                eps_time_ns={},
                eps_iters={},
                mean_iter_ns=float(row["mean_iter_ns"]) if row["mean_iter_ns"] else None,
                records=[],
                progress=[],
                memory=[],
            )
        rep = reports[rid]
        if row["eps"]:
            eps = float(row["eps"])
            rep.epsilons = rep.epsilons + (eps,)
            rep.eps_time_ns[eps] = int(row["eps_time_ns"]) if row["eps_time_ns"] else None
            rep.eps_iters[eps] = int(row["eps_iters"]) if row["eps_iters"] else None
    for row in updates:
        reports[row["run_id"]].records.append(
            UpdateRecord(
                thread_id=int(row["thread_id"]),
                seq=int(row["seq"]),
                wall_ns=int(row["wall_ns"]),
                tau_c=int(row["tau_c"]),
                tau_s=int(row["tau_s"]),
                tries=int(row["tries"]),
                abandoned=row["abandoned"] == "true",
            )
        )
    for row in progress:
        reports[row["run_id"]].progress.append(
            (int(row["wall_ns"]), int(row["seq"]), float(row["loss"]))
        )
    for row in memory:
        reports[row["run_id"]].memory.append(
            (int(row["wall_ns"]), int(row["live_payloads"]), int(row["live_bytes"]))
        )
    return reports


# -- staleness over time ------------------------------------------------------------


@dataclass(frozen=True)
class WindowStats:
    start_ns: int
    end_ns: int
    count: int
    mean: Optional[float]
    percentiles: Optional[dict[int, float]]  # {0, 25, 50, 75, 90, 99, 100}


_WINDOW_PCTS = (0, 25, 50, 75, 90, 99, 100)


def staleness_windows(
    records: Sequence[UpdateRecord], window_ns: int
) -> list[WindowStats]:
    """Per-window distribution of total staleness tau_c + tau_s.

    Only published updates contribute (abandoned gradients never became
    updates); records must be sorted by wall time.  Windows tile the run from
    time zero; empty windows are reported with count 0.
    """
    if window_ns < 1:
        raise ValueError("window must be >= 1 ns")
    pub = [r for r in records if not r.abandoned]
    if not pub:
        return []
    last = pub[-1].wall_ns
    n_windows = last // window_ns + 1
    buckets: list[list[int]] = [[] for _ in range(n_windows)]
    for r in pub:
        buckets[r.wall_ns // window_ns].append(r.tau_c + r.tau_s)
    out = []
    for k, taus in enumerate(buckets):
        if taus:
            arr = np.asarray(taus, dtype=np.float64)
            pcts = {p: float(np.percentile(arr, p)) for p in _WINDOW_PCTS}
            out.append(
                WindowStats(
                    start_ns=k * window_ns,
                    end_ns=(k + 1) * window_ns,
                    count=len(taus),
                    mean=float(arr.mean()),
                    percentiles=pcts,
                )
            )
        else:
            out.append(
                WindowStats(
                    start_ns=k * window_ns,
                    end_ns=(k + 1) * window_ns,
                    count=0,
                    mean=None,
                    percentiles=None,
                )
            )
    return out


# -- experiments ---------------------------------------------------------------------


def run_experiment(
    config: OptimizerConfig,
    network: Network,
    dataset: Dataset,
    out_dir: Optional[Path] = None,
    run_id: Optional[str] = None,
    append: bool = False,
) -> RunReport:
    """Execute one configured run and emit its CSV files."""
    result = run(config, network, dataset)
    report = report_from_result(result, run_id=run_id)
    if out_dir is not None:
        write_report(report, Path(out_dir), append=append)
    return report


@dataclass(frozen=True)
class SettingKey:
    algo: str
    m: int
    eta: float
    persistence: Optional[int]
    batch_size: int


@dataclass
class SettingSummary:
    """Quantile aggregation of repeats sharing one setting."""

    key: SettingKey
    runs: int = 0
    converged: int = 0
    diverged: int = 0
    crashed: int = 0
    failed: int = 0  # runs that raised before producing a report
    time_quantiles: Optional[tuple[float, float, float, float, float]] = None
    iter_quantiles: Optional[tuple[float, float, float, float, float]] = None


def _quantiles(values: Sequence[float]) -> tuple[float, float, float, float, float]:
    q = np.percentile(np.asarray(values, dtype=np.float64), [0, 25, 50, 75, 100])
    return tuple(float(v) for v in q)  # type: ignore[return-value]


def sweep(
    configs: Sequence[OptimizerConfig],
    network: Network,
    dataset: Dataset,
    out_dir: Optional[Path] = None,
) -> tuple[list[RunReport], list[SettingSummary]]:
    """Run every config, aggregate repeats per setting, keep going on failures.

    The convergence-rate metric aggregated per setting is the wall time (and
    iteration count) to the smallest requested epsilon, over the runs that
    reached it.
    """
    if not configs:
        raise ValueError("sweep needs at least one config")
    reports: list[RunReport] = []
    summaries: dict[SettingKey, SettingSummary] = {}
    first_write = True
    for cfg in configs:
        key = SettingKey(cfg.algo, cfg.m, cfg.eta, cfg.persistence, cfg.batch_size)
        summary = summaries.setdefault(key, SettingSummary(key=key))
        summary.runs += 1
        try:
            report = run_experiment(
                cfg,
                network,
                dataset,
                out_dir=out_dir,
                append=not first_write,
            )
            first_write = False
        except Exception:
            summary.failed += 1
            continue
        reports.append(report)
        if report.status == STATUS_CONVERGED:
            summary.converged += 1
        elif report.status == STATUS_DIVERGE:
            summary.diverged += 1
        else:
            summary.crashed += 1
    for summary in summaries.values():
        key = summary.key
        times = []
        iters = []
        for rep in reports:
            if (
                SettingKey(rep.algo, rep.m, rep.eta, rep.persistence, rep.batch_size)
                != key
                or not rep.epsilons
            ):
                continue
            smallest = min(rep.epsilons)
            t = rep.eps_time_ns[smallest]
            it = rep.eps_iters[smallest]
            if t is not None:
                times.append(float(t))
                iters.append(float(it))
        if times:
            summary.time_quantiles = _quantiles(times)
            summary.iter_quantiles = _quantiles(iters)
    ordered = [summaries[k] for k in sorted(summaries, key=lambda k: repr(k))]
    if out_dir is not None:
        _write_sweep_summary(ordered, Path(out_dir))
    return reports, ordered


def _write_sweep_summary(summaries: Sequence[SettingSummary], out_dir: Path) -> None:
    path = out_dir / "sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(
            "algo,m,eta,tp,batch,runs,converged,diverged,crashed,failed,"
            "time_min,time_q1,time_median,time_q3,time_max,"
            "iters_min,iters_q1,iters_median,iters_q3,iters_max".split(",")
        )
        for s in summaries:
            tq = s.time_quantiles or ("",) * 5
            iq = s.iter_quantiles or ("",) * 5
            w.writerow(
                [
                    s.key.algo,
                    s.key.m,
                    _fmt_float(s.key.eta),
                    "inf" if s.key.persistence is None else s.key.persistence,
                    s.key.batch_size,
                    s.runs,
                    s.converged,
                    s.diverged,
                    s.crashed,
                    s.failed,
                    *tq,
                    *iq,
                ]
            )


def iteration_time_stats(report: RunReport) -> dict[str, float]:
    """Two views of time per iteration: wall/published and publish gaps."""
    out: dict[str, float] = {}
    if report.mean_iter_ns is not None:
        out["wall_per_published_ns"] = report.mean_iter_ns
    walls = sorted(r.wall_ns for r in report.records if not r.abandoned)
    if len(walls) >= 2:
        gaps = np.diff(np.asarray(walls, dtype=np.float64))
        out["mean_publish_gap_ns"] = float(gaps.mean())
        out["p50_publish_gap_ns"] = float(np.percentile(gaps, 50))
        out["p99_publish_gap_ns"] = float(np.percentile(gaps, 99))
    return out
