"""Figure rendering from benchmark CSVs.

Each figure kind consumes one or two of the delimited telemetry files and
writes an image.  Rendering never mutates its inputs, and the returned
:class:`RenderResult` carries the exact series that were drawn so callers
(and tests) can verify structural identity across invocations.

Box plots follow the benchmark convention: the box spans the first and third
quartiles, whiskers extend to the minimum and maximum of the runs that
reached the threshold, any outlier marks use '+', and runs that diverged or
crashed are left out of the box and annotated next to it.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import schemas

KINDS = ("convergence_box", "progress", "staleness", "memory", "dynamics")


@dataclass(frozen=True)
class FigureSpec:
    """What to draw, from which files, to which image path."""

    kind: str
    out_path: Path
    summary: Optional[Path] = None
    progress: Optional[Path] = None
    updates: Optional[Path] = None
    memory: Optional[Path] = None
    dynamics: Optional[Path] = None
    sim: Optional[Path] = None
    epsilon: Optional[float] = None
    window_ms: float = 250.0
    title: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")


@dataclass
class RenderResult:
    """The series actually plotted, for inspection and idempotency checks."""

    kind: str
    out_path: str
    series: dict = field(default_factory=dict)


def _require(spec: FigureSpec, attr: str) -> Path:
    value = getattr(spec, attr)
    if value is None:
        raise ValueError(f"figure kind {spec.kind!r} needs --{attr}")
    return Path(value)


def _quantile_stats(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "values": sorted(float(v) for v in values),
        "min": float(arr.min()),
        "q1": float(np.percentile(arr, 25)),
        "median": float(np.percentile(arr, 50)),
        "q3": float(np.percentile(arr, 75)),
        "max": float(arr.max()),
    }


def _render_convergence_box(spec: FigureSpec, ax) -> dict:
    rows = schemas.load_summary(_require(spec, "summary"))
    eps_rows = [r for r in rows if r.eps is not None]
    if not eps_rows:
        raise ValueError("summary has no epsilon rows to box")
    epsilon = spec.epsilon if spec.epsilon is not None else min(r.eps for r in eps_rows)
    chosen = [r for r in eps_rows if r.eps == epsilon]
    if not chosen:
        raise ValueError(f"no rows for epsilon {epsilon}")

    groups: dict[str, list[schemas.SummaryRow]] = defaultdict(list)
    for r in chosen:
        groups[r.setting].append(r)

    series: dict = {"epsilon": epsilon, "groups": {}}
    stats = []
    labels = []
    annotations = []
    for label in sorted(groups):
        rows_g = groups[label]
        times = [
            r.eps_time_ns / 1e9
            for r in rows_g
            if r.status == "Converged" and r.eps_time_ns is not None
        ]
        diverged = sum(1 for r in rows_g if r.status == "Diverge")
        crashed = sum(1 for r in rows_g if r.status == "Crash")
        entry = {"excluded_diverge": diverged, "excluded_crash": crashed}
        if times:
            entry.update(_quantile_stats(times))
            stats.append(
                {
                    "label": label,
                    "med": entry["median"],
                    "q1": entry["q1"],
                    "q3": entry["q3"],
                    "whislo": entry["min"],
                    "whishi": entry["max"],
                    "fliers": [],
                }
            )
        else:
            stats.append(None)
        labels.append(label)
        annotations.append((diverged, crashed))
        series["groups"][label] = entry

    drawable = [s for s in stats if s is not None]
    if drawable:
        ax.bxp(
            drawable,
            positions=[i for i, s in enumerate(stats) if s is not None],
            showfliers=True,
            flierprops={"marker": "+"},
        )
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    top = ax.get_ylim()[1]
    for i, (diverged, crashed) in enumerate(annotations):
        notes = []
        if diverged:
            notes.append(f"D:{diverged}")
        if crashed:
            notes.append(f"C:{crashed}")
        if notes:
            ax.annotate(
                " ".join(notes),
                xy=(i, top),
                ha="center",
                va="top",
                fontsize=8,
                color="firebrick",
            )
    ax.set_ylabel(f"wall time to {epsilon:g}·f0 [s]")
    return series


def _render_progress(spec: FigureSpec, ax) -> dict:
    rows = schemas.load_progress(_require(spec, "progress"))
    statuses: dict[str, str] = {}
    for s in schemas.load_summary(_require(spec, "summary")):
        statuses.setdefault(s.run_id, s.status)
    by_run: dict[str, list[schemas.ProgressRow]] = defaultdict(list)
    for r in rows:
        by_run[r.run_id].append(r)

    series: dict = {}
    for run_id in sorted(by_run):
        pts = sorted(by_run[run_id], key=lambda r: r.wall_ns)
        times = [p.wall_ns / 1e9 for p in pts]
        losses = [p.loss for p in pts]
        status = statuses.get(run_id, "?")
        label = run_id if status == "Converged" else f"{run_id} [{status}]"
        (line,) = ax.plot(times, losses, label=label, linewidth=1.2)
        if status == "Crash":
            ax.plot(times[-1:], losses[-1:], "x", color=line.get_color(), markersize=9)
        elif status == "Diverge":
            ax.plot(times[-1:], losses[-1:], "s", color=line.get_color(), fillstyle="none")
        series[run_id] = {"t": times, "loss": losses, "status": status}
    ax.set_xlabel("wall time [s]")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    return series


def _window_percentiles(
    taus: list[tuple[int, int]], window_ns: int
) -> list[dict]:
    """Per-window tau percentiles; windows tile the run from time zero."""
    if not taus:
        return []
    last = max(w for w, _ in taus)
    buckets: list[list[int]] = [[] for _ in range(last // window_ns + 1)]
    for wall, tau in taus:
        buckets[wall // window_ns].append(tau)
    out = []
    for k, vals in enumerate(buckets):
        if not vals:
            continue
        arr = np.asarray(vals, dtype=np.float64)
        out.append(
            {
                "t": (k + 0.5) * window_ns / 1e9,
                "count": len(vals),
                "p25": float(np.percentile(arr, 25)),
                "p50": float(np.percentile(arr, 50)),
                "p75": float(np.percentile(arr, 75)),
                "p99": float(np.percentile(arr, 99)),
            }
        )
    return out


def _render_staleness(spec: FigureSpec, ax) -> dict:
    rows = schemas.load_updates(_require(spec, "updates"))
    window_ns = int(spec.window_ms * 1e6)
    by_run: dict[str, list[tuple[int, int]]] = defaultdict(list)
    for r in rows:
        if not r.abandoned:
            by_run[r.run_id].append((r.wall_ns, r.tau_c + r.tau_s))
    series: dict = {"window_ns": window_ns, "runs": {}}
    for run_id in sorted(by_run):
        windows = _window_percentiles(by_run[run_id], window_ns)
        ts = [w["t"] for w in windows]
        med = [w["p50"] for w in windows]
        lo = [w["p25"] for w in windows]
        hi = [w["p75"] for w in windows]
        p99 = [w["p99"] for w in windows]
        (line,) = ax.plot(ts, med, label=f"{run_id} median")
        ax.fill_between(ts, lo, hi, alpha=0.25, color=line.get_color())
        ax.plot(ts, p99, linestyle=":", color=line.get_color(), label=f"{run_id} p99")
        series["runs"][run_id] = windows
    ax.set_xlabel("wall time [s]")
    ax.set_ylabel("staleness τ per window")
    ax.legend(fontsize=7)
    return series


def _render_memory(spec: FigureSpec, ax) -> dict:
    rows = schemas.load_memory(_require(spec, "memory"))
    by_run: dict[str, list[schemas.MemoryRow]] = defaultdict(list)
    for r in rows:
        by_run[r.run_id].append(r)
    series: dict = {}
    for run_id in sorted(by_run):
        pts = sorted(by_run[run_id], key=lambda r: r.wall_ns)
        ts = [p.wall_ns / 1e9 for p in pts]
        mb = [p.live_bytes / 1e6 for p in pts]
        counts = [p.live_payloads for p in pts]
        ax.plot(ts, mb, drawstyle="steps-post", label=run_id, linewidth=1.0)
        series[run_id] = {"t": ts, "live_mb": mb, "live_payloads": counts}
    ax.set_xlabel("wall time [s]")
    ax.set_ylabel("live payload memory [MB]")
    ax.legend(fontsize=7)
    return series


def _render_dynamics(spec: FigureSpec, ax) -> dict:
    rows = schemas.load_dynamics(_require(spec, "dynamics"))
    steps = [r.step for r in rows]
    recurrence = [r.n_recurrence for r in rows]
    series: dict = {"step": steps, "n_recurrence": recurrence}
    ax.plot(steps, recurrence, label="recurrence", linewidth=1.4)
    closed = [r.n_closed for r in rows]
    if all(c is not None for c in closed) and closed:
        ax.plot(steps, closed, "--", label="closed form")
        series["n_closed"] = closed
    if spec.sim is not None:
        sim_rows = schemas.load_dynamics_sim(spec.sim)
        ts = [r.time for r in sim_rows]
        occ = [r.occupancy for r in sim_rows]
        ax.plot(ts, occ, drawstyle="steps-post", alpha=0.4, label="simulation")
        series["sim"] = {"t": ts, "occupancy": occ}
    ax.set_xlabel("step / model time")
    ax.set_ylabel("threads in retry loop")
    ax.legend(fontsize=8)
    return series


_RENDERERS = {
    "convergence_box": _render_convergence_box,
    "progress": _render_progress,
    "staleness": _render_staleness,
    "memory": _render_memory,
    "dynamics": _render_dynamics,
}


def render(spec: FigureSpec) -> RenderResult:
    """Draw the figure described by ``spec`` and write it to ``spec.out_path``."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2), dpi=120)
    try:
        series = _RENDERERS[spec.kind](spec, ax)
        if spec.title:
            ax.set_title(spec.title)
        fig.tight_layout()
        out = Path(spec.out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out)
    finally:
        plt.close(fig)
    return RenderResult(kind=spec.kind, out_path=str(spec.out_path), series=series)
