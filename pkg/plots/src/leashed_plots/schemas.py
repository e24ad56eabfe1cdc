"""Parsing of the benchmark CSV files, validated against their fixed schemas.

This package talks to the benchmark engine only through its delimited files;
the column layouts below are the interface contract.  A file whose header
does not match raises :class:`SchemaError` before anything is plotted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

SUMMARY_HEADER = (
    "run_id,algo,m,eta,tp,batch,seed,status,f0,eps,eps_time_ns,eps_iters,mean_iter_ns"
).split(",")
UPDATES_HEADER = "run_id,thread_id,seq,wall_ns,tau_c,tau_s,tries,abandoned".split(",")
PROGRESS_HEADER = "run_id,wall_ns,seq,loss".split(",")
MEMORY_HEADER = "run_id,wall_ns,live_payloads,live_bytes".split(",")
DYNAMICS_HEADER = "step,n_recurrence,n_closed".split(",")
DYNAMICS_SIM_HEADER = "time,occupancy".split(",")


class SchemaError(ValueError):
    """A CSV file does not match the expected column layout."""


def _rows(path: Path, expected: list[str]) -> list[dict[str, str]]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header != expected:
            missing = [c for c in expected if c not in header]
            raise SchemaError(
                f"{path}: header mismatch"
                + (f", missing columns {missing}" if missing else f": {header}")
            )
        return [dict(zip(header, row)) for row in reader]


@dataclass(frozen=True)
class SummaryRow:
    run_id: str
    algo: str
    m: int
    eta: float
    tp: Optional[int]  # None = unbounded persistence
    batch: int
    seed: int
    status: str
    f0: float
    eps: Optional[float]
    eps_time_ns: Optional[int]
    eps_iters: Optional[int]
    mean_iter_ns: Optional[float]

    @property
    def setting(self) -> str:
        tp = "inf" if self.tp is None else str(self.tp)
        label = f"{self.algo} m={self.m}"
        if self.algo == "leashed":
            label += f" tp={tp}"
        return label


def load_summary(path: Path) -> list[SummaryRow]:
    out = []
    for row in _rows(path, SUMMARY_HEADER):
        out.append(
            SummaryRow(
                run_id=row["run_id"],
                algo=row["algo"],
                m=int(row["m"]),
                eta=float(row["eta"]),
                tp=None if row["tp"] == "inf" else int(row["tp"]),
                batch=int(row["batch"]),
                seed=int(row["seed"]),
                status=row["status"],
                f0=float(row["f0"]),
                eps=float(row["eps"]) if row["eps"] else None,
                eps_time_ns=int(row["eps_time_ns"]) if row["eps_time_ns"] else None,
                eps_iters=int(row["eps_iters"]) if row["eps_iters"] else None,
                mean_iter_ns=float(row["mean_iter_ns"]) if row["mean_iter_ns"] else None,
            )
        )
    return out


@dataclass(frozen=True)
class UpdateRow:
    run_id: str
    thread_id: int
    seq: int
    wall_ns: int
    tau_c: int
    tau_s: int
    tries: int
    abandoned: bool


def load_updates(path: Path) -> list[UpdateRow]:
    return [
        UpdateRow(
            run_id=row["run_id"],
            thread_id=int(row["thread_id"]),
            seq=int(row["seq"]),
            wall_ns=int(row["wall_ns"]),
            tau_c=int(row["tau_c"]),
            tau_s=int(row["tau_s"]),
            tries=int(row["tries"]),
            abandoned=row["abandoned"] == "true",
        )
        for row in _rows(path, UPDATES_HEADER)
    ]


@dataclass(frozen=True)
class ProgressRow:
    run_id: str
    wall_ns: int
    seq: int
    loss: float


def load_progress(path: Path) -> list[ProgressRow]:
    return [
        ProgressRow(
            run_id=row["run_id"],
            wall_ns=int(row["wall_ns"]),
            seq=int(row["seq"]),
            loss=float(row["loss"]),
        )
        for row in _rows(path, PROGRESS_HEADER)
    ]


@dataclass(frozen=True)
class MemoryRow:
    run_id: str
    wall_ns: int
    live_payloads: int
    live_bytes: int


def load_memory(path: Path) -> list[MemoryRow]:
    return [
        MemoryRow(
            run_id=row["run_id"],
            wall_ns=int(row["wall_ns"]),
            live_payloads=int(row["live_payloads"]),
            live_bytes=int(row["live_bytes"]),
        )
        for row in _rows(path, MEMORY_HEADER)
    ]


@dataclass(frozen=True)
class DynamicsRow:
    step: int
    n_recurrence: float
    n_closed: Optional[float]


def load_dynamics(path: Path) -> list[DynamicsRow]:
    return [
        DynamicsRow(
            step=int(row["step"]),
            n_recurrence=float(row["n_recurrence"]),
            n_closed=float(row["n_closed"]) if row["n_closed"] else None,
        )
        for row in _rows(path, DYNAMICS_HEADER)
    ]


@dataclass(frozen=True)
class SimRow:
    time: float
    occupancy: int


def load_dynamics_sim(path: Path) -> list[SimRow]:
    return [
        SimRow(time=float(row["time"]), occupancy=int(row["occupancy"]))
        for row in _rows(path, DYNAMICS_SIM_HEADER)
    ]
