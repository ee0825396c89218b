"""Speedup accounting and Table-1-style summaries."""

from __future__ import annotations

from typing import Optional


def decomposition_schedule(t_cnot: float, t_rx90: float) -> tuple[float, float]:
    """Duration range of the standard decomposition: three CNOTs plus two or three RX(pi/2)."""
    if t_cnot <= 0 or t_rx90 <= 0:
        raise ValueError("gate durations must be positive")
    return 3 * t_cnot + 2 * t_rx90, 3 * t_cnot + 3 * t_rx90


def speedup(t_cnot: float, t_rx90: float, t_direct: float) -> dict:
    """Schedule duration range and its ratio to the direct pulse duration."""
    if t_direct <= 0:
        raise ValueError("direct duration must be positive")
    lo, hi = decomposition_schedule(t_cnot, t_rx90)
    return {"t_cnot": t_cnot, "t_rx90": t_rx90, "t_direct": t_direct, "schedule_min": lo, "schedule_max": hi,
            "ratio_min": lo / t_direct, "ratio_max": hi / t_direct}


def format_speedup(rep: dict) -> str:
    rows = [
        ("CNOT duration (ns)", rep["t_cnot"]),
        ("RX(pi/2) duration (ns)", rep["t_rx90"]),
        ("direct duration (ns)", rep["t_direct"]),
        ("decomposition (ns)", f"{rep['schedule_min']:.3f} - {rep['schedule_max']:.3f}"),
        ("speedup", f"{rep['ratio_min']:.3f} - {rep['ratio_max']:.3f}"),
    ]
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{k.ljust(width)}  {v if isinstance(v, str) else f'{v:.3f}'}" for k, v in rows) + "\n"


def table_row(family: str, init: str, mean_infidelity: float, std_infidelity: float,
              epochs: Optional[int]) -> str:
    ep = "-" if epochs is None else str(epochs)
    return f"{family:<8} {init:<11} {mean_infidelity:9.2e} {std_infidelity:9.2e} {ep:>6}"
