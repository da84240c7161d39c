"""Loss-versus-data-points plots with a 3-sigma band and a JSON sidecar of the plotted numbers."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .runner import TrialLog


def band_statistics(logs: list[TrialLog], phases=("init", "online", "offline")) -> dict:
    """Per-data-point mean and (population) std of the loss across trials."""
    by_dp: dict[int, list[float]] = {}
    phase_of: dict[int, str] = {}
    for lg in logs:
        for r in lg.rows:
            if r.loss is None or r.phase not in phases:
                continue
            by_dp.setdefault(r.data_point, []).append(r.loss)
            phase_of.setdefault(r.data_point, r.phase)
    dps = sorted(by_dp)
    return {
        "data_point": dps,
        "phase": [phase_of[d] for d in dps],
        "mean": [float(np.mean(by_dp[d])) for d in dps],
        "std": [float(np.std(by_dp[d])) for d in dps],
        "count": [len(by_dp[d]) for d in dps],
    }


def online_boundary(logs: list[TrialLog]) -> int | None:
    last = [r.data_point for lg in logs for r in lg.rows if r.phase == "online"]
    return max(last) if last else None


def emit_plots(logs: list[TrialLog], path, baseline: list[TrialLog] | None = None,
               title: str | None = None) -> tuple[Path, Path]:
    """Write ``<path>.svg`` and the sidecar ``<path>.json``; returns both paths."""
    if not logs or not any(lg.rows for lg in logs):
        raise ValueError("no rows")
    if not any(r.loss is not None for lg in logs for r in lg.rows):
        raise ValueError("no loss values to plot")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    stem = path.with_suffix("") if path.suffix else path
    svg, side = stem.with_suffix(".svg"), stem.with_suffix(".json")
    stats = band_statistics(logs)
    boundary = online_boundary(logs)
    sidecar = {"ocil": stats, "online_end": boundary}
    fig, ax = plt.subplots(figsize=(6, 4))
    dp = np.asarray(stats["data_point"], dtype=float)
    mean = np.asarray(stats["mean"])
    std = np.asarray(stats["std"])
    online = np.array([p != "offline" for p in stats["phase"]], dtype=bool)
    if online.any():
        ax.plot(dp[online], mean[online], "b-", label="OCIL online")
    if (~online).any():
        idx = np.r_[np.flatnonzero(online)[-1:], np.flatnonzero(~online)]
        ax.plot(dp[idx], mean[idx], "b--", label="OCIL offline")
    ax.fill_between(dp, np.maximum(mean - 3 * std, 0.0), mean + 3 * std, color="b", alpha=0.2, linewidth=0)
    if baseline:
        bstats = band_statistics(baseline, phases=("baseline",))
        sidecar["baseline"] = bstats
        ax.plot(bstats["data_point"], bstats["mean"], "k-.", label="PDP gradient descent")
    if boundary is not None:
        ax.axvline(boundary, color="r")
    ax.set_xlabel("number of data points")
    ax.set_ylabel("loss")
    if np.all(mean > 0):
        ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    try:
        svg.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(svg, format="svg", metadata={"Date": None})
        side.write_text(json.dumps(sidecar, indent=1), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {svg}: {exc.strerror}") from exc
    finally:
        plt.close(fig)
    return svg, side
