"""Deterministic artifact writers: CSV tables, JSONL logs, JSON manifests,
and matplotlib figures rendered to files.

Every writer produces byte-identical output for identical inputs: floats are
formatted with ``repr``, JSON keys are sorted, and figures carry no
timestamps or software tags.  The manifest is the one exception — it embeds
a creation time, which reruns are expected to differ in.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from datetime import datetime, timezone

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = [
    "figure_bracket",
    "figure_contraction",
    "figure_convergence",
    "figure_distribution",
    "figure_drift",
    "figure_mass_paths",
    "figure_occupation",
    "figure_pair_paths",
    "figure_residuals",
    "figure_survival",
    "file_sha256",
    "save_figure",
    "write_csv",
    "write_json",
    "write_jsonl",
    "write_manifest",
]

_FIGSIZE = (7.0, 4.2)
_DPI = 120


def _fmt(value) -> str:
    if value is None:
        return ""
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        value = value.item()  # numpy scalar -> plain python
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str, fieldnames, rows) -> str:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            if isinstance(row, dict):
                writer.writerow([_fmt(row.get(k)) for k in fieldnames])
            else:
                writer.writerow([_fmt(v) for v in row])
    return path


def write_jsonl(path: str, lines) -> str:
    with open(path, "w") as fh:
        for line in lines:
            if not isinstance(line, str):
                line = json.dumps(line, sort_keys=True,
                                  separators=(",", ":"))
            fh.write(line + "\n")
    return path


def write_json(path: str, obj) -> str:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir: str, resolved_config: dict,
                   artifact_names) -> str:
    """Manifest = resolved config + per-file hashes + a combined content
    hash.  ``created`` is the sole field allowed to vary between reruns."""
    outputs = []
    combined = hashlib.sha256()
    for name in sorted(artifact_names):
        path = os.path.join(outdir, name)
        digest = file_sha256(path)
        outputs.append({"file": name, "sha256": digest,
                        "bytes": os.path.getsize(path)})
        combined.update(digest.encode())
    manifest = {
        "config": resolved_config,
        "outputs": outputs,
        "content_hash": combined.hexdigest(),
        "created": datetime.now(timezone.utc).isoformat(),
    }
    return write_json(os.path.join(outdir, "manifest.json"), manifest)


# ---------------------------------------------------------------------------
# figures


def save_figure(fig, path: str) -> str:
    fig.savefig(path, dpi=_DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def _new_axes(title: str, xlabel: str, ylabel: str):
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _step_series(traj, horizon: float):
    ts, ms = [0.0], [traj.initial.mass()]
    mass = ms[0]
    for ev in traj.events:
        ts.append(ev.time)
        ms.append(mass)
        mass += ev.delta
        ts.append(ev.time)
        ms.append(mass)
    ts.append(horizon)
    ms.append(mass)
    return ts, ms


def figure_mass_paths(path: str, trajectories, horizon: float) -> str:
    fig, ax = _new_axes("population paths", "time", "total occupancy")
    for traj in trajectories[:20]:
        ax.plot(*_step_series(traj, horizon), lw=0.8, alpha=0.7)
    return save_figure(fig, path)


def figure_pair_paths(path: str, lower, upper, horizon: float) -> str:
    fig, ax = _new_axes("coupled pair (one replicate)", "time",
                        "total occupancy")
    ax.plot(*_step_series(lower, horizon), label="lower", color="tab:blue")
    ax.plot(*_step_series(upper, horizon), label="upper",
            color="tab:orange")
    ax.legend()
    return save_figure(fig, path)


def figure_distribution(path: str, labels, p_mc, p_oracle, t: float) -> str:
    fig, ax = _new_axes(f"marginal at t={t}", "state", "probability")
    x = range(len(labels))
    ax.bar([i - 0.2 for i in x], p_mc, width=0.4, label="monte-carlo")
    ax.bar([i + 0.2 for i in x], p_oracle, width=0.4, label="matrix")
    ax.set_xticks(list(x))
    ax.set_xticklabels([str(l) for l in labels], rotation=90, fontsize=6)
    ax.legend()
    fig.tight_layout()
    return save_figure(fig, path)


def figure_contraction(path: str, rows) -> str:
    fig, ax = _new_axes("weighted distance vs bound", "time",
                        "weighted l1 distance")
    ts = [r["t"] for r in rows]
    ax.errorbar(ts, [r["lhs"] for r in rows],
                yerr=[3 * r["se"] for r in rows], fmt="o-",
                label="estimate (3 se)")
    ax.plot(ts, [r["bound"] for r in rows], "s--", label="bound")
    ax.legend()
    return save_figure(fig, path)


def figure_residuals(path: str, rows) -> str:
    fig, ax = _new_axes("integrated-drift residuals", "observable",
                        "residual / stderr")
    names = [r["observable"] for r in rows]
    ax.bar(range(len(rows)), [r["z"] for r in rows])
    ax.axhline(3.0, color="red", ls="--", lw=1)
    ax.axhline(-3.0, color="red", ls="--", lw=1)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
    fig.tight_layout()
    return save_figure(fig, path)


def figure_drift(path: str, samples, c1: float, c2: float) -> str:
    """``samples`` holds (V, generator-V) pairs."""
    fig, ax = _new_axes("drift inequality", "V", "generator applied to V")
    vs = [s[0] for s in samples]
    ax.scatter(vs, [s[1] for s in samples], s=4, alpha=0.4,
               label="sampled configurations")
    if vs:
        lo, hi = min(vs), max(vs)
        ax.plot([lo, hi], [c1 - c2 * lo, c1 - c2 * hi], "r-",
                label=f"c1 - c2 V (c1={c1:.3g}, c2={c2:.3g})")
    ax.legend()
    return save_figure(fig, path)


def figure_occupation(path: str, rows) -> str:
    fig, ax = _new_axes("time in sublevel sets", "level r",
                        "time-average fraction")
    horizons = sorted({r["n"] for r in rows})
    for n in horizons:
        sub = [r for r in rows if r["n"] == n]
        rs = [r["r"] for r in sub]
        ax.plot(rs, [r["mu_hat"] for r in sub], "o-", label=f"estimate n={n}")
        ax.plot(rs, [max(r["floor"], 0.0) for r in sub], "s--",
                label=f"floor n={n}")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=7)
    return save_figure(fig, path)


def figure_survival(path: str, rows) -> str:
    fig, ax = _new_axes("survival fraction", "branching rate",
                        "fraction alive at horizon")
    combos = sorted({(r["T"], r["radius"]) for r in rows})
    for T, radius in combos:
        sub = sorted((r for r in rows
                      if r["T"] == T and r["radius"] == radius),
                     key=lambda r: r["lambda"])
        lams = [r["lambda"] for r in sub]
        ax.errorbar(lams, [r["p_hat"] for r in sub],
                    yerr=[[r["p_hat"] - r["ci_lo"] for r in sub],
                          [r["ci_hi"] - r["p_hat"] for r in sub]],
                    fmt="o-", label=f"T={T}, radius={radius}")
    ax.legend(fontsize=7)
    return save_figure(fig, path)


def figure_bracket(path: str, decisions, lo: float, hi: float) -> str:
    fig, ax = _new_axes("bisection decisions", "branching rate", "")
    colors = {"surviving": "tab:green", "extinct": "tab:red",
              "undecided": "tab:gray"}
    for d in decisions:
        ax.scatter(d["lambda"], 0.0, color=colors[d["verdict"]], s=30)
    ax.axvspan(lo, hi, alpha=0.25, color="tab:blue", label="bracket")
    ax.set_yticks([])
    handles = [plt.Line2D([], [], marker="o", ls="", color=c, label=v)
               for v, c in colors.items()]
    handles.append(plt.Rectangle((0, 0), 1, 1, alpha=0.25,
                                 color="tab:blue", label="bracket"))
    ax.legend(handles=handles, fontsize=7)
    return save_figure(fig, path)


def figure_convergence(path: str, rows) -> str:
    fig, ax = _new_axes("window stability of the origin marginal",
                        "window radius", "TV distance to previous radius")
    sub = [r for r in rows if r["tv_prev"] is not None]
    ax.plot([r["radius"] for r in sub],
            [max(r["tv_prev"], 1e-12) for r in sub], "o-")
    ax.set_yscale("log")
    return save_figure(fig, path)
