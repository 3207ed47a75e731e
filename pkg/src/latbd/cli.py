"""Experiment runner: a TOML config file in, deterministic artifacts out.

Each config names one experiment; every key is either present or defaulted
from the tables below, and unknown keys are rejected.  Artifacts (CSV /
JSONL / JSON / PNG) land in the output directory together with a manifest
echoing the fully resolved config and a combined content hash.  Re-running
the same config with the same seed reproduces every artifact byte for byte;
only the manifest's ``created`` stamp differs.

Exit codes: 0 success, 2 configuration error, 3 a checked property failed,
4 explosion guard tripped.  All error paths emit a single line
``error: <kind>: <reason>`` on stderr.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from dataclasses import dataclass, field

import numpy as np

from . import report
from .analysis import (drift_check, inverse_square_weight,
                       martingale_battery, occupation_measure,
                       sample_configurations, standard_battery,
                       validate_lyapunov)
from .core import Configuration, FiniteKernel, Window
from .coupling import (probe_domination_hypotheses, run_coupled,
                       contraction_check)
from .engine import ExplosionError, run_replicates, window_convergence
from .oracle import (CappedStateSpace, build_generator, cap_births,
                     total_variation, transient)
from .rates import (BPDLParams, BranchLocalParams, RateModel, bpdl_rates,
                    branch_local_rates, contact_rates)
from .survival import bracket_lambda_c, survival_sweep

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "main"]

OUTPUT_DIR_ENV = "LATBD_OUTPUT_DIR"
_FALLBACK_OUTPUT = "latbd-out"


class ConfigError(ValueError):
    """Anything wrong with the config file: syntax, keys, or values."""


# ---------------------------------------------------------------------------
# defaults tables (the README documents these)

_COMMON_DEFAULTS = {"seed": 0, "workers": 1, "output_dir": None}

# per-experiment scalar/list options and their defaults
_OPTION_DEFAULTS: dict[str, dict] = {
    "run": {"replicates": 1, "horizon": 1.0, "algorithm": "gillespie",
            "explosion_guard": 10_000_000},
    "oracle-compare": {"replicates": 100_000, "times": [0.1, 0.5, 1.0],
                       "cap": 5, "tolerance_tv": 0.02,
                       "sites": [[0]]},
    "coupling": {"replicates": 100, "horizon": 1.0,
                 "method": "joint-gillespie", "probe_pairs": 10_000},
    "contraction": {"replicates": 10_000, "horizon": 0.5,
                    "times": [0.25, 0.5]},
    "martingale": {"replicates": 20_000, "horizon": 1.0,
                   "algorithm": "gillespie", "observables": []},
    "drift": {"n_samples": 10_000, "sample_cap": 4, "value_cap": 100.0},
    "occupation": {"replicates": 200, "horizons": [10.0, 50.0],
                   "radii": [5, 10, 20], "fit_samples": 4000, "fit_cap": 4,
                   "headroom": 1.1},
    "survival-sweep": {"replicates": 10_000,
                       "lambdas": [0.1, 0.5, 1.0, 2.0, 4.0],
                       "horizons": [50.0], "radii": [20], "g": "quadratic"},
    "bracket": {"replicates": 2000, "horizon": 50.0, "tol": 0.25,
                "lam_hi": 4.0, "threshold": 0.02, "max_factor": 16,
                "g": "quadratic"},
    "window-convergence": {"replicates": 200, "horizon": 1.0,
                           "radii": [2, 4, 6, 8], "probe_site": [0]},
}

_WINDOW_RADIUS_DEFAULTS = {
    "run": 10, "oracle-compare": 1, "coupling": 5, "contraction": 5,
    "martingale": 3, "drift": 50, "occupation": 5, "survival-sweep": 20,
    "bracket": 20, "window-convergence": 8,
}

# which table blocks each experiment accepts
_BLOCKS: dict[str, tuple[str, ...]] = {
    "run": ("window", "model", "initial"),
    "oracle-compare": ("model", "initial"),
    "coupling": ("window", "model", "model_upper", "initial",
                 "initial_upper"),
    "contraction": ("window", "model", "initial", "initial_upper"),
    "martingale": ("window", "model", "initial"),
    "drift": ("window", "model"),
    "occupation": ("window", "model"),
    "survival-sweep": (),
    "bracket": ("window",),
    "window-convergence": ("model", "initial"),
}

_MODEL_KEYS = {"name", "b0", "m", "lam", "g", "birth_kernel", "death_kernel"}
_KERNEL_KEYS = {"radius", "value", "pairs"}
_WINDOW_KEYS = {"dim", "radius"}
_INITIAL_KEYS = {"origin", "sites"}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description; every default applied."""

    experiment: str
    seed: int
    workers: int
    output_dir: str
    window: dict
    model: dict
    model_upper: dict
    initial: dict
    initial_upper: dict
    options: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        out = {"experiment": self.experiment, "seed": self.seed,
               "workers": self.workers, "output_dir": self.output_dir,
               "window": self.window, "model": self.model,
               "initial": self.initial}
        if self.experiment in ("coupling", "contraction"):
            out["model_upper"] = self.model_upper
            out["initial_upper"] = self.initial_upper
        out.update(self.options)
        return out


def _reject_unknown(mapping: dict, allowed, where: str) -> None:
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}' in {where}")


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    return value


def _as_number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return float(value)


def load_config(path: str, seed_override: int | None = None,
                workers_override: int | None = None) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc

    experiment = raw.get("experiment")
    if experiment is None:
        raise ConfigError("missing required key 'experiment'")
    if experiment not in _OPTION_DEFAULTS:
        raise ConfigError(
            f"unknown experiment '{experiment}'; valid tags: "
            + ", ".join(sorted(_OPTION_DEFAULTS)))

    blocks = _BLOCKS[experiment]
    option_defaults = _OPTION_DEFAULTS[experiment]
    allowed_top = ({"experiment"} | set(_COMMON_DEFAULTS)
                   | set(option_defaults) | set(blocks))
    _reject_unknown(raw, allowed_top, "the top level")

    seed = _as_int(raw.get("seed", _COMMON_DEFAULTS["seed"]), "seed")
    if seed_override is not None:
        seed = seed_override
    workers = _as_int(raw.get("workers", _COMMON_DEFAULTS["workers"]),
                      "workers")
    if workers_override is not None:
        workers = workers_override
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    output_dir = raw.get("output_dir") or os.environ.get(
        OUTPUT_DIR_ENV) or _FALLBACK_OUTPUT
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")

    window = dict(raw.get("window", {}))
    _reject_unknown(window, _WINDOW_KEYS, "[window]")
    window = {"dim": _as_int(window.get("dim", 1), "window.dim"),
              "radius": _as_int(
                  window.get("radius", _WINDOW_RADIUS_DEFAULTS[experiment]),
                  "window.radius")}
    if window["dim"] < 1 or window["radius"] < 0:
        raise ConfigError("window needs dim >= 1 and radius >= 0")

    def check_model(block_name: str) -> dict:
        block = dict(raw.get(block_name, {}))
        _reject_unknown(block, _MODEL_KEYS, f"[{block_name}]")
        for kernel_key in ("birth_kernel", "death_kernel"):
            if kernel_key in block:
                kern = dict(block[kernel_key])
                _reject_unknown(kern, _KERNEL_KEYS,
                                f"[{block_name}.{kernel_key}]")
                block[kernel_key] = kern
        block.setdefault("name", "bpdl")
        if block["name"] not in ("bpdl", "contact", "branch"):
            raise ConfigError(
                f"unknown model name '{block['name']}' in [{block_name}]")
        return block

    model = check_model("model") if "model" in blocks else {}
    model_upper = (check_model("model_upper")
                   if "model_upper" in raw else model)

    def check_initial(block_name: str, default: dict) -> dict:
        if block_name not in raw:
            return dict(default)
        block = dict(raw[block_name])
        _reject_unknown(block, _INITIAL_KEYS, f"[{block_name}]")
        out = {}
        if "origin" in block:
            out["origin"] = _as_int(block["origin"],
                                    f"{block_name}.origin")
        if "sites" in block:
            try:
                out["sites"] = [[list(map(int, site)), int(c)]
                                for site, c in block["sites"]]
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"{block_name}.sites must be a list of "
                    "[[coords...], count] pairs") from exc
        return out

    initial = check_initial("initial", {"origin": 1})
    initial_upper = check_initial("initial_upper", {"origin": 2})

    options = {}
    for key, default in option_defaults.items():
        value = raw.get(key, default)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key} must be a boolean")
        elif isinstance(default, int):
            value = _as_int(value, key)
        elif isinstance(default, float):
            value = _as_number(value, key)
        elif isinstance(default, list) and not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        options[key] = value

    if "replicates" in options and options["replicates"] < 1:
        raise ConfigError("replicates must be >= 1")

    return ExperimentConfig(
        experiment=experiment, seed=seed, workers=workers,
        output_dir=output_dir, window=window, model=model,
        model_upper=model_upper, initial=initial,
        initial_upper=initial_upper, options=options)


# ---------------------------------------------------------------------------
# model / configuration builders


def _build_kernel(spec, dim: int, fallback_value: float) -> FiniteKernel:
    if spec is None:
        return FiniteKernel.ball_indicator(dim, 1, fallback_value)
    if "pairs" in spec:
        return FiniteKernel.from_pairs(dim, spec["pairs"])
    radius = int(spec.get("radius", 1))
    value = float(spec.get("value", fallback_value))
    if value == 0.0:
        return FiniteKernel(dim, {})
    return FiniteKernel.ball_indicator(dim, radius, value)


def _build_model(block: dict, dim: int) -> RateModel:
    name = block.get("name", "bpdl")
    if name == "contact":
        return contact_rates(float(block.get("lam", 1.0)), dim=dim)
    if name == "branch":
        g_name = block.get("g", "quadratic")
        if g_name == "quadratic":
            g = lambda n: float(n * n)  # noqa: E731
        elif g_name == "linear":
            g = float
        else:
            raise ConfigError(f"unknown death law '{g_name}'")
        return branch_local_rates(
            BranchLocalParams(lam=float(block.get("lam", 1.0)), g=g),
            dim=dim)
    params = BPDLParams(
        b0=float(block.get("b0", 1.0)), m=float(block.get("m", 1.0)),
        a_plus=_build_kernel(block.get("birth_kernel"), dim, 0.3),
        a_minus=_build_kernel(block.get("death_kernel"), dim, 0.2))
    return bpdl_rates(params)


def _build_initial(block: dict, window: Window) -> Configuration:
    counts: dict = {}
    origin = (0,) * window.dim
    if block.get("origin"):
        counts[origin] = int(block["origin"])
    for site, count in block.get("sites", []):
        counts[tuple(site)] = int(count)
    return Configuration(window, {s: n for s, n in counts.items() if n})


# ---------------------------------------------------------------------------
# experiment runners: each returns (ok, printed lines, artifact names)


def _exp_run(cfg: ExperimentConfig, outdir: str):
    window = Window(cfg.window["dim"], cfg.window["radius"])
    model = _build_model(cfg.model, window.dim)
    eta0 = _build_initial(cfg.initial, window)
    opts = cfg.options
    trajectories = run_replicates(model, window, eta0, opts["horizon"],
                                  cfg.seed, opts["replicates"],
                                  algorithm=opts["algorithm"],
                                  workers=cfg.workers,
                                  explosion_guard=opts["explosion_guard"])
    events_path = os.path.join(outdir, "events.jsonl")
    with open(events_path, "w") as fh:
        for traj in trajectories:
            fh.write(traj.to_jsonl())
    rows = [{"replicate": i, "events": len(t.events),
             "final_mass": t.final.mass()}
            for i, t in enumerate(trajectories)]
    report.write_csv(os.path.join(outdir, "summary.csv"),
                     ["replicate", "events", "final_mass"], rows)
    report.figure_mass_paths(os.path.join(outdir, "masses.png"),
                             trajectories, opts["horizon"])
    total = sum(r["events"] for r in rows)
    lines = [f"run: {len(rows)} replicates, {total} events, "
             f"mean final mass "
             f"{sum(r['final_mass'] for r in rows) / len(rows):.4g}"]
    return True, lines, ["events.jsonl", "summary.csv", "masses.png"]


def _exp_oracle_compare(cfg: ExperimentConfig, outdir: str):
    opts = cfg.options
    sites = tuple(tuple(s) for s in opts["sites"])
    space = CappedStateSpace(sites=sites, cap=opts["cap"])
    model = cap_births(_build_model(cfg.model, len(sites[0])), opts["cap"])
    gen = build_generator(space, model)
    eta0 = _build_initial(cfg.initial, space.window)
    state0 = tuple(eta0.occupancy(s) for s in space.sites)
    pi0 = space.delta_distribution(state0)

    times = sorted(float(t) for t in opts["times"])
    horizon = times[-1]
    n = opts["replicates"]
    trajectories = run_replicates(model, space.window, eta0, horizon,
                                  cfg.seed, n, workers=cfg.workers)
    comparison, tv_rows, ok = [], [], True
    for t in times:
        counts = np.zeros(space.n_states)
        for traj in trajectories:
            snap = traj.snapshot_at(t)
            counts[space.index_of(tuple(snap.occupancy(s)
                                        for s in space.sites))] += 1
        p_mc = counts / n
        p_or = transient(gen, pi0, t)
        tv = total_variation(p_mc, p_or)
        within = True
        for idx in range(space.n_states):
            # binomial scale from the larger of the two estimates keeps the
            # 3-sigma test meaningful at both tails
            scale = max(p_mc[idx] * (1 - p_mc[idx]),
                        p_or[idx] * (1 - p_or[idx]))
            se = math.sqrt(scale / n)
            row_ok = abs(p_mc[idx] - p_or[idx]) <= 3 * se + 1e-12
            within = within and row_ok
            comparison.append({"t": t, "state_index": idx,
                               "state": "|".join(map(str, space.state_of(idx))),
                               "p_mc": float(p_mc[idx]),
                               "p_oracle": float(p_or[idx]),
                               "se": se, "within_3se": row_ok})
        tv_ok = tv <= opts["tolerance_tv"]
        tv_rows.append({"t": t, "tv": tv, "tolerance": opts["tolerance_tv"],
                        "ok": tv_ok and within})
        ok = ok and tv_ok and within

    report.write_csv(os.path.join(outdir, "comparison.csv"),
                     ["t", "state_index", "state", "p_mc", "p_oracle", "se",
                      "within_3se"], comparison)
    report.write_csv(os.path.join(outdir, "tv.csv"),
                     ["t", "tv", "tolerance", "ok"], tv_rows)
    last = times[-1]
    labels = ["|".join(map(str, space.state_of(i)))
              for i in range(space.n_states)]
    p_mc_last = [r["p_mc"] for r in comparison if r["t"] == last]
    p_or_last = [r["p_oracle"] for r in comparison if r["t"] == last]
    report.figure_distribution(os.path.join(outdir, "distribution.png"),
                               labels, p_mc_last, p_or_last, last)
    lines = [f"oracle-compare: t={r['t']:g} tv={r['tv']:.5f} "
             f"tolerance={r['tolerance']:g} "
             f"{'ok' if r['ok'] else 'FAIL'}" for r in tv_rows]
    return ok, lines, ["comparison.csv", "tv.csv", "distribution.png"]


def _exp_coupling(cfg: ExperimentConfig, outdir: str):
    window = Window(cfg.window["dim"], cfg.window["radius"])
    lower = _build_model(cfg.model, window.dim)
    upper = _build_model(cfg.model_upper, window.dim)
    eta_lo = _build_initial(cfg.initial, window)
    eta_up = _build_initial(cfg.initial_upper, window)
    opts = cfg.options
    probe = probe_domination_hypotheses(lower, upper, window,
                                        n_pairs=opts["probe_pairs"],
                                        seed=cfg.seed)
    merged = None
    sample_pair = None
    for rep in range(opts["replicates"]):
        lo, up, rpt = run_coupled(lower, upper, eta_lo, eta_up, window,
                                  opts["horizon"], cfg.seed, replicate=rep,
                                  method=opts["method"], probe=probe)
        merged = rpt if merged is None else merged.merge(rpt)
        if rep == 0:
            sample_pair = (lo, up)
    payload = merged.to_json_obj()
    payload["hypotheses_verified"] = merged.hypotheses_verified
    payload["birth_times_included"] = merged.birth_times_included
    report.write_json(os.path.join(outdir, "report.json"), payload)
    report.figure_pair_paths(os.path.join(outdir, "pair_masses.png"),
                             sample_pair[0], sample_pair[1],
                             opts["horizon"])
    ok = (not merged.hypotheses_verified) or (
        merged.clean and merged.birth_times_included)
    status = ("order held" if merged.clean else
              f"order broken at {merged.first_violation}")
    lines = [f"coupling: {opts['replicates']} replicates via "
             f"{opts['method']}, hypotheses "
             f"{'verified' if merged.hypotheses_verified else 'NOT verified'}"
             f", {status}"]
    return ok, lines, ["report.json", "pair_masses.png"]


def _exp_contraction(cfg: ExperimentConfig, outdir: str):
    window = Window(cfg.window["dim"], cfg.window["radius"])
    model = _build_model(cfg.model, window.dim)
    eta_a = _build_initial(cfg.initial, window)
    eta_b = _build_initial(cfg.initial_upper, window)
    opts = cfg.options
    times = sorted(float(t) for t in opts["times"])
    out = contraction_check(model, eta_a, eta_b, window, times[-1],
                            opts["replicates"], cfg.seed, times=times)
    rows = out["rows"]
    report.write_csv(os.path.join(outdir, "contraction.csv"),
                     ["t", "lhs", "se", "bound", "ok"], rows)
    report.figure_contraction(os.path.join(outdir, "contraction.png"), rows)
    ok = all(r["ok"] for r in rows)
    lines = [f"contraction: t={r['t']:g} distance={r['lhs']:.5f} "
             f"bound={r['bound']:.5f} {'ok' if r['ok'] else 'FAIL'}"
             for r in rows]
    return ok, lines, ["contraction.csv", "contraction.png"]


def _exp_martingale(cfg: ExperimentConfig, outdir: str):
    window = Window(cfg.window["dim"], cfg.window["radius"])
    model = _build_model(cfg.model, window.dim)
    eta0 = _build_initial(cfg.initial, window)
    opts = cfg.options
    battery = {F.name: F for F in standard_battery(window.dim)}
    wanted = opts["observables"] or list(battery)
    unknown = [n for n in wanted if n not in battery]
    if unknown:
        raise ConfigError(f"unknown observable '{unknown[0]}'; choices: "
                          + ", ".join(battery))
    results = martingale_battery([battery[n] for n in wanted], model, eta0,
                                 opts["horizon"], opts["replicates"],
                                 cfg.seed, algorithm=opts["algorithm"])
    rows = []
    for res in results:
        z = res["residual"] / res["stderr"] if res["stderr"] > 0 else 0.0
        rows.append({"observable": res["observable"], "t": opts["horizon"],
                     "residual": res["residual"], "stderr": res["stderr"],
                     "z": z, "ok": abs(z) <= 3.0})
    report.write_csv(os.path.join(outdir, "residuals.csv"),
                     ["observable", "t", "residual", "stderr", "z", "ok"],
                     rows)
    report.figure_residuals(os.path.join(outdir, "residuals.png"), rows)
    ok = all(r["ok"] for r in rows)
    lines = [f"martingale: {r['observable']} z={r['z']:+.3f} "
             f"{'ok' if r['ok'] else 'FAIL'}" for r in rows]
    return ok, lines, ["residuals.csv", "residuals.png"]


def _drift_spec(cfg: ExperimentConfig, model: RateModel):
    if model.dominating_kernel is None:
        raise ConfigError("drift analysis needs a model with a dominating "
                          "kernel")
    return validate_lyapunov(
        inverse_square_weight,
        lambda x: math.exp(-sum(abs(c) for c in x)),
        model.dominating_kernel,
        ball_radius=max(cfg.window["radius"], 10), dim=cfg.window["dim"])


def _exp_drift(cfg: ExperimentConfig, outdir: str):
    window = Window(cfg.window["dim"], cfg.window["radius"])
    model = _build_model(cfg.model, window.dim)
    spec = _drift_spec(cfg, model)
    opts = cfg.options
    sample = [eta for eta in
              sample_configurations(window, opts["n_samples"], cfg.seed,
                                    occupancy_cap=opts["sample_cap"])
              if spec.value(eta) <= opts["value_cap"]]
    fit = drift_check(spec, model, sample)
    report.write_csv(os.path.join(outdir, "fit.csv"),
                     ["c2", "c1", "ratio"], fit.fit_table)
    report.write_csv(
        os.path.join(outdir, "drift.csv"),
        ["c1", "c2", "kernel_constant", "n_checked", "n_violations",
         "worst_margin"],
        [{"c1": fit.c1, "c2": fit.c2, "kernel_constant": spec.c_va,
          "n_checked": fit.n_checked, "n_violations": fit.n_violations,
          "worst_margin": fit.worst_margin}])
    report.figure_drift(os.path.join(outdir, "drift.png"), fit.samples,
                        fit.c1, fit.c2)
    ok = fit.satisfied
    lines = [f"drift: c1={fit.c1:.5g} c2={fit.c2:.5g} over "
             f"{fit.n_checked} configurations, "
             f"{fit.n_violations} violations "
             f"{'ok' if ok else 'FAIL'}"]
    return ok, lines, ["fit.csv", "drift.csv", "drift.png"]


def _exp_occupation(cfg: ExperimentConfig, outdir: str):
    window = Window(cfg.window["dim"], cfg.window["radius"])
    model = _build_model(cfg.model, window.dim)
    spec = _drift_spec(cfg, model)
    opts = cfg.options
    fit = drift_check(spec, model,
                      sample_configurations(window, opts["fit_samples"],
                                            cfg.seed,
                                            occupancy_cap=opts["fit_cap"]))
    fixed = spec.with_constants(opts["headroom"] * fit.c1, fit.c2)
    out = occupation_measure(model, window, opts["horizons"], opts["radii"],
                             fixed, seed=cfg.seed,
                             replicates=opts["replicates"])
    rows = out["rows"]
    report.write_csv(os.path.join(outdir, "occupation.csv"),
                     ["n", "r", "mu_hat", "se", "floor", "ok"], rows)
    report.figure_occupation(os.path.join(outdir, "occupation.png"), rows)
    ok = out["all_ok"]
    lines = [f"occupation: c1={fixed.c1:.5g} c2={fixed.c2:.5g}, "
             f"{sum(r['ok'] for r in rows)}/{len(rows)} cells above floor "
             f"{'ok' if ok else 'FAIL'}"]
    return ok, lines, ["occupation.csv", "occupation.png"]


def _exp_survival_sweep(cfg: ExperimentConfig, outdir: str):
    opts = cfg.options
    rows = survival_sweep([float(l) for l in opts["lambdas"]],
                          g=opts["g"], dim=cfg.window["dim"],
                          window_radii=[int(r) for r in opts["radii"]],
                          horizons=[float(t) for t in opts["horizons"]],
                          replicates=opts["replicates"], seed=cfg.seed)
    report.write_csv(os.path.join(outdir, "sweep.csv"),
                     ["lambda", "T", "radius", "replicates", "p_hat",
                      "ci_lo", "ci_hi"], rows)
    report.figure_survival(os.path.join(outdir, "survival.png"), rows)
    lines = [f"survival-sweep: {len(rows)} rows over "
             f"{len(opts['lambdas'])} rates"]
    return True, lines, ["sweep.csv", "survival.png"]


def _exp_bracket(cfg: ExperimentConfig, outdir: str):
    opts = cfg.options
    res = bracket_lambda_c(g=opts["g"], dim=cfg.window["dim"],
                           window_radius=cfg.window["radius"],
                           horizon=opts["horizon"],
                           replicates=opts["replicates"], tol=opts["tol"],
                           seed=cfg.seed, threshold=opts["threshold"],
                           max_factor=opts["max_factor"],
                           lam_hi=opts["lam_hi"])
    report.write_json(os.path.join(outdir, "bracket.json"),
                      {"lo": res.lo, "hi": res.hi,
                       "width": res.hi - res.lo, "clean": res.clean})
    report.write_csv(os.path.join(outdir, "decisions.csv"),
                     ["lambda", "replicates", "p_hat", "ci_lo", "ci_hi",
                      "verdict"], res.decisions)
    report.figure_bracket(os.path.join(outdir, "bracket.png"),
                          res.decisions, res.lo, res.hi)
    lines = [f"bracket: ({res.lo:g}, {res.hi:g}) width "
             f"{res.hi - res.lo:g} "
             f"{'clean' if res.clean else 'UNDECIDED POINTS'}"]
    return res.clean, lines, ["bracket.json", "decisions.csv",
                              "bracket.png"]


def _exp_window_convergence(cfg: ExperimentConfig, outdir: str):
    dim = cfg.window["dim"]
    model = _build_model(cfg.model, dim)
    eta0_counts = {}
    if cfg.initial.get("origin"):
        eta0_counts[(0,) * dim] = int(cfg.initial["origin"])
    for site, count in cfg.initial.get("sites", []):
        eta0_counts[tuple(site)] = int(count)
    opts = cfg.options
    rows = window_convergence(model, eta0_counts, opts["horizon"],
                              [int(r) for r in opts["radii"]], cfg.seed,
                              n_replicates=opts["replicates"],
                              probe_site=tuple(opts["probe_site"]))
    csv_rows = [{"radius": r["radius"], "tv_prev": r["tv_prev"],
                 "distribution": ";".join(
                     f"{k}:{v!r}" for k, v in r["distribution"].items())}
                for r in rows]
    report.write_csv(os.path.join(outdir, "convergence.csv"),
                     ["radius", "tv_prev", "distribution"], csv_rows)
    report.figure_convergence(os.path.join(outdir, "convergence.png"), rows)
    last = rows[-1]
    lines = [f"window-convergence: radii "
             f"{'/'.join(str(r['radius']) for r in rows)}, last TV step "
             f"{last['tv_prev']:.5f}"]
    return True, lines, ["convergence.csv", "convergence.png"]


_RUNNERS = {
    "run": _exp_run,
    "oracle-compare": _exp_oracle_compare,
    "coupling": _exp_coupling,
    "contraction": _exp_contraction,
    "martingale": _exp_martingale,
    "drift": _exp_drift,
    "occupation": _exp_occupation,
    "survival-sweep": _exp_survival_sweep,
    "bracket": _exp_bracket,
    "window-convergence": _exp_window_convergence,
}


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="latbd",
        description="Run one configured experiment and write deterministic "
                    "artifacts plus a manifest.")
    parser.add_argument("config", help="path to the TOML experiment config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--workers", type=int, default=None,
                        help="override replicate parallelism")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.seed, args.workers)
    except ConfigError as exc:
        print(f"error: config: {_one_line(exc)}", file=sys.stderr)
        return 2

    os.makedirs(cfg.output_dir, exist_ok=True)
    try:
        ok, lines, artifacts = _RUNNERS[cfg.experiment](cfg, cfg.output_dir)
    except ExplosionError as exc:
        print(f"error: explosion: {_one_line(exc)}", file=sys.stderr)
        return 4
    except (ConfigError, ValueError) as exc:
        print(f"error: config: {_one_line(exc)}", file=sys.stderr)
        return 2

    report.write_manifest(cfg.output_dir, cfg.resolved(),
                          artifacts)
    for line in lines:
        print(line)
    if not ok:
        print("error: assertion: a checked property failed; see artifacts "
              f"in {cfg.output_dir}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
