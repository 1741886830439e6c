"""Configuration-driven experiment runs with per-seed outputs, a summary and a manifest.

A configuration is a JSON document::

    {
      "env": {"preset": "maze_variance"},      # or "mdp": "path/to/mdp.json"
      "xi": "uniform",                         # "start", or an explicit distribution
      "risk": {"kind": "none", "c": 0.0},
      "solver": {"T": 100000, ...},            # SolverConfig fields
      "bca": {"K": 4, "c": 16.0},
      "kl_transfer": {"source": {...}, "drifted": {...}, "c": 1.0},
      "rollout": {"n": 100, "policy": "greedy"},
      "seed": 0,
      "seeds": [0, 1, 2]
    }

Every run writes per-seed files named ``seed_<k>_*`` and, once all seeds are
done, ``summary.json`` and ``manifest.json``.  The manifest holds the fully
resolved configuration, which reproduces the run exactly.

Seed ``k`` draws all of its randomness from ``SeedSequence(seed, spawn_key=(k,))``,
so adding seeds never changes the streams of existing ones.
"""

from __future__ import annotations

import copy
import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .bca import BcaConfig, bca_solve, surrogate_value
from .generative import GenerativeModel
from .gridworld import GridSpec, build_mdp, return_moments, rollout, sample_path
from .mdp import (
    MDPError,
    TabularMDP,
    check_distribution,
    greedy_policy_from_occupancy,
    load_mdp,
    load_occupancy,
    occupancy_from_policy,
    policy_from_occupancy,
    save_mdp,
    save_occupancy,
    uniform_xi,
)
from .oracle import exact_cautious_solve, lemma1_bound, value_iteration
from .risk import BarrierViolation, RiskError, kl_prior, risk_from_config
from .saddle import MetricsRecord, SolverConfig, solve

COMMANDS = ("solve", "bca", "kl-transfer", "baseline", "oracle", "rollout", "gridworld")
THREADS_ENV = "CAUTIOUS_RL_THREADS"


class ExperimentError(ValueError):
    """Invalid configuration; the message names the offending field."""


_SOLVER_FIELDS = tuple(f.name for f in fields(SolverConfig) if f.name not in ("lambda_init", "v_init", "seed"))

DEFAULTS = {
    "env": None,
    "mdp": None,
    "xi": "uniform",
    "risk": {"kind": "none", "c": 0.0, "params": {}},
    "solver": {name: getattr(SolverConfig(), name) for name in _SOLVER_FIELDS if name != "xi"},
    "bca": {"K": 4, "c": 16.0, "M": None, "warm_start": False, "literal_step": False, "certify_inner": False},
    "kl_transfer": {
        "source": {"preset": "kl_prior_source"},
        "drifted": {"preset": "kl_prior_drifted"},
        "c": 1.0,
        "marginal": False,
        "records": 20,
    },
    "rollout": {"n": 100, "horizon": None, "policy": "greedy", "occupancy": None, "paths": 3},
    "oracle": {"tol": 1e-9},
    "seed": 0,
    "seeds": [0],
}


# ---------------------------------------------------------------------------
# configuration


def parse_seeds(text: str) -> list:
    """``"0..9"`` (inclusive range), ``"0,3,5"`` or ``"4"``."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ExperimentError(f"seeds: cannot parse {text!r}; use a list like 0,1,2 or a range like 0..9") from None
    if not seeds or min(seeds) < 0:
        raise ExperimentError(f"seeds: need at least one nonnegative seed, got {text!r}")
    return seeds


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ExperimentError(f"config: cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ExperimentError(f"config {path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ExperimentError(f"config {path}: top level must be an object")
    return doc


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ExperimentError(f"{where}{key}: unknown field")
        if isinstance(base[key], dict) and isinstance(val, dict) and key not in ("params", "source", "drifted"):
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(doc: dict, command: str) -> dict:
    """Expand defaults and validate; the result is what the manifest records."""
    if command not in COMMANDS:
        raise ExperimentError(f"command: unknown subcommand {command!r}")
    cfg = _merge(DEFAULTS, doc or {}, "")
    # kl-transfer names its two environments in its own section
    if command != "kl-transfer" and (cfg["env"] is None) == (cfg["mdp"] is None):
        raise ExperimentError("env/mdp: exactly one of 'env' (grid spec) or 'mdp' (file path) is required")
    try:
        solver_config(cfg).validate()
    except ValueError as exc:
        raise ExperimentError(f"solver: {exc}") from None
    if cfg["rollout"]["policy"] not in ("greedy", "normalized"):
        raise ExperimentError("rollout.policy: must be 'greedy' or 'normalized'")
    if int(cfg["rollout"]["n"]) < 1:
        raise ExperimentError("rollout.n: must be positive")
    if command == "bca":
        try:
            bca_config(cfg, solver_config(cfg)).validate()
        except ValueError as exc:
            raise ExperimentError(f"bca: {exc}") from None
    seeds = cfg["seeds"]
    if isinstance(seeds, str):
        cfg["seeds"] = parse_seeds(seeds)
    elif not isinstance(seeds, list) or not seeds or not all(isinstance(k, int) and k >= 0 for k in seeds):
        raise ExperimentError("seeds: must be a nonempty list of nonnegative integers")
    return cfg


def solver_config(cfg: dict, **overrides) -> SolverConfig:
    doc = dict(cfg["solver"])
    doc.update(overrides)
    try:
        return SolverConfig(**doc)
    except TypeError as exc:
        raise ExperimentError(f"solver: {exc}") from None


def bca_config(cfg: dict, inner: SolverConfig, seed: int = 0) -> BcaConfig:
    b = cfg["bca"]
    return BcaConfig(K=int(b["K"]), c=float(b["c"]), M=None if b["M"] is None else float(b["M"]), inner=inner,
                     seed=seed, warm_start=bool(b["warm_start"]), literal_step=bool(b["literal_step"]),
                     certify_inner=bool(b["certify_inner"]))


def load_environment(env_doc, mdp_path, base_dir=None) -> tuple[TabularMDP, Optional[GridSpec]]:
    if env_doc is not None:
        try:
            spec = GridSpec.from_dict(env_doc)
        except (KeyError, TypeError) as exc:
            raise ExperimentError(f"env: {exc}") from None
        return build_mdp(spec), spec
    path = Path(mdp_path)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    try:
        return load_mdp(path), None
    except OSError as exc:
        raise ExperimentError(f"mdp: cannot read {path}: {exc.strerror}") from None


def resolve_xi(value, mdp: TabularMDP, spec: Optional[GridSpec]) -> np.ndarray:
    S = mdp.num_states
    if value == "uniform":
        return uniform_xi(S)
    if value == "start":
        if spec is None:
            raise ExperimentError("xi: 'start' needs a grid environment")
        xi = np.zeros(S)
        xi[spec.start_state] = 1.0
        return xi
    try:
        return check_distribution(np.asarray(value, dtype=float), S)
    except (MDPError, ValueError) as exc:
        raise ExperimentError(f"xi: {exc}") from None


def build_risk(doc: dict, mdp: TabularMDP, base_dir=None):
    try:
        return risk_from_config(doc, mdp, base_dir)
    except KeyError as exc:
        raise ExperimentError(f"risk.params.{exc.args[0]}: missing field") from None
    except OSError as exc:
        raise ExperimentError(f"risk.params: cannot read prior file: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ExperimentError(f"risk: {exc}") from None


def seed_streams(master: int, k: int) -> dict:
    """Independent integer seeds for the solver, the simulator and rollouts of seed ``k``."""
    words = np.random.SeedSequence(int(master), spawn_key=(int(k),)).generate_state(4)
    return {"solver": int(words[0]), "model": int(words[1]), "rollout": int(words[2]), "aux": int(words[3])}


def thread_count(num_tasks: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ExperimentError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}") from None
        if cap < 1:
            raise ExperimentError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}")
    return max(1, min(cap, num_tasks))


def run_seeds(fn: Callable[[int], dict], seeds) -> dict:
    """Run ``fn(k)`` for every seed, possibly in parallel; results keyed by seed in input order."""
    seeds = list(seeds)
    workers = thread_count(len(seeds))
    if workers == 1:
        return {k: fn(k) for k in seeds}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {k: pool.submit(fn, k) for k in seeds}
        return {k: fut.result() for k, fut in futures.items()}


# ---------------------------------------------------------------------------
# output


def write_table(out: Path, stem: str, header, rows, fmt: str = "csv") -> Path:
    """Write a time series as RFC-4180 CSV or as a JSON list of records."""
    if fmt == "json":
        path = out / f"{stem}.json"
        path.write_text(json.dumps([dict(zip(header, row)) for row in rows], indent=1))
        return path
    path = out / f"{stem}.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if x is None else (repr(float(x)) if isinstance(x, float) else x) for x in row])
    return path


def read_table(path) -> list:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True))


def write_manifest(out: Path, command: str, cfg: dict, extra: Optional[dict] = None) -> None:
    import numba
    import scipy

    doc = {
        "command": command,
        "config": cfg,
        "seed_streams": {str(k): seed_streams(cfg["seed"], k) for k in cfg["seeds"]},
        "versions": {"package": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "numba": numba.__version__},
        "scales": {
            "objective": "internal reward scale in [0, 1]",
            "residual_l1": "flow-balance residual of the averaged occupancy",
            "return_raw": "raw reward units",
            "rollout returns": "raw reward units",
        },
        "created_unix": time.time(),
    }
    if extra:
        doc.update(extra)
    write_json(out / "manifest.json", doc)


def _metrics_rows(metrics) -> list:
    return [m.as_row() for m in metrics]


def _extract(lam, mode: str) -> np.ndarray:
    return greedy_policy_from_occupancy(lam) if mode == "greedy" else policy_from_occupancy(lam)


def _rollout_start(spec: Optional[GridSpec], xi):
    return spec.start_state if spec is not None else xi


def _rollout_stats(mdp, pi, start, cfg, seed) -> dict:
    model = GenerativeModel(mdp, np.random.default_rng(seed))
    res = rollout(model, pi, start, horizon=cfg["rollout"]["horizon"], n_trajectories=int(cfg["rollout"]["n"]))
    mean, var = return_moments(mdp, pi, start)
    return {"returns": res.returns, "mean": res.mean, "variance": res.variance, "exact_mean": mean,
            "exact_variance": var, "horizon": res.horizon}


# ---------------------------------------------------------------------------
# experiments (pure functions of a resolved config; the runners below add I/O)


@dataclass
class SeedOutcome:
    summary: dict
    tables: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)


def solve_experiment(cfg: dict, k: int, base_dir=None) -> SeedOutcome:
    mdp, spec = load_environment(cfg["env"], cfg["mdp"], base_dir)
    xi = resolve_xi(cfg["xi"], mdp, spec)
    streams = seed_streams(cfg["seed"], k)
    risk = build_risk(cfg["risk"], mdp, base_dir)
    sc = solver_config(cfg, seed=streams["solver"], xi=tuple(xi))
    res = solve(GenerativeModel(mdp, np.random.default_rng(streams["model"])), risk, sc)
    pi = _extract(res.lambda_bar, cfg["rollout"]["policy"])
    ro = _rollout_stats(mdp, pi, _rollout_start(spec, xi), cfg, streams["rollout"])
    last = res.metrics[-1]
    summary = {
        "return_raw": last.return_raw,
        "objective": last.objective,
        "residual_l1": last.residual_l1,
        "kl_to_prior": last.kl_to_prior,
        "rollout_mean": ro["mean"],
        "rollout_variance": ro["variance"],
        "policy_exact_mean": ro["exact_mean"],
        "policy_exact_variance": ro["exact_variance"],
        "params": res.params,
        "diagnostics": res.diagnostics,
    }
    tables = {
        "metrics": (MetricsRecord.FIELDS, _metrics_rows(res.metrics)),
        "returns": (("trajectory", "return"), [(i, float(g)) for i, g in enumerate(ro["returns"])]),
        "policy": (("state",) + tuple(f"a{a}" for a in range(mdp.num_actions)),
                   [(s,) + tuple(float(x) for x in pi[s]) for s in range(mdp.num_states)]),
    }
    return SeedOutcome(summary, tables, {"occupancy": (res.lambda_bar, mdp.gamma)})


def bca_experiment(cfg: dict, k: int, base_dir=None) -> SeedOutcome:
    """Risk-neutral solve and BCA on the same MDP, then rollouts of both policies."""
    mdp, spec = load_environment(cfg["env"], cfg["mdp"], base_dir)
    xi = resolve_xi(cfg["xi"], mdp, spec)
    streams = seed_streams(cfg["seed"], k)
    inner = solver_config(cfg, seed=streams["solver"], xi=tuple(xi))
    neutral = solve(GenerativeModel(mdp, np.random.default_rng(streams["model"])),
                    risk_from_config({"kind": "none", "c": 0.0}, mdp), inner)
    bc = bca_config(cfg, inner, seed=streams["aux"])
    bres = bca_solve(mdp, GenerativeModel(mdp, np.random.default_rng(streams["model"] + 1)), bc)
    mode = cfg["rollout"]["policy"]
    start = _rollout_start(spec, xi)
    pi_n = _extract(neutral.lambda_bar, mode)
    pi_b = _extract(bres.lambda_kstar, mode)
    ro_n = _rollout_stats(mdp, pi_n, start, cfg, streams["rollout"])
    ro_b = _rollout_stats(mdp, pi_b, start, cfg, streams["rollout"])
    phi_rows = [(h["k"], h["step"], h["phi"], h["residual_l1"], h["eps_inner"]) for h in bres.history]
    comparison = []
    for name, ro in (("neutral", ro_n), ("bca", ro_b)):
        comparison.append((name, ro["mean"], ro["variance"], ro["exact_mean"], ro["exact_variance"]))
    summary = {
        "neutral": {"rollout_mean": ro_n["mean"], "rollout_variance": ro_n["variance"],
                    "exact_mean": ro_n["exact_mean"], "exact_variance": ro_n["exact_variance"],
                    "residual_l1": neutral.metrics[-1].residual_l1},
        "bca": {"rollout_mean": ro_b["mean"], "rollout_variance": ro_b["variance"],
                "exact_mean": ro_b["exact_mean"], "exact_variance": ro_b["exact_variance"],
                "k_star": bres.k_star, "residual_l1": bres.history[-1]["residual_l1"]},
        "variance_reduced": ro_b["variance"] <= ro_n["variance"],
        "mean_ratio": ro_b["mean"] / ro_n["mean"] if ro_n["mean"] != 0 else None,
        "phi_monotone": phi_monotone(bres.history),
    }
    tables = {
        "phi": (("k", "step", "phi", "residual_l1", "eps_inner"), phi_rows),
        "comparison": (("policy", "rollout_mean", "rollout_variance", "exact_mean", "exact_variance"), comparison),
        "returns": (("policy", "trajectory", "return"),
                    [("neutral", i, float(g)) for i, g in enumerate(ro_n["returns"])]
                    + [("bca", i, float(g)) for i, g in enumerate(ro_b["returns"])]),
    }
    return SeedOutcome(summary, tables, {"occupancy": (bres.lambda_kstar, mdp.gamma),
                                         "neutral_occupancy": (neutral.lambda_bar, mdp.gamma)})


def phi_monotone(history: list) -> Optional[bool]:
    """Whether ``Phi`` after each ``lam`` step never drops by more than ``2 eps_inner``.

    Returns ``None`` when the inner accuracy was not measured.
    """
    rows = [h for h in history if h["step"] == "lambda"]
    if any(h["eps_inner"] is None for h in rows):
        return None
    for prev, nxt in zip(rows, rows[1:]):
        tol = 2.0 * max(prev["eps_inner"], nxt["eps_inner"])
        if nxt["phi"] < prev["phi"] - tol - 1e-12:
            return False
    return True


def unrewarding_fraction(lam, states) -> float:
    """Share of the occupancy mass on the given states."""
    lam = np.asarray(lam, dtype=float)
    states = list(states)
    return float(lam[states].sum() / lam.sum()) if states else 0.0


def kl_transfer_experiment(cfg: dict, k: int, base_dir=None, out: Optional[Path] = None) -> SeedOutcome:
    """Neutral policy on the source task becomes a KL prior on the drifted task.

    The prior is the exact occupancy of the extracted source policy.  Both
    the KL-penalized and the risk-neutral solves on the drifted task record
    the running-average return and the unrewarding-state occupancy.
    """
    kt = cfg["kl_transfer"]
    src_mdp, src_spec = load_environment(kt["source"], None, base_dir)
    dft_mdp, dft_spec = load_environment(kt["drifted"], None, base_dir)
    if (src_mdp.num_states, src_mdp.num_actions) != (dft_mdp.num_states, dft_mdp.num_actions):
        raise ExperimentError("kl_transfer: source and drifted environments must have the same size")
    xi_src = resolve_xi(cfg["xi"], src_mdp, src_spec)
    xi = resolve_xi(cfg["xi"], dft_mdp, dft_spec)
    streams = seed_streams(cfg["seed"], k)
    T = int(cfg["solver"]["T"])
    record = int(cfg["solver"]["record_every"]) or max(1, T // int(kt["records"]))
    base = solver_config(cfg, seed=streams["solver"], xi=tuple(xi), record_every=record)
    none = risk_from_config({"kind": "none", "c": 0.0}, src_mdp)
    src = solve(GenerativeModel(src_mdp, np.random.default_rng(streams["aux"])), none, replace(base, xi=tuple(xi_src)))
    prior_policy = policy_from_occupancy(src.lambda_bar)
    prior = occupancy_from_policy(src_mdp, prior_policy, xi_src)
    if out is not None:
        save_occupancy(prior, src_mdp.gamma, out / f"seed_{k}_prior.json")
        prior = load_occupancy(out / f"seed_{k}_prior.json")[0]
    mdp = dft_mdp
    mode = cfg["rollout"]["policy"]
    unrewarding = dft_spec.unrewarding if dft_spec is not None else ()
    series = {}

    def tracker(name):
        rows = series.setdefault(name, [])

        def cb(t, lam_bar):
            pi = _extract(lam_bar, mode)
            occ = occupancy_from_policy(mdp, pi, xi)
            rows.append((name, t, mdp.raw_return(float(np.sum(lam_bar * mdp.reward))),
                         mdp.raw_return(float(np.sum(occ * mdp.reward))),
                         unrewarding_fraction(lam_bar, unrewarding), unrewarding_fraction(occ, unrewarding)))
        return cb

    risk = kl_prior((1.0 - mdp.gamma) * prior, mdp.gamma, float(kt["c"]), marginal=bool(kt["marginal"]),
                    num_actions=mdp.num_actions)
    model_seed = streams["model"]
    averse = solve(GenerativeModel(mdp, np.random.default_rng(model_seed)), risk, base, callback=tracker("kl_prior"))
    neutral = solve(GenerativeModel(mdp, np.random.default_rng(model_seed)), none, base, callback=tracker("neutral"))
    header = ("policy", "t", "return_raw", "policy_return_raw", "unrewarding_lambda", "unrewarding_policy")
    rows = series["kl_prior"] + series["neutral"]
    fin_a, fin_n = series["kl_prior"][-1], series["neutral"][-1]
    summary = {
        "kl_prior": {"return_raw": fin_a[2], "policy_return_raw": fin_a[3], "unrewarding_lambda": fin_a[4],
                     "unrewarding_policy": fin_a[5], "residual_l1": averse.metrics[-1].residual_l1,
                     "kl_to_prior": averse.metrics[-1].kl_to_prior},
        "neutral": {"return_raw": fin_n[2], "policy_return_raw": fin_n[3], "unrewarding_lambda": fin_n[4],
                    "unrewarding_policy": fin_n[5], "residual_l1": neutral.metrics[-1].residual_l1},
        "source_residual_l1": src.metrics[-1].residual_l1,
        "unrewarding_reduced": fin_a[5] < fin_n[5],
    }
    return SeedOutcome(summary, {"series": (header, rows)}, {"occupancy": (averse.lambda_bar, mdp.gamma)})


def baseline_report(cfg: dict, base_dir=None) -> dict:
    """Value iteration: ``xi^T v*`` on the raw scale and the optimal policy's return moments."""
    mdp, spec = load_environment(cfg["env"], cfg["mdp"], base_dir)
    xi = resolve_xi(cfg["xi"], mdp, spec)
    vi = value_iteration(mdp)
    start = _rollout_start(spec, xi)
    mean, var = return_moments(mdp, vi.policy, start)
    return {"xi_v_star": float(xi @ vi.v), "xi_v_star_raw": mdp.raw_return(float(xi @ vi.v)),
            "v_star": vi.v, "iterations": vi.iterations, "policy": vi.policy,
            "optimal_exact_mean": mean, "optimal_exact_variance": var}


def oracle_report(cfg: dict, base_dir=None) -> dict:
    mdp, spec = load_environment(cfg["env"], cfg["mdp"], base_dir)
    xi = resolve_xi(cfg["xi"], mdp, spec)
    risk = build_risk(cfg["risk"], mdp, base_dir)
    tol = float(cfg["oracle"]["tol"])
    try:
        rep = exact_cautious_solve(mdp, risk, risk.c, xi=xi, tol=tol)
    except BarrierViolation:
        raise
    except ValueError as exc:
        raise ExperimentError(f"risk: {exc}") from None
    doc = rep.to_dict()
    bound = lemma1_bound(mdp.gamma, risk.c, risk.sigma)
    doc.update({"objective_raw": mdp.raw_return(float(np.sum(rep.lambda_star * mdp.reward)))
                if risk.c == 0 else None,
                "lemma1_bound": bound, "lemma1_holds": bool(np.abs(rep.v_star).max() <= bound + 1e-6),
                "tol": tol, "risk": risk.describe()})
    return doc


def rollout_experiment(cfg: dict, k: int, base_dir=None) -> SeedOutcome:
    mdp, spec = load_environment(cfg["env"], cfg["mdp"], base_dir)
    xi = resolve_xi(cfg["xi"], mdp, spec)
    streams = seed_streams(cfg["seed"], k)
    occ = cfg["rollout"]["occupancy"]
    if occ is None:
        pi = value_iteration(mdp).policy
    else:
        path = Path(occ) if base_dir is None or Path(occ).is_absolute() else Path(base_dir) / occ
        try:
            lam, _ = load_occupancy(path)
        except OSError as exc:
            raise ExperimentError(f"rollout.occupancy: cannot read {path}: {exc.strerror}") from None
        pi = _extract(lam, cfg["rollout"]["policy"])
    start = _rollout_start(spec, xi)
    ro = _rollout_stats(mdp, pi, start, cfg, streams["rollout"])
    paths = []
    if np.ndim(start) == 0:
        model = GenerativeModel(mdp, np.random.default_rng(streams["aux"]))
        for i in range(int(cfg["rollout"]["paths"])):
            paths += [(i,) + row for row in sample_path(model, pi, int(start), cfg["rollout"]["horizon"])]
    summary = {"rollout_mean": ro["mean"], "rollout_variance": ro["variance"], "exact_mean": ro["exact_mean"],
               "exact_variance": ro["exact_variance"], "horizon": ro["horizon"]}
    tables = {"returns": (("trajectory", "return"), [(i, float(g)) for i, g in enumerate(ro["returns"])]),
              "paths": (("trajectory", "t", "state", "action", "next_state", "reward"), paths)}
    return SeedOutcome(summary, tables)


# ---------------------------------------------------------------------------
# runners: the CLI subcommands


def _emit(out: Path, k: int, outcome: SeedOutcome, fmt: str) -> None:
    for name, (header, rows) in outcome.tables.items():
        write_table(out, f"seed_{k}_{name}", header, rows, fmt)
    for name, (lam, gamma) in outcome.files.items():
        save_occupancy(lam, gamma, out / f"seed_{k}_{name}.json")


def _aggregate(per_seed: dict, keys) -> dict:
    agg = {}
    for key in keys:
        vals = [s[key] for s in per_seed.values() if s.get(key) is not None]
        if vals:
            agg[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    return agg


def run_command(command: str, cfg: dict, out, fmt: str = "csv", base_dir=None) -> dict:
    """Run a resolved configuration and write its files under ``out``; returns the summary."""
    if fmt not in ("csv", "json"):
        raise ExperimentError(f"format: expected csv or json, got {fmt!r}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg["seeds"]
    t0 = time.perf_counter()
    if command in ("solve", "bca", "kl-transfer", "rollout"):
        fn = {"solve": solve_experiment, "bca": bca_experiment, "rollout": rollout_experiment}.get(command)

        def one(k):
            if command == "kl-transfer":
                outcome = kl_transfer_experiment(cfg, k, base_dir, out)
            else:
                outcome = fn(cfg, k, base_dir)
            _emit(out, k, outcome, fmt)
            return outcome.summary

        per_seed = run_seeds(one, seeds)
        summary = {"command": command, "seeds": {str(k): v for k, v in per_seed.items()}}
        if command == "solve":
            summary["aggregate"] = _aggregate(per_seed, ("return_raw", "objective", "residual_l1", "rollout_mean",
                                                         "rollout_variance", "policy_exact_mean"))
        elif command == "bca":
            summary["aggregate"] = {
                "variance_reduced": all(s["variance_reduced"] for s in per_seed.values()),
                "mean_ratio": _aggregate(per_seed, ("mean_ratio",)).get("mean_ratio"),
            }
        elif command == "kl-transfer":
            summary["aggregate"] = {"unrewarding_reduced": all(s["unrewarding_reduced"] for s in per_seed.values())}
        elif command == "rollout":
            summary["aggregate"] = _aggregate(per_seed, ("rollout_mean", "rollout_variance"))
    elif command == "baseline":
        summary = {"command": command, **baseline_report(cfg, base_dir)}
    elif command == "oracle":
        summary = {"command": command, **oracle_report(cfg, base_dir)}
    elif command == "gridworld":
        summary = {"command": command, **gridworld_report(cfg, out, base_dir)}
    else:
        raise ExperimentError(f"command: unknown subcommand {command!r}")
    summary["wall_seconds"] = time.perf_counter() - t0
    write_json(out / "summary.json", summary)
    write_manifest(out, command, cfg)
    return summary


def gridworld_report(cfg: dict, out: Path, base_dir=None) -> dict:
    from .gridworld import render_ascii

    mdp, spec = load_environment(cfg["env"], cfg["mdp"], base_dir)
    save_mdp(mdp, out / "mdp.json")
    doc = {"num_states": mdp.num_states, "num_actions": mdp.num_actions, "gamma": mdp.gamma,
           "reward_affine": list(mdp.reward_affine)}
    if spec is not None:
        write_json(out / "grid.json", spec.to_dict())
        text = render_ascii(spec)
        (out / "render.txt").write_text(text + "\n")
        doc["render"] = text
    return doc


__all__ = [
    "COMMANDS",
    "DEFAULTS",
    "ExperimentError",
    "RiskError",
    "SeedOutcome",
    "baseline_report",
    "bca_experiment",
    "kl_transfer_experiment",
    "load_config",
    "load_environment",
    "oracle_report",
    "parse_seeds",
    "phi_monotone",
    "resolve_config",
    "resolve_xi",
    "rollout_experiment",
    "run_command",
    "run_seeds",
    "seed_streams",
    "solve_experiment",
    "surrogate_value",
    "unrewarding_fraction",
    "write_table",
]
