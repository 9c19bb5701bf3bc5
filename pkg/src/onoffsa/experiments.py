"""Scenario builders, configuration, trace I/O and the experiment runner."""
from __future__ import annotations

import configparser
import csv
import io
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .channel_queue import ArrivalModel, CostParams, build_fsmc
from .convexity import (
    LatticeFunction,
    induction_suite,
    brute_force_min,
    check_midpoint_lnatural,
    check_separable_convex,
    check_submodular_q,
)
from .estimator import EstimatorConfig, ExactEstimator, Scenario, make_estimator
from .mdp import (
    StructureError,
    assemble_pair_nc_twrc,
    assemble_single_user,
    check_policy_monotone,
    extract_policy,
    extract_thresholds,
    value_iteration,
)
from .sa import METHODS, SaTrace, StepSchedule, attach_oracle, calibrate_a, run_sa

__all__ = [
    "SCENARIOS",
    "ExperimentConfig",
    "load_config",
    "build_scenario",
    "build_single_user",
    "build_ofdma5",
    "build_nc_twrc4",
    "DpResult",
    "solve_dp",
    "compute_metrics",
    "smoothed_median",
    "write_trace",
    "read_trace",
    "run_method",
    "run_experiment",
]

SCENARIOS = ("single_user", "single_user_k2", "ofdma5", "ofdma5_d40", "nc_twrc4", "custom")

# Physical settings that differ between the preset scenarios.
_PRESETS = {
    "single_user": dict(L=10, K=8, p_f=(0.5,), avg_snr_db=(0.0,)),
    "single_user_k2": dict(L=10, K=2, p_f=(0.5,), avg_snr_db=(20.0,)),
    "ofdma5": dict(L=5, K=4, p_f=(0.2, 0.4, 0.5, 0.5, 0.5), avg_snr_db=(0.0,) * 5),
    "ofdma5_d40": dict(L=5, K=8, p_f=(0.2, 0.4, 0.5, 0.5, 0.5), avg_snr_db=(0.0,) * 5),
    "nc_twrc4": dict(L=5, K=4, p_f=(0.5,) * 4, avg_snr_db=(0.0,) * 4),
    "custom": dict(L=10, K=8, p_f=(0.5,), avg_snr_db=(0.0,)),
}


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "single_user"
    # physical
    w: float = 4.0
    L: int = 10
    pb_bar: float = 0.01
    beta: float = 0.95
    K: int = 8
    p_f: tuple = (0.5,)
    avg_snr_db: tuple = (0.0,)
    doppler: float = 10.0
    frame_duration: float = 1e-3
    floor_quantile: float = 0.01
    relay_cost: float = 1.0
    pairs: bool = False
    # dynamic programming
    epsilon: float = 1e-4
    # stochastic approximation
    methods: tuple = METHODS
    seeds: tuple = tuple(range(10))
    N: int = 500
    n_rep: int = 100
    B: float | None = None  # None: 0.095 * N
    alpha: float = 0.602
    target_step: float = 0.1
    calib_rep: int = 100
    C: float = 1.0
    rho: float = 0.101
    cspsa_perturb: str = "scaled"
    theta0: str = "center"
    estimator: str = "simulate"
    trunc_tol: float = 1e-4
    trunc_window: int = 5
    trunc_rule: str = "ceiling"
    A: dict = field(default_factory=dict)  # fixed A per method skips calibration
    oracle: bool = False
    out: str = "results"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if len(self.p_f) != len(self.avg_snr_db):
            raise ValueError("p_f and avg_snr_db need one entry per user")
        if self.pairs and len(self.p_f) % 2:
            raise ValueError("pair scenarios need an even number of users")
        if self.theta0 not in ("center", "zeros", "upper"):
            raise ValueError("theta0 must be center, zeros or upper")
        if self.estimator not in ("simulate", "gaussian", "exact"):
            raise ValueError("estimator must be simulate, gaussian or exact")
        if self.N < 1 or self.n_rep < 1 or self.calib_rep < 1:
            raise ValueError("N, n_rep and calib_rep must be positive")
        CostParams(self.w, self.pb_bar, self.L, self.beta)

    @property
    def step_B(self) -> float:
        return 0.095 * self.N if self.B is None else self.B

    @property
    def n_users(self) -> int:
        return len(self.p_f)

    def estimator_config(self, seed: int) -> EstimatorConfig:
        return EstimatorConfig(self.n_rep, self.beta, self.trunc_tol, self.trunc_window, seed, self.trunc_rule)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        d = asdict(self)
        cp["experiment"] = {k: _fmt(d[k]) for k in ("scenario", "methods", "seeds", "estimator", "theta0",
                                                    "oracle", "out")}
        cp["physical"] = {k: _fmt(d[k]) for k in ("w", "L", "pb_bar", "beta", "K", "doppler", "frame_duration",
                                                  "floor_quantile", "relay_cost", "pairs", "epsilon")}
        cp["sa"] = {k: _fmt(d[k]) for k in ("N", "n_rep", "B", "alpha", "target_step", "calib_rep", "C", "rho",
                                            "cspsa_perturb", "trunc_tol", "trunc_window", "trunc_rule")}
        for m, a in sorted(self.A.items()):
            cp["sa"][f"A_{m}"] = _fmt(a)
        for i, (p, s) in enumerate(zip(self.p_f, self.avg_snr_db), start=1):
            cp[f"user.{i}"] = {"p_f": _fmt(p), "avg_snr_db": _fmt(s)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _types():
    return {f.name: f.type for f in fields(ExperimentConfig)}


def _parse(name: str, raw: str):
    raw = raw.strip()
    if name in ("scenario", "cspsa_perturb", "theta0", "estimator", "trunc_rule", "out"):
        return raw
    if name == "methods":
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return METHODS if items == ["all"] else tuple(items)
    if name == "seeds":
        if ".." in raw:
            lo, hi = raw.split("..")
            return tuple(range(int(lo), int(hi) + 1))
        return tuple(int(s) for s in raw.split(",") if s.strip())
    if name in ("oracle", "pairs"):
        return raw.lower() in ("1", "true", "yes", "on")
    if name in ("L", "K", "N", "n_rep", "calib_rep", "trunc_window"):
        return int(raw)
    if name == "B":
        return None if raw.lower() == "auto" else float(raw)
    return float(raw)


def load_config(path: str | os.PathLike | None = None, text: str | None = None, **overrides) -> ExperimentConfig:
    """Read an INI file with sections ``[experiment]``, ``[physical]``, ``[sa]`` and ``[user.N]``.

    Preset values for the chosen scenario fill anything the file leaves out.
    Per-user sections override ``p_f`` and ``avg_snr_db``; a ``[physical]``
    ``avg_snr_db`` or ``p_f`` applies to every user.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh)
    elif text is not None:
        cp.read_string(text)
    known = _types()
    vals: dict = {}
    for sec in ("experiment", "physical", "sa"):
        if sec not in cp:
            continue
        for k, v in cp[sec].items():
            key = next((n for n in known if n.lower() == k), None)
            if k.startswith("a_") and sec == "sa":
                vals.setdefault("A", {})[k[2:]] = float(v)
            elif key is None:
                if k in ("avg_snr_db", "p_f"):
                    vals["_all_" + k] = float(v)
                else:
                    raise ValueError(f"unknown configuration key [{sec}] {k}")
            elif key in ("p_f", "avg_snr_db"):
                vals["_all_" + key] = float(v)
            else:
                vals[key] = _parse(key, v)
    vals.update(overrides)
    scenario = vals.get("scenario", "single_user")
    if scenario not in _PRESETS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    preset = dict(_PRESETS[scenario])
    preset["pairs"] = scenario == "nc_twrc4"
    for k in ("L", "K", "pairs"):
        vals.setdefault(k, preset[k])
    users = sorted((s for s in cp.sections() if s.startswith("user.")), key=lambda s: int(s.split(".")[1]))
    n_users = max(len(preset["p_f"]), max((int(s.split(".")[1]) for s in users), default=0))
    p_f = list(preset["p_f"]) + [preset["p_f"][-1]] * (n_users - len(preset["p_f"]))
    snr = list(preset["avg_snr_db"]) + [preset["avg_snr_db"][-1]] * (n_users - len(preset["avg_snr_db"]))
    if "_all_p_f" in vals:
        p_f = [vals.pop("_all_p_f")] * n_users
    if "_all_avg_snr_db" in vals:
        snr = [vals.pop("_all_avg_snr_db")] * n_users
    for s in users:
        i = int(s.split(".")[1]) - 1
        if "p_f" in cp[s]:
            p_f[i] = float(cp[s]["p_f"])
        if "avg_snr_db" in cp[s]:
            snr[i] = float(cp[s]["avg_snr_db"])
    vals.setdefault("p_f", tuple(p_f))
    vals.setdefault("avg_snr_db", tuple(snr))
    return ExperimentConfig(**vals)


# ---------------------------------------------------------------------------
# scenarios


def _user_models(cfg: ExperimentConfig):
    costs = CostParams(cfg.w, cfg.pb_bar, cfg.L, cfg.beta)
    users = []
    for p, snr_db in zip(cfg.p_f, cfg.avg_snr_db):
        fsmc = build_fsmc(10 ** (snr_db / 10), cfg.doppler, cfg.frame_duration, cfg.K, cfg.floor_quantile)
        users.append((fsmc, ArrivalModel.bernoulli(p)))
    return costs, users


def build_single_user(cfg: ExperimentConfig) -> Scenario:
    costs, users = _user_models(cfg)
    if len(users) != 1:
        raise ValueError("the single-user scenario has exactly one user")
    return Scenario([assemble_single_user(*users[0], costs)], cfg.scenario)


def build_ofdma5(cfg: ExperimentConfig) -> Scenario:
    """Independent per-user models (one subcarrier each) with a summed objective."""
    costs, users = _user_models(cfg)
    return Scenario([assemble_single_user(f, a, costs) for f, a in users], cfg.scenario)


def build_nc_twrc4(cfg: ExperimentConfig) -> Scenario:
    """Users (1,2), (3,4), ... exchange packets through a relay; one model per pair."""
    costs, users = _user_models(cfg)
    mdps = [assemble_pair_nc_twrc(users[i][0], users[i + 1][0], users[i][1], users[i + 1][1], costs, cfg.relay_cost)
            for i in range(0, len(users), 2)]
    return Scenario(mdps, cfg.scenario)


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    if cfg.pairs:
        return build_nc_twrc4(cfg)
    if cfg.n_users == 1:
        return build_single_user(cfg)
    return build_ofdma5(cfg)


# ---------------------------------------------------------------------------
# dynamic programming baseline


@dataclass
class DpResult:
    theta_star: np.ndarray
    j_star: float
    v_sum: float
    iterations: list
    policies: list
    values: list
    never_transmit: int

    @property
    def rel_gap(self) -> float:
        return abs(self.j_star - self.v_sum) / abs(self.v_sum) if self.v_sum else abs(self.j_star)


def solve_dp(scenario: Scenario, epsilon: float = 1e-4) -> DpResult:
    """Value iteration per model, monotonicity gate, threshold extraction."""
    thetas, iters, pols, vals = [], [], [], []
    never = 0
    for part in scenario.parts:
        V, n = value_iteration(part.mdp, epsilon=epsilon)
        pol = extract_policy(part.mdp, V)
        bad = check_policy_monotone(part.mdp, pol, part.layout)
        if bad:
            raise StructureError(f"optimal policy is not monotone in the queue state ({len(bad)} lines)")
        th = extract_thresholds(part.mdp, pol, part.layout)
        for idx, user, line in part.layout.monotone_lines(part.mdp):
            if idx is not None and not np.any(part.mdp.action_bits[pol[line], user]):
                never += 1
        thetas.append(th)
        iters.append(n)
        pols.append(pol)
        vals.append(V)
    theta_star = np.concatenate(thetas)
    return DpResult(theta_star, scenario.objective_exact(theta_star), float(sum(v.sum() for v in vals)),
                    iters, pols, vals, never)


# ---------------------------------------------------------------------------
# traces and metrics


def compute_metrics(trace: SaTrace, theta_star, exact) -> SaTrace:
    """Attach ``J([theta_n])`` and the normalized error to ``trace``."""
    return attach_oracle(trace, theta_star, exact)


def smoothed_median(traces, window: int = 50) -> np.ndarray:
    """Median normalized error across runs, averaged over consecutive ``window``-iteration blocks.

    Iterations 1..N are split into blocks of ``window``; a trailing partial
    block is averaged on its own.
    """
    errs = np.array([t.norm_err[1:] for t in traces])
    med = np.median(errs, axis=0)
    return np.array([med[i:i + window].mean() for i in range(0, med.size, window)])


def _header(D: int) -> list[str]:
    return ["n"] + [f"theta_{d}" for d in range(D)] + ["step", "grad_norm", "j_rounded", "norm_err", "meas_count"]


def _num(x) -> str:
    return format(float(x), ".17g")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace(trace: SaTrace, path) -> None:
    D = trace.theta.shape[1]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(_header(D))
    nan = np.full(trace.theta.shape[0], np.nan)
    jr = trace.j_rounded if trace.j_rounded is not None else nan
    ne = trace.norm_err if trace.norm_err is not None else nan
    for n in range(trace.theta.shape[0]):
        wr.writerow([n] + [_num(v) for v in trace.theta[n]] +
                    [_num(trace.step[n]), _num(trace.grad_norm[n]), _num(jr[n]), _num(ne[n]), int(trace.meas_count[n])])
    _atomic_write(Path(path), buf.getvalue())


def read_trace(path, method: str = "") -> SaTrace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    D = sum(1 for h in head if h.startswith("theta_"))
    if head != _header(D):
        raise ValueError(f"{path}: unexpected header")
    arr = np.array([[float(v) for v in r] for r in body])
    if not np.array_equal(arr[:, 0], np.arange(len(body))):
        raise ValueError(f"{path}: iteration column is not 0..N")
    jr, ne = arr[:, D + 3], arr[:, D + 4]
    return SaTrace(method, arr[:, 1:D + 1], arr[:, D + 1], arr[:, D + 2], arr[:, D + 5].astype(np.int64),
                   None if np.all(np.isnan(jr)) else jr, None if np.all(np.isnan(ne)) else ne)


# ---------------------------------------------------------------------------
# running


def initial_point(cfg: ExperimentConfig, scenario: Scenario) -> np.ndarray:
    if cfg.theta0 == "zeros":
        return np.zeros(scenario.dim)
    if cfg.theta0 == "upper":
        return scenario.upper.astype(float)
    return scenario.upper / 2.0


def run_method(cfg: ExperimentConfig, scenario: Scenario, method: str, seed: int, theta_star=None,
               exact=None) -> SaTrace:
    """Calibrate A (unless fixed) on a separate stream, then run SA for one seed."""
    theta0 = initial_point(cfg, scenario)
    ecfg = cfg.estimator_config(seed)
    B = cfg.step_B
    if method in cfg.A:
        A = float(cfg.A[method])
    else:
        cal = make_estimator(cfg.estimator, scenario, ecfg, stream=1 + METHODS.index(method))
        A = calibrate_a(cal, theta0, method, scenario.upper, B, cfg.alpha, cfg.target_step, cfg.calib_rep,
                        seed, cfg.C, cfg.rho, cfg.cspsa_perturb)
    est = make_estimator(cfg.estimator, scenario, ecfg, stream=0)
    sched = StepSchedule(A, B, cfg.alpha, cfg.C, cfg.rho)
    oracle = (theta_star, exact) if theta_star is not None and exact is not None else None
    trace = run_sa(method, est, theta0, cfg.N, sched, seed, scenario.upper, oracle, cfg.cspsa_perturb)
    trace.meta["estimator"] = cfg.estimator
    return trace


def _run_job(args):
    cfg, method, seed, theta_star = args
    scenario = build_scenario(cfg)
    exact = ExactEstimator(scenario) if theta_star is not None else None
    t = time.perf_counter()
    tr = run_method(cfg, scenario, method, seed, theta_star, exact)
    tr.meta["seconds"] = time.perf_counter() - t
    return method, seed, tr


def structural_checks(scenario: Scenario, dp: DpResult, cap: int = 10**6) -> dict:
    """Submodularity of Q at the DP solution, induction suites and, for small boxes, convexity of J."""
    out: dict = {}
    for i, part in enumerate(scenario.parts):
        out[f"model{i}/submodular_q"] = check_submodular_q(part.mdp, dp.values[i]).to_dict()
        if part.mdp.n_users == 1:
            for name, rep in induction_suite(part.mdp).items():
                out[f"model{i}/induction/{name}"] = rep.to_dict()
    fn = LatticeFunction(scenario.objective_exact, scenario.upper)
    if fn.size <= 2000:
        out["J/separable_convex"] = check_separable_convex(fn, cap=cap).to_dict()
        out["J/midpoint_lnatural"] = check_midpoint_lnatural(fn, cap=cap).to_dict()
        arg, val = brute_force_min(fn, cap=cap)
        out["J/brute_force_min"] = {"argmin": arg.tolist(), "min": val,
                                    "matches_dp": bool(np.array_equal(arg, dp.theta_star))}
    return out


def run_experiment(cfg: ExperimentConfig, workers: int | None = None, log=print) -> dict:
    """DP baseline, structural checks, then every (method, seed) SA run; writes CSVs and ``report.json``."""
    out = Path(cfg.out)
    t_start = time.perf_counter()
    scenario = build_scenario(cfg)
    dp = solve_dp(scenario, cfg.epsilon)
    log(f"[{cfg.scenario}] D={scenario.dim} states={scenario.n_states} DP sweeps={dp.iterations} "
        f"J(theta*)={dp.j_star:.6g} sum V={dp.v_sum:.6g}")
    checks = structural_checks(scenario, dp)
    theta_star = dp.theta_star if cfg.oracle else None
    jobs = [(cfg, m, s, theta_star) for m in cfg.methods for s in cfg.seeds]
    workers = workers or int(os.environ.get("ONOFFSA_THREADS", "1"))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    runs = []
    for method, seed, tr in results:
        path = out / f"trace_{method}_seed{seed}.csv"
        write_trace(tr, path)
        entry = {"method": method, "seed": seed, "A": tr.meta["A"], "B": tr.meta["B"], "csv": path.name,
                 "final": tr.final.tolist(), "seconds": round(tr.meta["seconds"], 3)}
        if tr.norm_err is not None:
            entry.update(final_j=float(tr.j_rounded[-1]), final_norm_err=float(tr.norm_err[-1]),
                         auc=tr.auc(), norm_absolute=tr.norm_absolute)
        runs.append(entry)
        log(f"  {method:8s} seed {seed}: A={tr.meta['A']:.4g} final={_short(tr.final)}"
            + (f" J={tr.j_rounded[-1]:.6g} err={tr.norm_err[-1]:.3f}" if tr.norm_err is not None else ""))
    report = {
        "config": cfg.to_ini(),
        "scenario": {"name": cfg.scenario, "dim": scenario.dim, "states": [p.mdp.n_states for p in scenario.parts]},
        "dp": {"theta_star": dp.theta_star.tolist(), "j_star": dp.j_star, "v_sum": dp.v_sum,
               "rel_gap": dp.rel_gap, "iterations": dp.iterations, "never_transmit_lines": dp.never_transmit},
        "checks": checks,
        "runs": runs,
        "seconds": round(time.perf_counter() - t_start, 3),
    }
    _atomic_write(out / "report.json", json.dumps(report, indent=2) + "\n")
    return report


def _short(v) -> str:
    v = list(v)
    return str(v) if len(v) <= 8 else f"[{', '.join(map(str, v[:6]))}, ... ({len(v)} entries)]"
