"""Desk-scale experiments behind the command line.

Every experiment takes a flat parameter dict (defaults in ``DEFAULTS``) and
returns an ``ExperimentResult``: rows for ``results.csv``, a metrics dict,
named checks, and optional extra CSV tables. Sweeps over seeds or settings
fan out to a process pool when ``threads > 1``.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import ks_2samp

from . import convexnet as cn
from . import duq
from . import lft
from . import model as bm
from . import training as tr
from .estimator import estimate_bilip, estimate_bilip_points

# ---------------------------------------------------------------------------
# results


@dataclass
class Check:
    name: str
    passed: bool
    value: object = None
    threshold: object = None

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed),
                "value": _jsonable(self.value), "threshold": _jsonable(self.threshold)}


@dataclass
class ExperimentResult:
    rows: list
    metrics: dict
    checks: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)   # file name -> list of row dicts
    documents: dict = field(default_factory=dict)   # file name -> JSON-ready object

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c.to_dict() for c in self.checks if not c.passed]


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [_jsonable(u) for u in v]
    if isinstance(v, dict):
        return {k: _jsonable(u) for k, u in v.items()}
    return v


def _pool_map(fn, jobs, threads):
    if threads and threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _fit_config(p, seed, kind="blnn"):
    """Training settings; ``sn_``-prefixed keys override them for the baseline."""
    def get(key):
        return p.get(f"sn_{key}", p[key]) if kind == "sn" else p[key]
    return tr.TrainConfig(epochs=get("epochs"), batch_size=get("batch_size"), lr=get("lr"),
                          lr_schedule=get("lr_schedule"), lr_min=get("lr_min"), seed=seed)


def _make_regressor(kind, p, L, seed, alpha=None):
    if kind == "blnn":
        a = p["alpha"] if alpha is None else alpha
        return tr.default_blnn(alpha=a, beta=L - a, hidden=p["hidden"], layers=p["layers"],
                               seed=seed, input_gain=p["input_gain"])
    if kind == "sn":
        return tr.make_sn_mlp(tuple(p["sn_dims"]), scale=L, seed=seed)
    raise ValueError(f"unknown model {kind!r}")


# shared settings of the one-dimensional fitting experiments; the baseline
# keeps plain Adam at 0.01 for 200 full-batch epochs
FIT_DEFAULTS = dict(epochs=1600, batch_size=30, lr=0.05, lr_schedule="cosine", lr_min=5e-4,
                    hidden=64, layers=2, input_gain=5.0, alpha=1.0, n_train=300,
                    sn_dims=[1, 45, 45, 45, 1], sn_epochs=200, sn_batch_size=None, sn_lr=0.01,
                    sn_lr_schedule="constant", estimate_samples=1000)


# ---------------------------------------------------------------------------
# tightness


def _tightness_job(job):
    kind, L, seed, p = job
    model = _make_regressor(kind, p, L, seed)
    data = tr.make_step_dataset(p["n_train"], seed=seed)
    rep = tr.train_regression(model, data, _fit_config(p, seed, kind))
    est = tr.empirical_bilip(lambda X: tr.predict(model, X), p["estimate_samples"], -1.0, 1.0, seed=seed)
    test = tr.make_test_grid(tr.step_function)
    return {"model": kind, "L": L, "seed": seed, "lip_hat": est.lip_hat, "invlip_hat": est.invlip_hat,
            "tightness": 100.0 * est.lip_hat / L, "train_loss": rep.history[-1].loss,
            "test_mse": tr.evaluate_mse(model, test), "seconds": rep.seconds}


def tightness(p) -> ExperimentResult:
    jobs = [(kind, float(L), p["seed"] + s, p)
            for kind in p["models"] for L in p["L"] for s in range(p["seeds"])]
    rows = _pool_map(_tightness_job, jobs, p["threads"])
    metrics, checks = {}, []
    for kind in p["models"]:
        for L in p["L"]:
            t = np.array([r["tightness"] for r in rows if r["model"] == kind and r["L"] == L])
            key = f"{kind}_L{L:g}"
            metrics[key] = {"mean": float(t.mean()), "std": float(t.std()), "n": int(t.size)}
            if kind == "blnn":
                checks.append(Check(f"{key}_mean_tightness", t.mean() >= p["min_tightness"],
                                    float(t.mean()), p["min_tightness"]))
            elif kind == "sn" and L == p["sn_check_L"]:
                checks.append(Check(f"{key}_mean_tightness", t.mean() <= p["sn_max_tightness"],
                                    float(t.mean()), p["sn_max_tightness"]))
    slowest = max(r["seconds"] for r in rows)
    metrics["slowest_run_seconds"] = slowest
    checks.append(Check("each_run_within_time_limit", slowest <= p["time_limit"], slowest, p["time_limit"]))
    return ExperimentResult(rows, metrics, checks)


# ---------------------------------------------------------------------------
# flexibility and the loss-versus-bound sweep


def _linear_fit_job(job):
    kind, L, slope, seed, p, alpha = job
    model = _make_regressor(kind, p, L, seed, alpha)
    data = tr.make_linear_dataset(slope, p["n_train"], seed=seed)
    rep = tr.train_regression(model, data, _fit_config(p, seed, kind))
    losses = rep.losses
    below = np.nonzero(losses < p["loss_threshold"])[0]
    test = tr.make_test_grid(tr.target_fn("linear", slope))
    return {"model": kind, "L": L, "slope": slope, "seed": seed, "final_loss": float(losses[-1]),
            "first_epoch_below": int(below[0]) + 1 if below.size else -1,
            "test_mse": tr.evaluate_mse(model, test), "seconds": rep.seconds,
            "curve": losses.tolist()}


def _curve_table(rows):
    table = []
    for r in rows:
        for e, loss in enumerate(r.pop("curve"), start=1):
            table.append({"model": r["model"], "L": r["L"], "epoch": e, "loss": loss})
    return table


def flexibility(p) -> ExperimentResult:
    jobs = [(kind, float(p["L"]), float(p["slope"]), p["seed"], p, p["alpha"]) for kind in p["models"]]
    rows = _pool_map(_linear_fit_job, jobs, p["threads"])
    curves = _curve_table(rows)
    by = {r["model"]: r for r in rows}
    checks = []
    if "blnn" in by:
        checks.append(Check("blnn_test_mse", by["blnn"]["test_mse"] < p["blnn_max_mse"],
                            by["blnn"]["test_mse"], p["blnn_max_mse"]))
    if "sn" in by:
        checks.append(Check("sn_test_mse", by["sn"]["test_mse"] > p["sn_min_mse"],
                            by["sn"]["test_mse"], p["sn_min_mse"]))
    metrics = {f"{r['model']}_test_mse": r["test_mse"] for r in rows}
    return ExperimentResult(rows, metrics, checks, {"curves.csv": curves})


def summary_sweep(p) -> ExperimentResult:
    jobs = [(kind, float(L), float(p["slope"]), p["seed"], p, None)
            for kind in p["models"] for L in p["L"]]
    rows = _pool_map(_linear_fit_job, jobs, p["threads"])
    curves = _curve_table(rows)
    checks, metrics = [], {}
    blnn = {r["L"]: r["final_loss"] for r in rows if r["model"] == "blnn"}
    metrics["blnn_final_loss"] = {f"{L:g}": v for L, v in sorted(blnn.items())}
    for L in p["fit_L"]:
        if L in blnn:
            checks.append(Check(f"blnn_L{L:g}_fits", blnn[L] < p["fit_max_loss"], blnn[L], p["fit_max_loss"]))
    chain = [L for L in p["increasing_L"] if L in blnn]
    losses = [blnn[L] for L in chain]
    if len(chain) >= 2:
        ok = all(a < b for a, b in zip(losses, losses[1:]))
        checks.append(Check("blnn_loss_increases_as_L_decreases", ok, losses, chain))
    sn = {r["L"]: r["final_loss"] for r in rows if r["model"] == "sn"}
    if sn:
        metrics["sn_final_loss"] = {f"{L:g}": v for L, v in sorted(sn.items())}
    L0 = p["sn_check_L"]
    if L0 in sn:
        checks.append(Check(f"sn_L{L0:g}_loss_bounded_away_from_zero", sn[L0] > p["fit_max_loss"],
                            sn[L0], p["fit_max_loss"]))
    return ExperimentResult(rows, metrics, checks, {"curves.csv": curves})


# ---------------------------------------------------------------------------
# bi-Lipschitz constants at initialization


def init_constants(alpha, beta, trials, dims, n_points, box, scheme, seed, solver=None):
    """Estimated ``(lip_hat, invlip_hat)`` of freshly initialized BLNNs."""
    out = []
    for t in range(trials):
        model = bm.make_blnn(dims, alpha, beta, scheme=scheme, seed=seed + t)
        X = np.random.default_rng(seed + 100_000 + t).uniform(box[0], box[1], size=(n_points, dims[0]))
        F, _ = bm.blnn_forward(model, X, solver)
        e = estimate_bilip_points(X, F)
        out.append((e.lip_hat, e.invlip_hat))
    return np.array(out)


def init_dist(p) -> ExperimentResult:
    alpha, beta = p["alpha"], p["beta"]
    upper = alpha + beta
    dims = [p["dim"]] + [p["hidden"]] * p["layers"] + [1]
    schemes = {"xavier_clamp": cn.InitScheme()}
    if p["compare_uniform"]:
        schemes["uniform"] = cn.InitScheme.uniform(*p["compare_uniform"])
    rows, est = [], {}
    for name, scheme in schemes.items():
        est[name] = init_constants(alpha, beta, p["trials"], dims, p["n_points"], p["box"], scheme, p["seed"])
        rows += [{"scheme": name, "trial": t, "lip_hat": a, "invlip_hat": b}
                 for t, (a, b) in enumerate(est[name])]
    base = est["xavier_clamp"]
    near = float(np.mean(np.abs(base[:, 0] - upper) <= 0.05 * upper))
    tol = p["bound_tol"]
    all_in = bool(np.all(base >= alpha - tol) and np.all(base <= upper + tol))
    metrics = {"fraction_lip_within_5pct": near, "lip_range": [base[:, 0].min(), base[:, 0].max()],
               "invlip_range": [base[:, 1].min(), base[:, 1].max()]}
    checks = [Check("lip_concentrated_at_upper_bound", near >= p["min_fraction"], near, p["min_fraction"]),
              Check("all_estimates_within_bounds", all_in,
                    [float(base.min()), float(base.max())], [alpha - tol, upper + tol])]
    if "uniform" in est:
        ks = ks_2samp(base[:, 1], est["uniform"][:, 1])
        metrics["invlip_ks_statistic"] = float(ks.statistic)
        metrics["invlip_ks_pvalue"] = float(ks.pvalue)
        u = est["uniform"]
        checks.append(Check("uniform_init_within_bounds",
                            bool(np.all(u >= alpha - tol) and np.all(u <= upper + tol)),
                            [float(u.min()), float(u.max())], [alpha - tol, upper + tol]))
        checks.append(Check("uniform_init_shifts_invlip", ks.statistic > 0, float(ks.statistic), 0.0))
    return ExperimentResult(rows, metrics, checks)


# ---------------------------------------------------------------------------
# iterate studies of the inner solvers


def iterate_trace(objective, X, config, t_max):
    """Iterates ``y_t(x)`` for ``t = 0..t_max`` (frozen rows repeat)."""
    Y = [np.zeros_like(X)]
    cfg = lft.SolverConfig.from_dict({**config.to_dict(), "max_iters": t_max, "tol": 1e-300})
    lft.solve_lft(objective, X, cfg, callback=lambda t, Yt: Y.append(Yt.copy()))
    while len(Y) < t_max + 1:
        Y.append(Y[-1])
    return np.stack(Y)


def path_smoothness(objective, Y, n_mid=2000, seed=0):
    """Largest Hessian eigenvalue over iterates and random points on segments between them.

    The Lipschitz bound for GD iterates needs the curvature along segments
    joining iterates of different inputs at the same step.
    """
    pts = Y.reshape(-1, Y.shape[-1])
    rng = np.random.default_rng(seed)
    T, n, _ = Y.shape
    t = rng.integers(0, T, n_mid)
    i, j = rng.integers(0, n, n_mid), rng.integers(0, n, n_mid)
    lam = rng.uniform(size=(n_mid, 1))
    mids = lam * Y[t, i] + (1 - lam) * Y[t, j]
    best = 0.0
    for chunk in np.array_split(np.vstack([pts, mids]), max(1, (len(pts) + n_mid) // 4000)):
        best = max(best, float(np.linalg.eigvalsh(objective.hessian(chunk))[:, -1].max()))
    return best


def _ratios_per_step(X, Y):
    dx = pdist(X)
    keep = dx > 1e-12
    lip, inv = [], []
    for Yt in Y:
        r = pdist(Yt)[keep] / dx[keep]
        lip.append(float(r.max()))
        inv.append(float(r.min()))
    return np.array(lip), np.array(inv)


def certify_gd(n_objectives=20, dim=2, hidden=10, layers=2, n_points=100, t_max=200,
               beta_range=(1.0, 10.0), box=(-3.0, 3.0), seed=0):
    """Worst ratio ``lip_hat(t) / h(t)`` over random softplus BLNN objectives.

    Returns ``(worst, records)`` with one record per objective.
    """
    rng = np.random.default_rng(seed)
    worst, records = 0.0, []
    for k in range(n_objectives):
        beta = float(rng.uniform(*beta_range))
        model = bm.make_blnn([dim] + [hidden] * layers + [1], 0.0, beta, seed=seed + k)
        obj = bm.strongly_convex_objective(model)
        X = rng.uniform(box[0], box[1], size=(n_points, dim))
        Y = iterate_trace(obj, X, lft.SolverConfig(kind="gd"), t_max)
        gamma = path_smoothness(obj, Y, seed=seed + k)
        h = lft.gd_lipschitz_bounds(t_max, obj.mu, gamma)
        lip, _ = _ratios_per_step(X, Y)
        ratio = float(np.max(lip[1:] / h[1:]))
        worst = max(worst, ratio)
        records.append({"objective": k, "beta": beta, "gamma_hat": gamma, "max_ratio_to_bound": ratio})
    return worst, records


def _visited_smoothness(obj, traces, seed):
    visited = [Y for Y in traces.values() if Y is not None]
    if not visited:
        raise RuntimeError("every solver diverged")
    return path_smoothness(obj, np.concatenate(visited, axis=1), seed=seed)


def lft_bench(p) -> ExperimentResult:
    beta = p["beta"]
    dims = [p["dim"]] + [p["hidden"]] * p["layers"] + [1]
    model = bm.make_blnn(dims, 0.0, beta, seed=p["seed"])
    obj = bm.strongly_convex_objective(model)
    X = np.random.default_rng(p["seed"]).uniform(p["box"][0], p["box"][1], size=(p["n_points"], p["dim"]))
    traces = {}
    # agd steps with 1/gamma, so it runs after the other kinds have mapped out the region
    order = sorted(p["kinds"], key=lambda k: k == "agd")
    gamma = None
    for kind in order:
        if kind == "agd":
            gamma = _visited_smoothness(obj, traces, p["seed"])
            obj.gamma = gamma
        cfg = lft.SolverConfig(kind=kind, eta=p["eta"].get(kind))
        try:
            traces[kind] = iterate_trace(obj, X, cfg, p["t_max"])
        except lft.LftDivergenceError:
            traces[kind] = None
    gamma = max(gamma or 0.0, _visited_smoothness(obj, traces, p["seed"]))
    h = lft.gd_lipschitz_bounds(p["t_max"], obj.mu, gamma)
    rows, metrics, checks = [], {"mu": obj.mu, "gamma_hat": gamma}, []
    for kind, Y in traces.items():
        if Y is None:
            metrics[f"{kind}_diverged"] = True
            continue
        lip, inv = _ratios_per_step(X, Y)
        for t in range(len(lip)):
            rows.append({"kind": kind, "t": t, "lip_hat": lip[t], "invlip_hat": inv[t],
                         "gd_bound": h[t], "residual": float(np.max(np.linalg.norm(X - obj.grad(Y[t]), axis=1)))})
        metrics[f"{kind}_final"] = {"lip_hat": lip[-1], "invlip_hat": inv[-1]}
        if kind == "gd":
            ratio = float(np.max(lip[1:] / h[1:]))
            checks.append(Check("gd_iterates_within_bound", ratio <= 1 + 1e-8, ratio, 1 + 1e-8))
        if kind == "newton":
            lo, hi = 1.0 / gamma, 1.0 / obj.mu
            ok = inv[-1] >= lo * (1 - p["window_slack"]) and lip[-1] <= hi * (1 + p["window_slack"])
            checks.append(Check("newton_limit_within_window", ok, [inv[-1], lip[-1]], [lo, hi]))
    return ExperimentResult(rows, metrics, checks)


def gd_certify(p) -> ExperimentResult:
    t0 = time.perf_counter()
    worst, rows = certify_gd(p["objectives"], p["dim"], p["hidden"], p["layers"], p["n_points"],
                             p["t_max"], tuple(p["beta_range"]), tuple(p["box"]), p["seed"])
    secs = time.perf_counter() - t0
    checks = [Check("gd_iterates_within_bound", worst <= 1 + 1e-8, worst, 1 + 1e-8),
              Check("runtime", secs <= p["time_limit"], secs, p["time_limit"])]
    return ExperimentResult(rows, {"worst_ratio": worst, "seconds": secs}, checks)


# ---------------------------------------------------------------------------
# annealing


def _anneal_job(job):
    kind, p = job
    seed = p["seed"]
    if kind == "blnn":
        model = tr.default_blnn(alpha=0.0, beta=p["start"], hidden=p["hidden"], layers=p["layers"],
                                seed=seed, input_gain=p["input_gain"])
    else:
        model = tr.make_sn_mlp(tuple(p["sn_dims"]), scale=p["start"], seed=seed)
    data = tr.make_exp_dataset(p["n_train"], seed=seed)
    cfg = tr.TrainConfig(epochs=p["epochs"], batch_size=p["batch_size"], lr=p["lr"], seed=seed,
                         estimate_samples=p["estimate_samples"], estimate_range=tuple(p["estimate_range"]))
    state = tr.AnnealState(p["start"], p["check_period"], p["closeness"], p["growth"])
    rep = tr.train_regression(model, data, cfg, anneal=state)
    return kind, rep.history


def anneal(p) -> ExperimentResult:
    rows, metrics, checks = [], {}, []
    for kind, history in _pool_map(_anneal_job, [(k, p) for k in p["models"]], p["threads"]):
        for r in history:
            rows.append({"model": kind, "epoch": r.epoch, "bound": r.bound, "lip_hat": r.lip_hat,
                         "invlip_hat": r.invlip_hat, "loss": r.loss})
        bounds = np.array([r.bound for r in history])
        metrics[f"{kind}_final_bound"] = float(bounds[-1])
        metrics[f"{kind}_final_loss"] = float(history[-1].loss)
        metrics[f"{kind}_increases"] = int(np.sum(np.diff(bounds) > 0))
        if kind == "blnn":
            target = p["target_slope"]
            period = p["check_period"]
            checks_seen, gap, worst_gap = 0, 0, 0
            for e in range(period, len(bounds), period):
                if bounds[e - 1] >= target:
                    break
                gap = 0 if bounds[e] > bounds[e - 1] else gap + 1
                worst_gap = max(worst_gap, gap)
                checks_seen += 1
            covered = bool(bounds.max() >= target)
            metrics["blnn_checks_without_increase"] = worst_gap
            checks.append(Check("blnn_bound_reaches_target_slope", covered, float(bounds.max()), target))
            checks.append(Check("blnn_increase_at_least_every_3_checks", worst_gap < 3, worst_gap, 3))
    return ExperimentResult(rows, metrics, checks)


# ---------------------------------------------------------------------------
# two moons


def _moons_job(job):
    alpha, beta, seed, p = job
    rep = duq.run_two_moons(alpha, beta, seed=seed, epochs=p["epochs"], sigma=p["sigma"],
                            gamma=p["gamma"], grid_size=p["grid_size"], n_train=p["n_train"],
                            n_test=p["n_test"], noise=p["noise"])
    grid = rep.grid.tolist() if rep.grid is not None else None
    return {"alpha": alpha, "beta": beta, "seed": seed, "accuracy": rep.accuracy, "auroc": rep.auroc,
            "final_loss": rep.history[-1], "seconds": rep.seconds}, grid


def two_moons(p) -> ExperimentResult:
    jobs = [(float(a), float(b), p["seed"] + s, p) for a, b in p["settings"] for s in range(p["seeds"])]
    out = _pool_map(_moons_job, jobs, p["threads"])
    rows = [r for r, _ in out]
    tables, metrics, checks = {}, {}, []
    for (r, grid) in out:
        if grid is not None and r["seed"] == p["seed"]:
            tables[f"grid_a{r['alpha']:g}_b{r['beta']:g}.csv"] = [
                {"x": g[0], "y": g[1], "certainty": g[2]} for g in grid]
    for a, b in p["settings"]:
        acc = np.array([r["accuracy"] for r in rows if r["alpha"] == a and r["beta"] == b])
        key = f"a{a:g}_b{b:g}"
        metrics[key] = {"accuracy_mean": float(acc.mean()), "accuracy_std": float(acc.std()),
                        "auroc_mean": float(np.mean([r["auroc"] for r in rows
                                                     if r["alpha"] == a and r["beta"] == b]))}
    for a, b, thr in p["min_accuracy"]:
        m = metrics[f"a{a:g}_b{b:g}"]["accuracy_mean"]
        checks.append(Check(f"accuracy_a{a:g}_b{b:g}_at_least", m >= thr, m, thr))
    for a, b, thr in p["max_accuracy"]:
        m = metrics[f"a{a:g}_b{b:g}"]["accuracy_mean"]
        checks.append(Check(f"accuracy_a{a:g}_b{b:g}_at_most", m <= thr, m, thr))
    if p["grid_size"]:
        checks.append(Check("certainty_grid_written", len(tables) > 0, len(tables), 1))
    return ExperimentResult(rows, metrics, checks, tables)


# ---------------------------------------------------------------------------
# gradient check and estimation


def _fd(f, x, h):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def gradcheck_one(dim, hidden, seed, h=1e-6):
    """Relative errors of implicit parameter and input gradients against central differences."""
    rng = np.random.default_rng(seed)
    alpha, beta = float(rng.uniform(0, 2)), float(rng.uniform(0.5, 5))
    model = bm.make_blnn([dim, hidden, hidden, 1], alpha, beta, seed=seed)
    solver = lft.SolverConfig(kind="newton", tol=1e-11, max_iters=200)
    x, c = rng.normal(size=dim), rng.normal(size=dim)
    _, res = bm.blnn_forward(model, x, solver)
    pg, gx = bm.blnn_backward(model, x, res.y_star, c, tol=solver.tol)
    theta = cn.flatten(model.core)

    def loss(t, xx):
        m = bm.Blnn(cn.unflatten(model.core, t), model.config)
        return float(c @ bm.blnn_forward(m, xx, solver)[0])

    e_p = _rel(cn.flatten(pg), _fd(lambda t: loss(t, x), theta, h))
    e_x = _rel(gx, _fd(lambda t: loss(theta, t), x, h))
    return {"seed": seed, "dim": dim, "hidden": hidden, "alpha": alpha, "beta": beta,
            "rel_err_params": e_p, "rel_err_input": e_x}


def gradcheck(p) -> ExperimentResult:
    rng = np.random.default_rng(p["seed"])
    rows = [gradcheck_one(int(rng.integers(1, p["max_dim"] + 1)), int(rng.integers(2, p["max_hidden"] + 1)),
                          p["seed"] + k) for k in range(p["nets"])]
    worst = max(max(r["rel_err_params"], r["rel_err_input"]) for r in rows)
    return ExperimentResult(rows, {"max_rel_err": worst},
                            [Check("max_relative_error", worst < p["max_rel_err"], worst, p["max_rel_err"])])


def estimate(p) -> ExperimentResult:
    if not p.get("model"):
        raise ValueError("estimate needs a model bundle path (model)")
    model, solver = bm.load_model(p["model"])
    lo, hi = p["domain"]
    e = estimate_bilip(lambda X: bm.blnn_forward(model, X, solver)[0], lo, hi, p["n_samples"],
                       p["seed"], p["min_sep"], dim=model.dim)
    cfg = model.config
    checks = [Check("lip_within_upper_bound", e.lip_hat <= cfg.upper + p["bound_tol"], e.lip_hat, cfg.upper),
              Check("invlip_within_lower_bound", e.invlip_hat >= cfg.lower - p["bound_tol"],
                    e.invlip_hat, cfg.lower)]
    return ExperimentResult([e.to_dict()], {"estimate": e.to_dict(), "lower": cfg.lower,
                                            "upper": cfg.upper}, checks,
                            documents={"estimate.json": e.to_dict()})


# ---------------------------------------------------------------------------
# registry

DEFAULTS = {
    "tightness": dict(FIT_DEFAULTS, L=[5, 10, 50], seeds=5, models=["blnn"], min_tightness=98.0,
                      sn_check_L=50, sn_max_tightness=50.0, time_limit=300.0),
    "flexibility": dict(FIT_DEFAULTS, L=1000.0, slope=1.0, alpha=0.0, models=["blnn", "sn"],
                        loss_threshold=0.5, blnn_max_mse=1e-3, sn_min_mse=1e-2),
    "summary-sweep": dict(FIT_DEFAULTS, L=[25, 35, 45, 50, 55, 75, 100], slope=50.0,
                          models=["blnn", "sn"], loss_threshold=0.5, fit_L=[55, 75, 100],
                          fit_max_loss=0.05, increasing_L=[55, 45, 35, 25], sn_check_L=50),
    "init-dist": dict(alpha=4.0, beta=60.0, trials=100, dim=2, hidden=10, layers=3, n_points=200,
                      box=[-1.0, 1.0], compare_uniform=[1.0, 1.1], min_fraction=0.8, bound_tol=1e-3),
    "lft-bench": dict(kinds=list(lft.KINDS), beta=10.0, dim=2, hidden=10, layers=2, n_points=500,
                      box=[-1.0, 9.0], t_max=200, eta={},
                      window_slack=0.02),
    "gd-certify": dict(objectives=20, dim=2, hidden=10, layers=2, n_points=100, t_max=200,
                       beta_range=[1.0, 10.0], box=[-3.0, 3.0], time_limit=60.0),
    "anneal": dict(FIT_DEFAULTS, models=["blnn", "sn"], start=2.0, epochs=200, lr=0.01, check_period=5,
                   closeness=0.05, growth=1.5, estimate_range=[-1.0, 1.0], target_slope=float(np.e)),
    "two-moons": dict(settings=[[2.0, 4.0], [5.0, 3.0]], seeds=3, epochs=30, sigma=0.25, gamma=0.999,
                      grid_size=200, n_train=1500, n_test=200, noise=0.1,
                      min_accuracy=[[2.0, 4.0, 0.98]], max_accuracy=[[5.0, 3.0, 0.6]]),
    "gradcheck": dict(nets=10, max_dim=2, max_hidden=5, max_rel_err=1e-4),
    "estimate": dict(model=None, domain=[-1.0, 1.0], n_samples=1000, min_sep=1e-6, bound_tol=1e-4),
}

RUNNERS: dict = {
    "tightness": tightness,
    "flexibility": flexibility,
    "summary-sweep": summary_sweep,
    "init-dist": init_dist,
    "lft-bench": lft_bench,
    "gd-certify": gd_certify,
    "anneal": anneal,
    "two-moons": two_moons,
    "gradcheck": gradcheck,
    "estimate": estimate,
}


def resolve(command, overrides=None, seed=0, threads=1) -> dict:
    """Defaults for ``command`` updated with ``overrides``; unknown keys are rejected."""
    p = dict(DEFAULTS[command])
    for k, v in (overrides or {}).items():
        if k not in p:
            raise KeyError(f"{command}: unknown parameter {k!r}")
        p[k] = v
    p["seed"] = seed
    p["threads"] = threads
    return p


def run(command, params) -> ExperimentResult:
    return RUNNERS[command](params)
