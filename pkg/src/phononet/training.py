"""Single-layer training: BFGS over (geometry, theta) through the surrogate, restarts, evaluation."""

from __future__ import annotations

import csv
import io as _io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logit

from .adjoint import loss_and_gradient
from .audio import PreparedSplit
from .errors import BlowupError, ContractError, DegeneracyError, DomainError, TrainingFailure
from .model import Geometry, PhysicsConfig, oracle_effective_model, oracle_jacobian, random_geometry
from .optim import BFGS
from .plots import HIST_BINS, histogram_edges
from .simulator import DEFAULT_DT, LinearDynamics, simulate_batch
from . import surrogate as sg

log = logging.getLogger(__name__)

REPORT_VERSION = 1


# ---------------------------------------------------------------- thresholds


def fit_threshold(E, y):
    """Threshold on log-energy maximizing training accuracy.

    Candidates are the midpoints of the sorted distinct log-energies plus one
    point below and one above the range. Both polarities are tried; ties go
    to the lowest threshold, then to the normal polarity. Returns
    ``(theta, polarity, accuracy)``.
    """
    E = np.asarray(E, float)
    y = np.asarray(y)
    if not ((y == 1).any() and (y == -1).any()):
        raise ContractError("threshold fitting needs both classes")
    logE = np.log(np.where(E > 0, E, np.finfo(float).tiny))
    u = np.unique(logE)
    cands = np.concatenate([[u[0] - 1.0], 0.5 * (u[1:] + u[:-1]), [u[-1] + 1.0]])
    best = (-1.0, 0.0, 1)
    for th in cands:
        for pol in (1, -1):
            pred = np.where(pol * (logE - th) > 0, 1, -1)
            acc = float(np.mean(pred == y))
            if acc > best[0]:
                best = (acc, float(th), pol)
    acc, th, pol = best
    return th, pol, acc


@dataclass
class EvalResult:
    energies: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    accuracy: float
    confusion: dict
    hist_edges: np.ndarray
    hist_counts: dict

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion,
            "energies": self.energies.tolist(),
            "labels": self.labels.tolist(),
            "predictions": self.predictions.tolist(),
            "hist_edges": self.hist_edges.tolist(),
            "hist_counts": {k: v.tolist() for k, v in self.hist_counts.items()},
        }


def histogram(E, y, bins=HIST_BINS, edges=None):
    """Per-class counts over ``bins`` log-spaced bins spanning the energies."""
    E = np.asarray(E, float)
    edges = histogram_edges(E, bins) if edges is None else np.asarray(edges)
    counts = {str(c): np.histogram(E[(np.asarray(y) == c) & (E > 0)], edges)[0] for c in (1, -1)}
    return edges, counts


def evaluate(energy_fn, split: PreparedSplit, theta, polarity=1) -> EvalResult:
    """Energies, threshold predictions, accuracy and confusion counts for one split.

    ``energy_fn`` maps a forcing matrix to energies, or is an EffectiveModel.
    """
    if len(split) == 0:
        raise ContractError("empty split")
    if hasattr(energy_fn, "K"):
        model = energy_fn
        energy_fn = lambda F: simulate_batch(LinearDynamics(model), F, DEFAULT_DT, F.shape[1])[0]  # noqa: E731
    E = np.asarray(energy_fn(split.forcings), float)
    return evaluate_energies(E, split.labels, theta, polarity)


def evaluate_energies(E, y, theta, polarity=1) -> EvalResult:
    E = np.asarray(E, float)
    y = np.asarray(y)
    if E.size == 0:
        raise ContractError("empty split")
    logE = np.log(np.where(E > 0, E, np.finfo(float).tiny))
    pred = np.where(polarity * (logE - theta) > 0, 1, -1)
    conf = {
        "tp": int(((pred == 1) & (y == 1)).sum()),
        "fp": int(((pred == 1) & (y == -1)).sum()),
        "tn": int(((pred == -1) & (y == -1)).sum()),
        "fn": int(((pred == -1) & (y == 1)).sum()),
    }
    edges, counts = histogram(E, y)
    return EvalResult(E, y.astype(int), pred, float(np.mean(pred == y)), conf, edges, counts)


# ---------------------------------------------------------------- objective


@dataclass
class TrainConfig:
    iterations: int = 300
    restarts: int = 15
    correction_period: int = 30
    correction_ramp: int = 5
    corrections: bool = True
    loss_scale: float = 1.0
    bounds: tuple = (0.0, 1.0)
    seed: int = 0
    shape: tuple = (3, 3)
    n_steps: int | None = None
    dt: float = DEFAULT_DT
    model_source: str = "surrogate"
    n_jobs: int = 1

    def __post_init__(self):
        if self.iterations < 1 or self.restarts < 1:
            raise ContractError("iterations and restarts must be >= 1")
        lo, hi = self.bounds
        if not 0.0 <= lo < hi <= 1.0:
            raise ContractError("geometry bounds must satisfy 0 <= lo < hi <= 1")
        if self.model_source not in ("surrogate", "oracle"):
            raise ContractError("model_source must be 'surrogate' or 'oracle'")
        self.shape = tuple(int(s) for s in self.shape)
        self.bounds = (float(lo), float(hi))


def to_geometry(u, shape, bounds):
    lo, hi = bounds
    return Geometry.from_vector(lo + (hi - lo) * expit(u), shape)


def from_geometry(g: Geometry, bounds):
    lo, hi = bounds
    q = np.clip((g.to_vector() - lo) / (hi - lo), 1e-6, 1 - 1e-6)
    return logit(q)


def chain_geometry(gv, dK, dM, damping_rate):
    """Loss gradient w.r.t. geometry from effective-model gradients and matrix Jacobians.

    ``gv.dK`` follows the pair convention, so only the upper triangle of each
    Jacobian slice is contracted.
    """
    iu = np.triu_indices(gv.dK.shape[0])
    return dK[:, iu[0], iu[1]] @ gv.dK[iu] + dM @ gv.tied_mass(damping_rate)


class Objective:
    """Loss and gradient over ``x = [u (logistic geometry), theta]``."""

    def __init__(self, split: PreparedSplit, cfg: TrainConfig, physics: PhysicsConfig, surrogate=None, correction=None):
        self.F = split.forcings
        self.y = split.labels
        self.cfg = cfg
        self.physics = physics
        self.surrogate = surrogate
        self.correction = correction
        self.n_steps = cfg.n_steps or self.F.shape[1]
        self.last = None

    def model_and_jacobian(self, g):
        if self.cfg.model_source == "oracle" or self.surrogate is None:
            m = oracle_effective_model(g, self.physics)
            dK, dM = oracle_jacobian(g, self.physics)
            return m, dK, dM, self.physics.damping_rate
        m = sg.predict(self.surrogate, g, self.correction)
        dK, dM = sg.jacobian(self.surrogate, g)
        return m, dK, dM, self.surrogate.damping_rate

    def __call__(self, x):
        u, theta = x[:-1], x[-1]
        g = to_geometry(u, self.cfg.shape, self.cfg.bounds)
        try:
            m, dK, dM, beta = self.model_and_jacobian(g)
            L, E, gv = loss_and_gradient(m, self.F, self.y, theta, self.n_steps, self.cfg.dt, scale=self.cfg.loss_scale)
        except (BlowupError, DegeneracyError, DomainError):
            return math.inf, np.full_like(x, np.nan)
        lo, hi = self.cfg.bounds
        s = expit(u)
        gu = chain_geometry(gv, dK, dM, beta) * (hi - lo) * s * (1 - s)
        self.last = (x.copy(), E)
        return L, np.append(gu, gv.dtheta)

    def energies(self, x):
        if self.last is not None and np.array_equal(self.last[0], x):
            return self.last[1]
        self(x)
        return self.last[1]


# ---------------------------------------------------------------- restarts


@dataclass
class RestartResult:
    index: int
    seed: list
    losses: list
    train_error: list
    geometry: Geometry | None = None
    theta: float = float("nan")
    corrections: int = 0
    failed: str | None = None
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    theta_refit: float = float("nan")
    polarity: int = 1
    train_eval: EvalResult | None = None
    test_eval: EvalResult | None = None

    def summary(self):
        return {
            "index": self.index,
            "seed": self.seed,
            "failed": self.failed,
            "iterations": len(self.losses) - 1,
            "corrections": self.corrections,
            "final_loss": self.losses[-1] if self.losses else None,
            "theta": self.theta,
            "theta_refit": self.theta_refit,
            "polarity": self.polarity,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
        }


def restart_seed(seed, index):
    return [int(seed), int(index)]


def _initial_point(cfg, split, physics, index, objective):
    ss = np.random.SeedSequence(restart_seed(cfg.seed, index))
    g0 = random_geometry(*cfg.shape, seed=np.random.default_rng(ss))
    u0 = from_geometry(g0, cfg.bounds)
    x = np.append(u0, 0.0)
    E = objective.energies(x)
    ok = E > 0
    theta0 = float(np.median(np.log(E[ok]))) if ok.any() else 0.0
    return np.append(u0, theta0)


def run_restart(index, cfg: TrainConfig, train: PreparedSplit, physics: PhysicsConfig, surrogate=None) -> RestartResult:
    """One BFGS run from a seeded random geometry, with the oracle-correction schedule."""
    obj = Objective(train, cfg, physics, surrogate)
    res = RestartResult(index, restart_seed(cfg.seed, index), [], [])
    x0 = _initial_point(cfg, train, physics, index, obj)
    opt = BFGS(obj, x0)
    if not math.isfinite(opt.f):
        res.failed = "non-finite loss at the initial design"
        return res

    def record():
        E = obj.energies(opt.x)
        pred = evaluate_energies(E, train.labels, opt.x[-1]).accuracy
        res.losses.append(float(opt.f))
        res.train_error.append(1.0 - pred)

    record()
    use_corr = cfg.corrections and surrogate is not None and cfg.model_source == "surrogate"
    oracle = lambda g: oracle_effective_model(g, physics)  # noqa: E731
    for it in range(1, cfg.iterations + 1):
        if not opt.step():
            break
        if use_corr and it % cfg.correction_period == 0 and it < cfg.iterations:
            g = to_geometry(opt.x[:-1], cfg.shape, cfg.bounds)
            obj.correction = sg.apply_correction(obj.correction, g, oracle, surrogate, cfg.correction_period, cfg.correction_ramp)
            res.corrections += 1
            opt.reset_objective(obj)
            if not math.isfinite(opt.f):
                res.failed = f"non-finite loss after correction at iteration {it}"
                break
        record()
    res.geometry = to_geometry(opt.x[:-1], cfg.shape, cfg.bounds)
    res.theta = float(opt.x[-1])
    return res


def _finalize(res: RestartResult, train, test, physics, cfg):
    """Recompute metrics with the oracle model; threshold re-fit on the training energies."""
    if res.failed or res.geometry is None:
        return res
    m = oracle_effective_model(res.geometry, physics)
    dyn = LinearDynamics(m)
    n = cfg.n_steps or train.forcings.shape[1]
    try:
        Etr = simulate_batch(dyn, train.forcings, cfg.dt, n)[0]
        Ete = simulate_batch(dyn, test.forcings, cfg.dt, cfg.n_steps or test.forcings.shape[1])[0] if len(test) else np.zeros(0)
    except BlowupError as e:
        res.failed = str(e)
        return res
    res.theta_refit, res.polarity, _ = fit_threshold(Etr, train.labels)
    res.train_eval = evaluate_energies(Etr, train.labels, res.theta_refit, res.polarity)
    res.train_accuracy = res.train_eval.accuracy
    if len(test):
        res.test_eval = evaluate_energies(Ete, test.labels, res.theta_refit, res.polarity)
        res.test_accuracy = res.test_eval.accuracy
    return res


def _restart_job(args):
    index, cfg, train, test, physics, surrogate = args
    try:
        res = run_restart(index, cfg, train, physics, surrogate)
    except (BlowupError, DegeneracyError, DomainError) as e:
        res = RestartResult(index, restart_seed(cfg.seed, index), [], [], failed=str(e))
    return _finalize(res, train, test, physics, cfg)


@dataclass
class TrainReport:
    config: dict
    restarts: list
    best: int
    geometry: Geometry
    theta: float
    theta_refit: float
    polarity: int
    train: EvalResult
    test: EvalResult | None
    history: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def train_accuracy(self):
        return self.train.accuracy

    @property
    def test_accuracy(self):
        return float("nan") if self.test is None else self.test.accuracy

    def to_dict(self):
        return {
            "version": REPORT_VERSION,
            "config": self.config,
            "best_restart": self.best,
            "geometry": self.geometry.to_dict(),
            "theta": self.theta,
            "theta_refit": self.theta_refit,
            "polarity": self.polarity,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": None if self.test is None else self.test_accuracy,
            "history": self.history,
            "restarts": self.restarts,
            "train": self.train.to_dict(),
            "test": None if self.test is None else self.test.to_dict(),
            "meta": self.meta,
        }


def train_single_layer(cfg: TrainConfig, train: PreparedSplit, test: PreparedSplit, surrogate=None, physics: PhysicsConfig = PhysicsConfig()) -> TrainReport:
    """Multi-restart BFGS training; the restart with the best oracle training accuracy wins."""
    if cfg.model_source == "surrogate":
        if surrogate is None:
            raise ContractError("surrogate training requires a fitted surrogate")
        if tuple(surrogate.shape) != cfg.shape:
            raise ContractError(f"surrogate shape {surrogate.shape} does not match {cfg.shape}")
    jobs = [(i, cfg, train, test, physics, surrogate) for i in range(cfg.restarts)]
    if cfg.n_jobs > 1 and cfg.restarts > 1:
        with ProcessPoolExecutor(cfg.n_jobs) as ex:
            results = list(ex.map(_restart_job, jobs))
    else:
        results = [_restart_job(j) for j in jobs]
    ok = [r for r in results if not r.failed]
    if not ok:
        raise TrainingFailure("all restarts failed: " + "; ".join(f"#{r.index}: {r.failed}" for r in results))
    # max() keeps the first maximal element, so ties go to the lowest index
    best = max(ok, key=lambda r: r.train_accuracy)
    for r in results:
        log.info("restart %d: train %.3f test %.3f %s", r.index, r.train_accuracy, r.test_accuracy, r.failed or "")
    cdict = asdict(cfg)
    cdict["shape"] = list(cfg.shape)
    cdict["bounds"] = list(cfg.bounds)
    return TrainReport(
        config=cdict,
        restarts=[r.summary() for r in results],
        best=best.index,
        geometry=best.geometry,
        theta=best.theta,
        theta_refit=best.theta_refit,
        polarity=best.polarity,
        train=best.train_eval,
        test=best.test_eval,
        history={"loss": best.losses, "train_error": best.train_error},
    )


# ---------------------------------------------------------------- size study


def surrogate_for(shape, n_train, seed, physics):
    rng = np.random.default_rng(seed)
    data = [(g, oracle_effective_model(g, physics)) for g in (random_geometry(*shape, seed=rng) for _ in range(n_train))]
    return sg.fit(data, shape)


def size_study(cfg: TrainConfig, sizes, train, test, physics=PhysicsConfig(), n_surrogate=None):
    """Best-of-``cfg.restarts`` accuracy per lattice size, without oracle corrections.

    Returns ``(rows, csv_text)``; each row is ``{size, train_accuracy, test_accuracy}``.
    """
    rows = []
    for shape in sizes:
        shape = tuple(shape)
        if min(shape) < 2:
            raise ContractError("size study needs lattices of at least 2x2")
        c = TrainConfig(**{**asdict(cfg), "shape": shape, "corrections": False})
        s = None
        if c.model_source == "surrogate":
            k = max(len(sg.relevant_params(shape, e)) for e in sg.structural_elements(shape)[0])
            s = surrogate_for(shape, n_surrogate or 2 * sg.n_features(k) + 50, cfg.seed, physics)
        rep = train_single_layer(c, train, test, s, physics)
        rows.append({"size": f"{shape[0]}x{shape[1]}", "train_accuracy": rep.train_accuracy, "test_accuracy": rep.test_accuracy})
    buf = _io.StringIO()
    w = csv.DictWriter(buf, ["size", "train_accuracy", "test_accuracy"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return rows, buf.getvalue()
