"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or usage, 2 missing inputs,
3 numeric failure (blowup, singular system, all restarts diverged),
4 other data or contract errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .errors import (
    BlowupError,
    ConfigError,
    DegeneracyError,
    MissingInputError,
    PhononetError,
    SingularityError,
    TrainingFailure,
)
from .io import atomic_write_text, dumps, read_json, write_json

THREADS_ENV = "PHONONET_THREADS"
EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_DATA = 1, 2, 3, 4

log = logging.getLogger("phononet")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; usage errors here count as configuration errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _shape(text):
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 3x3, got {text!r}") from None
    if r < 1 or c < 1:
        raise argparse.ArgumentTypeError("shape entries must be positive")
    return r, c


def _floats(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a configuration value")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--threads", type=int, help=f"worker processes (default: ${THREADS_ENV} or training.threads)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="phononet", description="Differentiable phononic lattice classifier.")
    p.add_argument("--version", action="version", version=f"phononet {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="dataset preparation").add_subparsers(dest="action", required=True, parser_class=_Parser)
    ds.add_parser("prepare", parents=[common], help="generate or load samples and write grid-rate splits")

    su = sub.add_parser("surrogate", help="surrogate generation and fitting").add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = su.add_parser("gen", parents=[common], help="sample random lattices through the oracle")
    g.add_argument("--shape", type=_shape)
    g.add_argument("--count", type=int)
    f = su.add_parser("fit", parents=[common], help="fit per-element quadratic models")
    f.add_argument("--data", help="lattice samples JSON (default: <out>/lattices.json)")

    t = sub.add_parser("train", parents=[common], help="train a single-layer or deep network")
    t.add_argument("--deep", action="store_true", help="train the two-lattice network with the nonlinear element")
    t.add_argument("--no-figures", action="store_true", help="write plot CSVs only")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", help="checkpoint JSON (default: <out>/checkpoint.json)")

    gc = sub.add_parser("gradcheck", parents=[common], help="adjoint vs finite-difference gradients")
    gc.add_argument("--shape", type=_shape, default=(3, 3))
    gc.add_argument("--steps", type=int, default=2000)
    gc.add_argument("--seed", type=int, default=1)

    rd = sub.add_parser("reduce", help="model reduction").add_subparsers(dest="action", required=True, parser_class=_Parser)
    b = rd.add_parser("bench", parents=[common], help="Rubin vs Craig-Bampton on a free grid")
    b.add_argument("--nx", type=int, default=40)
    b.add_argument("--ny", type=int, default=40)
    b.add_argument("--modes", type=int, default=20)
    b.add_argument("--compare", type=int, default=10)

    bd = sub.add_parser("bands", help="band-structure tools").add_subparsers(dest="action", required=True, parser_class=_Parser)
    m = bd.add_parser("misfit", parents=[common], help="band misfit from three sampled bands (kHz)")
    for k in ("--f7", "--f8", "--f9"):
        m.add_argument(k, type=_floats, required=True)

    ss = sub.add_parser("size-study", parents=[common], help="accuracy against lattice size")
    ss.add_argument("--sizes", default="2x2,3x3,4x4")

    sm = sub.add_parser("simulate", parents=[common], help="simulate one lattice under a windowed tone")
    sm.add_argument("--shape", type=_shape)
    sm.add_argument("--geometry", help="geometry CSV (default: random)")
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--steps", type=int, default=3202)
    sm.add_argument("--freq", type=float, default=68.5e3)
    return p


# ---------------------------------------------------------------- context


class Run:
    """Resolved configuration, output directory and JSON-lines run log."""

    def __init__(self, args):
        self.args = args
        cfg = cfgmod.load(_require(args.config)) if getattr(args, "config", None) else cfgmod.RunConfig()
        for item in getattr(args, "set", []):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            cfgmod.override(cfg, key.strip(), value.strip())
        if getattr(args, "out", None):
            cfg.output.dir = args.out
        threads = getattr(args, "threads", None)
        if threads is None and os.environ.get(THREADS_ENV):
            try:
                threads = int(os.environ[THREADS_ENV])
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be an integer") from None
        if threads is not None:
            if threads < 1:
                raise ConfigError("thread count must be >= 1")
            cfg.training.threads = threads
        self.cfg = cfg
        self.out = Path(cfg.output.dir)
        self.t0 = time.time()

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.out / p

    def physics(self):
        from .model import PhysicsConfig

        p = self.cfg.physics
        return PhysicsConfig(f0=p.f0, Q=p.Q, input_mask=p.input_mask, output_site=p.output_site)

    def event(self, kind, **fields):
        rec = {"event": kind, "time": round(time.time() - self.t0, 3), **fields}
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "run.log.jsonl", "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")

    def start(self, command):
        self.event(
            "start",
            command=command,
            args={k: v for k, v in sorted(vars(self.args).items())},
            seed={"dataset": self.cfg.dataset.seed, "surrogate": self.cfg.surrogate.seed, "training": self.cfg.training.seed},
            config_hash=self.cfg.hash(),
            threads=self.cfg.training.threads,
            versions=versions(),
        )


def versions():
    import scipy

    return {"phononet": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"missing input: {p}")
    return p


def _emit(obj):
    sys.stdout.write(dumps(obj))


# ---------------------------------------------------------------- datasets


def _split_paths(run):
    base = run.path(run.cfg.dataset.cache)
    return base / "train", base / "test"


def _n_steps(d):
    from .simulator import DEFAULT_DT

    return int(round((d.duration_s + d.tail_s) / DEFAULT_DT))


def cmd_dataset_prepare(run):
    from .audio import DatasetManifest, PreparedSplit, SpeechPipeline, SynthConfig, load_wav, prepare_synthetic, save_split, synth_dataset

    d = run.cfg.dataset
    stem_tr, stem_te = _split_paths(run)
    if d.kind == "speech":
        mpath = _require(d.manifest)
        manifest = DatasetManifest.from_text(mpath.read_text())
        pipe = SpeechPipeline()
        splits = {}
        for name in ("train", "test"):
            entries = manifest.split(name)
            rows = []
            for e in entries:
                src = Path(e.source)
                src = src if src.is_absolute() else mpath.parent / src
                rows.append(pipe(load_wav(_require(src), e.label, e.id)))
            length = max(len(r) for r in rows)
            F = np.zeros((len(rows), length))
            for i, r in enumerate(rows):
                F[i, : len(r)] = r
            splits[name] = PreparedSplit(F, np.array([e.label for e in entries]), [e.id for e in entries], 1.0 / pipe.dt)
        train, test = splits["train"], splits["test"]
    else:
        sc = SynthConfig(duration_s=d.duration_s, snr_db=d.snr_db, test_fraction=d.test_fraction)
        manifest, samples = synth_dataset(d.kind, d.n_per_class, d.seed, sc)
        n = _n_steps(d)
        train = prepare_synthetic(samples, {e.id for e in manifest.split("train")}, n_steps=n)
        test = prepare_synthetic(samples, {e.id for e in manifest.split("test")}, n_steps=n)
    save_split(stem_tr, train)
    save_split(stem_te, test)
    atomic_write_text(stem_tr.parent / "manifest.csv", manifest.to_text())
    summary = {"train": len(train), "test": len(test), "n_steps": int(train.forcings.shape[1]), "dir": str(stem_tr.parent)}
    run.event("artifact", path=str(stem_tr.parent), **summary)
    _emit(summary)


def _load_splits(run):
    from .audio import load_split

    stems = _split_paths(run)
    for s in stems:
        _require(s.with_suffix(".json"))
        _require(s.with_suffix(".f64"))
    return load_split(stems[0]), load_split(stems[1])


# ---------------------------------------------------------------- surrogate


def cmd_surrogate_gen(run):
    from .model import oracle_effective_model, random_geometry

    shape = run.args.shape or tuple(run.cfg.training.shape)
    count = run.args.count or run.cfg.surrogate.n_train
    if count < 1:
        raise ConfigError("--count must be >= 1")
    rng = np.random.default_rng(run.cfg.surrogate.seed)
    phys = run.physics()
    samples = []
    for _ in range(count):
        g = random_geometry(*shape, seed=rng)
        m = oracle_effective_model(g, phys)
        samples.append({"geometry": g.to_dict(), "K": m.K, "M": m.M, "B": m.B, "w_in": m.w_in, "i_out": m.i_out})
    path = write_json(run.path("lattices.json"), {"shape": list(shape), "seed": run.cfg.surrogate.seed, "samples": samples})
    run.event("artifact", path=str(path), count=count)
    _emit({"path": str(path), "count": count, "shape": list(shape)})


def cmd_surrogate_fit(run):
    from . import surrogate as sg
    from .model import EffectiveModel, Geometry

    data = read_json(_require(run.args.data or run.path("lattices.json")))
    shape = tuple(data["shape"])
    train = [
        (Geometry.from_dict(s["geometry"]), EffectiveModel(np.array(s["M"]), np.array(s["K"]), np.array(s["B"]), np.array(s["w_in"]), s["i_out"], shape))
        for s in data["samples"]
    ]
    s = sg.fit(train, shape, run.cfg.surrogate.ridge)
    path = write_json(run.path(run.cfg.surrogate.path), s.to_dict())
    run.event("artifact", path=str(path))
    _emit({"path": str(path), "n_train": len(train), "shape": list(shape), "train_residual": sg.frobenius_residual(s, train)})


def _load_surrogate(run):
    from .surrogate import SurrogateModel

    return SurrogateModel.from_dict(read_json(_require(run.path(run.cfg.surrogate.path))))


# ---------------------------------------------------------------- training


def _train_config(run):
    from .training import TrainConfig

    t = run.cfg.training
    return TrainConfig(
        iterations=t.iterations,
        restarts=t.restarts,
        correction_period=t.correction_period,
        correction_ramp=t.correction_ramp,
        corrections=t.corrections,
        loss_scale=t.loss_scale,
        bounds=tuple(t.bounds),
        seed=t.seed,
        shape=tuple(t.shape),
        model_source=t.model_source,
        n_jobs=t.threads,
    )


def _deep_config(run):
    from .nonlinear import DeepConfig

    d, t = run.cfg.deep, run.cfg.training
    return DeepConfig(
        shape=tuple(t.shape), f_s1=d.f_s1, f_s2=d.f_s2, f_c=d.f_c, Q_s=d.Q_s, Q_c=d.Q_c, gamma_shift=d.gamma_shift,
        bounds=tuple(t.bounds), iterations=d.iterations, restarts=d.restarts, seed=t.seed, loss_scale=t.loss_scale, step=d.step,
    )


def cmd_train(run):
    from .model import oracle_effective_model
    from .plots import emit_plots

    deep = run.args.deep or run.cfg.deep.enabled
    train, test = _load_splits(run)
    phys = run.physics()
    tcfg = _train_config(run)
    surrogate = _load_surrogate(run) if (not deep and tcfg.model_source == "surrogate") else None
    run.out.mkdir(parents=True, exist_ok=True)
    if deep:
        report, ckpt, model = _train_deep(run, train, test, phys)
    else:
        from .training import train_single_layer

        rep = train_single_layer(tcfg, train, test, surrogate, phys)
        report = rep.to_dict()
        model = oracle_effective_model(rep.geometry, phys)
        ckpt = {
            "version": 1,
            "kind": "single",
            "shape": list(tcfg.shape),
            "geometry": rep.geometry.to_dict(),
            "theta": rep.theta_refit,
            "polarity": rep.polarity,
            "surrogate_ref": None if surrogate is None else str(run.path(run.cfg.surrogate.path)),
            "metrics": {"train_accuracy": rep.train_accuracy, "test_accuracy": rep.test_accuracy},
        }
    paths = [write_json(run.path("report.json"), report), write_json(run.path("checkpoint.json"), ckpt)]
    paths += emit_plots(report, run.out, model, figures=not run.args.no_figures)
    for p in paths:
        run.event("artifact", path=str(p))
    _emit({"train_accuracy": report["train_accuracy"], "test_accuracy": report["test_accuracy"], "report": str(paths[0])})


def _train_deep(run, train, test, phys):
    from .nonlinear import deep_forward, train_deep
    from .training import evaluate_energies

    dcfg = _deep_config(run)
    rep = train_deep(dcfg, train, test, phys)
    Etr = deep_forward(rep.network, train.forcings).energy
    Ete = deep_forward(rep.network, test.forcings).energy
    report = rep.to_dict()
    report["version"] = 1
    report["config"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(dcfg).items()}
    report["history"] = {"loss": rep.losses, "train_error": [1 - a for a in rep.accuracies]}
    report["train"] = evaluate_energies(Etr, train.labels, rep.theta_refit, rep.polarity).to_dict()
    report["test"] = evaluate_energies(Ete, test.labels, rep.theta_refit, rep.polarity).to_dict()
    ckpt = {
        "version": 1,
        "kind": "deep",
        "shape": list(dcfg.shape),
        "network": rep.network.to_dict(),
        "theta": rep.theta_refit,
        "polarity": rep.polarity,
        "surrogate_ref": None,
        "metrics": {"train_accuracy": rep.train_accuracy, "test_accuracy": rep.test_accuracy},
    }
    return report, ckpt, None


def cmd_eval(run):
    from .model import Geometry, oracle_effective_model
    from .plots import histogram_csv, histogram_edges
    from .simulator import energies
    from .training import evaluate_energies

    ck = read_json(_require(run.args.checkpoint or run.path("checkpoint.json")))
    _, test = _load_splits(run)
    if ck.get("kind") == "deep":
        from .nonlinear import DeepNetwork, deep_forward

        E = deep_forward(DeepNetwork.from_dict(ck["network"]), test.forcings).energy
    else:
        E = energies(oracle_effective_model(Geometry.from_dict(ck["geometry"]), run.physics()), test.forcings)
    res = evaluate_energies(E, test.labels, ck["theta"], ck["polarity"])
    paths = [write_json(run.path("eval.json"), res.to_dict()), atomic_write_text(run.path("hist_eval.csv"), histogram_csv(E, test.labels, histogram_edges(E)))]
    for p in paths:
        run.event("artifact", path=str(p))
    _emit({"accuracy": res.accuracy, "confusion": res.confusion, "n": len(test)})


# ---------------------------------------------------------------- diagnostics


def cmd_gradcheck(run):
    from .adjoint import gradcheck, gradcheck_problem

    a = run.args
    if a.steps < 1:
        raise ConfigError("--steps must be >= 1")
    t0 = time.time()
    model, F, y, theta = gradcheck_problem(a.shape, a.steps, a.seed, run.physics())
    rows = gradcheck(model, F, y, theta, a.steps)
    result = {
        "shape": list(a.shape),
        "steps": a.steps,
        "max_rel_err": max(r["rel_err"] for r in rows),
        "runtime_s": round(time.time() - t0, 3),
        "rows": rows,
    }
    path = write_json(run.path("gradcheck.json"), result)
    run.event("artifact", path=str(path), max_rel_err=result["max_rel_err"])
    _emit(result)


def cmd_reduce_bench(run):
    from .reduction import substructure_benchmark

    a = run.args
    rows, text = substructure_benchmark(a.nx, a.ny, a.modes, a.compare)
    path = atomic_write_text(run.path("substructure_bench.csv"), text)
    run.event("artifact", path=str(path))
    sys.stdout.write(text)


def cmd_bands_misfit(run):
    from .reduction import band_misfit

    a = run.args
    G, dw, w0, N = band_misfit(a.f7, a.f8, a.f9)
    result = {"G": G, "dw": dw, "w0": w0, "N": N}
    path = write_json(run.path("misfit.json"), result)
    run.event("artifact", path=str(path))
    _emit(result)


def cmd_size_study(run):
    from .training import size_study

    sizes = [_shape(s) for s in run.args.sizes.split(",") if s]
    train, test = _load_splits(run)
    rows, text = size_study(_train_config(run), sizes, train, test, run.physics(), run.cfg.surrogate.n_train)
    path = atomic_write_text(run.path("size_study.csv"), text)
    run.event("artifact", path=str(path))
    sys.stdout.write(text)


def cmd_simulate(run):
    from .model import Geometry, oracle_effective_model, random_geometry
    from .plots import transfer_csv
    from .simulator import DEFAULT_DT, SimConfig, simulate

    a = run.args
    if a.steps < 1:
        raise ConfigError("--steps must be >= 1")
    if a.geometry:
        g = Geometry.from_csv(_require(a.geometry).read_text())
    else:
        g = random_geometry(*(a.shape or tuple(run.cfg.training.shape)), seed=a.seed)
    model = oracle_effective_model(g, run.physics())
    t = np.arange(a.steps + 1) * DEFAULT_DT
    F = np.sin(2 * np.pi * a.freq * t) * np.exp(-0.5 * ((t - t.mean()) / (np.ptp(t) / 6 or 1.0)) ** 2)
    traj = simulate(model, F, SimConfig(n_steps=a.steps))
    paths = [
        atomic_write_text(run.path("simulate/trajectory.csv"), traj.to_csv()),
        atomic_write_text(run.path("simulate/transfer.csv"), transfer_csv(model, np.linspace(55e3, 80e3, 501))),
        atomic_write_text(run.path("simulate/geometry.csv"), g.to_csv()),
    ]
    for p in paths:
        run.event("artifact", path=str(p))
    _emit({"energy_out": traj.energy_out, "steps": a.steps, "shape": list(g.shape)})


COMMANDS = {
    ("dataset", "prepare"): cmd_dataset_prepare,
    ("surrogate", "gen"): cmd_surrogate_gen,
    ("surrogate", "fit"): cmd_surrogate_fit,
    ("train", None): cmd_train,
    ("eval", None): cmd_eval,
    ("gradcheck", None): cmd_gradcheck,
    ("reduce", "bench"): cmd_reduce_bench,
    ("bands", "misfit"): cmd_bands_misfit,
    ("size-study", None): cmd_size_study,
    ("simulate", None): cmd_simulate,
}


def exit_code(exc) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (MissingInputError, FileNotFoundError)):
        return EXIT_MISSING
    if isinstance(exc, (BlowupError, SingularityError, DegeneracyError, TrainingFailure, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    key = (args.command, getattr(args, "action", None))
    name = " ".join(k for k in key if k)
    run = None
    try:
        run = Run(args)
        run.start(name)
        COMMANDS[key](run)
    except (PhononetError, FileNotFoundError, FloatingPointError) as e:
        code = exit_code(e)
        print(f"phononet {name}: {type(e).__name__}: {e}", file=sys.stderr)
        if run is not None:
            run.event("end", status="error", exit=code, error=f"{type(e).__name__}: {e}")
        return code
    run.event("end", status="ok", exit=0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
