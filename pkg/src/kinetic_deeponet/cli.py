"""Command-line entry points.

Every subcommand reads an INI config (``--config``), writes its outputs into
the output directory and finishes with ``metrics_<command>.json`` and
``manifest_<command>.json``, the latter listing every file the command wrote.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .collision import assemble_collision_matrix, apply_collision
from .config import ConfigError, parse_config, read_geometry, substream_seed
from .deeponet import Variant, build_model, evaluate_basis, load_checkpoint
from .entropy import SamplerConfig, moment_basis, read_dataset, sample_dataset, write_dataset
from .quadrature import SLAB, tensorized_sphere_grid
from .solver import (
    ExactBackend,
    SurrogateBackend,
    lattice_problem,
    relax_homogeneous,
    slab_inflow_problem,
    solve_lattice,
    solve_slab,
    write_field_csv,
)
from .training import TrainConfig, evaluate, train

log = logging.getLogger("kinetic_deeponet")


class UsageError(RuntimeError):
    pass


class Bundle:
    """Tracks written files and metrics for the run manifest."""

    def __init__(self, out: Path, cfg, command: str):
        self.out = out
        self.cfg = cfg
        self.command = command
        self.files = []
        self.metrics = {}
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.files.append(p)
        return p

    def add(self, *paths) -> None:
        self.files.extend(Path(p) for p in paths)

    def finish(self) -> None:
        manifest_name = f"manifest_{self.command}.json"
        metrics_path = self.path(f"metrics_{self.command}.json")
        metrics_path.write_text(json.dumps(self.metrics, indent=1, sort_keys=True) + "\n")
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.config_hash,
            "seed": self.cfg.seed,
            "versions": {
                "kinetic_deeponet": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "files": sorted({str(p.relative_to(self.out)) for p in self.files} | {manifest_name}),
        }
        (self.out / manifest_name).write_text(json.dumps(manifest, indent=1) + "\n")


def _setup(cfg):
    grid = cfg.velocity_grid()
    kernel = cfg.kernel()
    return grid, kernel, assemble_collision_matrix(grid, kernel)


def _dataset_path(cfg, bundle, key, default_name):
    value = cfg["io"][key]
    return cfg.resolve(value) if value else bundle.out / default_name


def _sampler(cfg, count, stream):
    s = cfg["sampler"]
    return SamplerConfig(
        degree=s["degree"],
        sigma=s["sigma"],
        entropy_threshold=s["entropy_threshold"],
        threshold_offset=s["threshold_offset"],
        sample_count=count,
        seed=substream_seed(cfg.seed, stream),
    )


def _named_backends(args, cfg, matrix, need_one=True):
    backends = []
    if args.exact:
        backends.append(("exact", ExactBackend(matrix)))
    used = set()
    for path in args.checkpoint or []:
        model = load_checkpoint(path)
        if model.grid.spec() != matrix.grid.spec():
            raise UsageError(f"checkpoint {path} was trained on a different velocity grid")
        name = model.variant.value
        k = 2
        while name in used:
            name, k = f"{model.variant.value}_{k}", k + 1
        used.add(name)
        backends.append((name, SurrogateBackend(model)))
    if need_one and not backends:
        raise UsageError("this command needs --exact or at least one --checkpoint")
    return backends


def cmd_sample(args, cfg, bundle):
    grid, kernel, matrix = _setup(cfg)
    basis = moment_basis(grid, cfg["sampler"]["degree"])
    for split, count in (("train", cfg["sampler"]["train_samples"]), ("test", cfg["sampler"]["test_samples"])):
        data = sample_dataset(grid, basis, matrix, _sampler(cfg, count, f"sampler.{split}"))
        bundle.add(*write_dataset(data, bundle.out / f"{split}.csv"))
        bundle.metrics[split] = {"samples": len(data), "draws": data.metadata["draws"], "c": data.metadata["c"]}


def _load_dataset(path):
    if not Path(path).is_file():
        raise UsageError(f"dataset {path} not found; run `sample` first or set io.dataset")
    return read_dataset(path)


def cmd_train(args, cfg, bundle):
    grid, kernel, _ = _setup(cfg)
    data = _load_dataset(_dataset_path(cfg, bundle, "dataset", "train.csv"))
    test_path = _dataset_path(cfg, bundle, "test_dataset", "test.csv")
    test = read_dataset(test_path) if test_path.is_file() else None
    branch, trunk = cfg.widths()
    t = cfg["train"]
    for variant in cfg["model"]["variants"]:
        model = build_model(variant, branch, trunk, grid, seed=substream_seed(cfg.seed, "init"), kernel=kernel)
        ckpt = bundle.path(f"checkpoint_{variant}.json")
        tc = TrainConfig(epochs=t["epochs"], learning_rate=t["learning_rate"], beta1=t["beta1"], beta2=t["beta2"],
                         eps=t["eps"], penalty_weight=t["penalty_weight"], seed=cfg.seed,
                         checkpoint_path=str(ckpt), log_every=t["log_every"])
        started = time.perf_counter()
        best, history = train(model, data, tc)
        runtime = time.perf_counter() - started
        history.write_csv(bundle.path(f"history_{variant}.csv"))
        entry = {
            "best_epoch": history.best_epoch + 1,
            "best_loss": history.loss[history.best_epoch],
            "final_invariance_error": history.invariance_error[-1],
            "runtime_s": runtime,
        }
        if test is not None:
            entry.update(evaluate(best, test))
        bundle.metrics[variant] = entry


def cmd_eval(args, cfg, bundle):
    grid, kernel, matrix = _setup(cfg)
    test = _load_dataset(_dataset_path(cfg, bundle, "test_dataset", "test.csv"))
    if args.exact:
        pred = apply_collision(matrix, test.inputs)
        err = np.linalg.norm(test.targets - pred, axis=1) / np.linalg.norm(test.targets, axis=1)
        inv = np.abs(pred @ grid.weights)
        bundle.metrics["exact"] = {
            "rel_l2_error": float(err.mean()),
            "invariance_error_mean": float(inv.mean()),
            "invariance_error_max": float(inv.max()),
            "n_samples": len(test),
        }
    for name, backend in _named_backends(args, cfg, matrix, need_one=not args.exact):
        if isinstance(backend, SurrogateBackend):
            started = time.perf_counter()
            bundle.metrics[name] = evaluate(backend.model, test)
            bundle.metrics[name]["runtime_s"] = time.perf_counter() - started


def _relax_dt(cfg, matrix):
    dt = cfg["solver"]["relax_dt"]
    return dt if dt is not None else 0.5 / float(np.max(np.sum(np.abs(matrix.A), axis=1)))


def cmd_relax(args, cfg, bundle):
    grid, kernel, matrix = _setup(cfg)
    basis = moment_basis(grid, cfg["sampler"]["degree"])
    f0 = sample_dataset(grid, basis, matrix, _sampler(cfg, 1, "relax")).inputs[0]
    dt = _relax_dt(cfg, matrix)
    n_t = cfg["solver"]["relax_steps"]
    for name, backend in _named_backends(args, cfg, matrix):
        traj, trace, ent = relax_homogeneous(backend, f0, n_t, dt)
        trace.write_csv(bundle.path(f"mass_trace_{name}.csv"))
        bundle.metrics[name] = {
            "dt": dt,
            "steps": n_t,
            "max_relative_mass_drift": float(trace.relative_drift().max()),
            "entropy_nonincreasing": bool(np.all(np.diff(ent) <= 1e-12)),
            "final_distance_to_equilibrium": float(np.linalg.norm(traj[-1] - traj[0] @ grid.weights / grid.measure)),
        }


def _run_spatial(args, cfg, bundle, case):
    grid, kernel, matrix = _setup(cfg)
    sv = cfg["solver"]
    if case == "inflow":
        if grid.domain != SLAB:
            raise UsageError("the inflow case needs a slab velocity grid")
        problem = slab_inflow_problem(grid, n_x=sv["n_x"] or 100, sigma_s=sv["sigma_s"], inflow=sv["inflow"],
                                      cfl=sv["cfl"], t_final=0.7 if sv["t_final"] is None else sv["t_final"])
    else:
        if grid.domain == SLAB:
            raise UsageError("the lattice case needs a sphere velocity grid")
        geometry = read_geometry(cfg.resolve(sv["geometry"])) if sv["geometry"] else None
        problem = lattice_problem(grid, n_cells=sv["n_x"] or 40, geometry=geometry, cfl=sv["cfl"],
                                  t_final=1.0 if sv["t_final"] is None else sv["t_final"])
    reference = None
    for name, backend in _named_backends(args, cfg, matrix):
        if case == "inflow":
            state, trace, ledger, stats = solve_slab(problem, backend)
        else:
            state, _, trace, ledger, stats = solve_lattice(problem, backend)
        write_field_csv(bundle.path(f"field_{name}.csv"), problem, state)
        trace.write_csv(bundle.path(f"mass_trace_{name}.csv"))
        ledger.write_csv(bundle.path(f"balance_{name}.csv"))
        entry = dict(stats)
        entry["final_mass"] = trace.masses[-1]
        entry["balance_residual_step_max"] = ledger.relative_residual()
        entry["balance_residual_run"] = ledger.run_relative_residual(trace.masses[-1])
        entry["collision_mass_created"] = ledger.totals()["collision"]
        if name == "exact":
            reference = state.f
        elif reference is not None:
            entry["relative_l2_field_error"] = float(np.linalg.norm(state.f - reference) / np.linalg.norm(reference))
        bundle.metrics[name] = entry


def cmd_inflow(args, cfg, bundle):
    _run_spatial(args, cfg, bundle, "inflow")


def cmd_lattice(args, cfg, bundle):
    _run_spatial(args, cfg, bundle, "lattice")


def dense_points(grid, n):
    if grid.domain == SLAB:
        return np.linspace(-1.0, 1.0, n)[:, None]
    n_polar = max(1, int(round(np.sqrt(n / 2))))
    return tensorized_sphere_grid(n_polar, max(2, n // n_polar)).coords()


def _write_basis(path, points, rows):
    names = ["mu"] if points.shape[1] == 1 else ["vx", "vy", "vz"]
    with open(path, "w") as fh:
        fh.write(",".join(names + [f"tau_{k + 1}" for k in range(rows.shape[0])]) + "\n")
        for i in range(points.shape[0]):
            fh.write(",".join(repr(float(x)) for x in list(points[i]) + list(rows[:, i])) + "\n")


def cmd_export_basis(args, cfg, bundle):
    grid, kernel, matrix = _setup(cfg)
    if not args.checkpoint:
        branch, trunk = cfg.widths()
        models = [build_model(v, branch, trunk, grid, seed=substream_seed(cfg.seed, "init"), kernel=kernel)
                  for v in cfg["model"]["variants"]]
    else:
        models = [load_checkpoint(p) for p in args.checkpoint]
    seen = set()
    for model in models:
        name = model.variant.value
        k = 2
        while name in seen:
            name, k = f"{model.variant.value}_{k}", k + 1
        seen.add(name)
        pts = dense_points(model.grid, cfg["solver"]["basis_points"])
        _write_basis(bundle.path(f"basis_{name}.csv"), pts, evaluate_basis(model, pts))
        on_grid = evaluate_basis(model, model.grid.coords())
        _write_basis(bundle.path(f"basis_{name}_sensors.csv"), model.grid.coords(), on_grid)
        gram = (on_grid * model.grid.weights) @ on_grid.T
        entry = {"rows": int(on_grid.shape[0]), "dense_points": int(pts.shape[0])}
        if model.variant is Variant.ORTHOGONAL:
            entry["gram_deviation"] = float(np.max(np.abs(gram - np.eye(gram.shape[0]))))
        bundle.metrics[name] = entry


COMMANDS = {
    "sample": (cmd_sample, "draw training and test densities"),
    "train": (cmd_train, "train the configured variants"),
    "eval": (cmd_eval, "evaluate checkpoints on the test set"),
    "relax": (cmd_relax, "homogeneous relaxation mass traces"),
    "inflow": (cmd_inflow, "slab inflow transport case"),
    "lattice": (cmd_lattice, "2D lattice transport case"),
    "export-basis": (cmd_export_basis, "export trunk basis functions"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kinetic-deeponet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--exact", action="store_true", help="include the quadrature collision operator")
        p.add_argument("--checkpoint", action="append", help="model checkpoint (repeatable)")
        p.add_argument("--out", help="output directory (overrides io.out)")
        p.add_argument("--seed", type=int, help="overrides io.seed")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.sections["io"]["seed"] = args.seed
        out = Path(args.out) if args.out else cfg.resolve(cfg["io"]["out"])
        bundle = Bundle(out, cfg, args.command)
        COMMANDS[args.command][0](args, cfg, bundle)
        bundle.finish()
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # module errors surface as a nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
