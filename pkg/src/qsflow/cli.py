"""Scenario-driven command line: ``qsflow run``, ``qsflow describe`` and ``qsflow bounds``.

A scenario is one JSON document::

    {"name": "...", "seed": 7,
     "model": {"kl": {...}} | {"germ": {...}} | {"file": "relative/path.json"},
     "grid": {"t_end": 1.0, "n_slices": 1000},
     "slice": {"trunc": 2},
     "tasks": [{"type": "ccp"}, ...]}

Every task is validated before any task runs.  Exit codes: 0 when every check
passes, 1 when a check fails (later tasks still run), 2 on parse or
validation errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy.linalg

from qsflow import cocycle_engine as ce
from qsflow import estimates as est
from qsflow import germ_analyzer as ga
from qsflow import ito_algebra as ia
from qsflow import noise_lattice as nl
from qsflow import trajectory_engine as te
from qsflow._numeric import apply_superop, decode_matrix

TASK_TYPES = (
    "verify_algebra",
    "ccp",
    "extract",
    "trajectories",
    "cocycle",
    "picard",
    "semigroup",
    "generating_function",
    "bounds",
)
CLASSES = ("filtering", "subfiltering", "contractive", "none")
BYTES_PER_ENTRY = 16


class ScenarioError(ValueError):
    """Parse or validation problem; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# ---------------------------------------------------------------------------
# parsing


@dataclass
class Model:
    kl: ga.KLCoefficients | None
    germ: ga.StructuralGerm

    @property
    def d_H(self) -> int:
        return self.germ.d_H

    def coefficients(self) -> ga.KLCoefficients:
        if self.kl is None:
            self.kl = ga.extract_stinespring(self.germ)
        return self.kl


@dataclass
class Task:
    index: int
    type: str
    params: dict

    @property
    def label(self) -> str:
        return f"{self.index:02d}_{self.type}"


@dataclass
class Scenario:
    name: str
    seed: int
    model: Model | None
    grid: nl.TimeGrid
    trunc: int
    n_noise: int | None
    tasks: list[Task]
    base_dir: Path


def _number(value: Any, name: str, *, positive: bool = False, integer: bool = False, minimum: float | None = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(name, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ScenarioError(name, f"expected an integer, got {value!r}")
    if positive and not value > 0:
        raise ScenarioError(name, f"must be positive, got {value!r}")
    if minimum is not None and value < minimum:
        raise ScenarioError(name, f"must be at least {minimum}, got {value!r}")
    return int(value) if integer else float(value)


def _matrix(value: Any, name: str, dim: int | None = None) -> np.ndarray:
    try:
        arr = decode_matrix(value)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(name, f"not a matrix ({exc})") from None
    if dim is not None and arr.shape != (dim, dim):
        raise ScenarioError(name, f"expected a {dim} x {dim} matrix, got shape {arr.shape}")
    return arr


def _vector(value: Any, name: str, dim: int) -> np.ndarray:
    try:
        arr = decode_matrix(value, ndim=1)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(name, f"not a vector ({exc})") from None
    if arr.shape != (dim,) or not np.linalg.norm(arr) > 0:
        raise ScenarioError(name, f"expected a nonzero vector of length {dim}")
    return arr


def _load_model(data: dict, base_dir: Path) -> Model:
    if "file" in data:
        path = base_dir / str(data["file"])
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError("model.file", f"cannot read {path}: {exc}") from None
    try:
        if "kl" in data:
            kl = ga.KLCoefficients.from_dict(data["kl"])
            return Model(kl, ga.generator_from_KL(kl))
        if "germ" in data:
            return Model(None, ga.StructuralGerm.from_dict(data["germ"]))
    except (KeyError, TypeError, ValueError) as exc:
        key = "model.kl" if "kl" in data else "model.germ"
        raise ScenarioError(key, str(exc)) from None
    raise ScenarioError("model", "expected one of 'kl', 'germ' or 'file'")


def parse_scenario(path: str | Path) -> Scenario:
    """Read and structurally validate a scenario file; tasks are checked by ``validate``."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ScenarioError("path", f"no such file {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError("path", f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ScenarioError("scenario", "top level must be an object")
    name = str(data.get("name", path.stem))
    seed = _number(data.get("seed", 0), "seed", integer=True, minimum=0)
    if seed >= 2**64:
        raise ScenarioError("seed", "must fit in 64 bits")
    grid_data = data.get("grid", {})
    t_end = _number(grid_data.get("t_end", 1.0), "grid.t_end", positive=True)
    n_slices = _number(grid_data.get("n_slices", 100), "grid.n_slices", integer=True, minimum=1)
    slice_data = data.get("slice", {})
    trunc = _number(slice_data.get("trunc", 2), "slice.trunc", integer=True, minimum=2)
    n_noise = slice_data.get("n_noise")
    if n_noise is not None:
        n_noise = _number(n_noise, "slice.n_noise", integer=True, minimum=0)
    model = _load_model(data["model"], path.parent) if "model" in data else None
    tasks_data = data.get("tasks", [])
    if not isinstance(tasks_data, list):
        raise ScenarioError("tasks", "must be a list")
    tasks = []
    for i, t in enumerate(tasks_data):
        if not isinstance(t, dict) or "type" not in t:
            raise ScenarioError(f"tasks[{i}].type", "missing")
        if t["type"] not in TASK_TYPES:
            raise ScenarioError(f"tasks[{i}].type", f"unknown task {t['type']!r}; expected one of {', '.join(TASK_TYPES)}")
        tasks.append(Task(i, t["type"], {k: v for k, v in t.items() if k != "type"}))
    return Scenario(name, int(seed), model, nl.TimeGrid(t_end, int(n_slices)), int(trunc), n_noise, tasks, path.parent)


# ---------------------------------------------------------------------------
# task validation


def _need_model(sc: Scenario, task: Task) -> Model:
    if sc.model is None:
        raise ScenarioError(f"tasks[{task.index}]", f"task {task.type!r} needs a model")
    return sc.model


def _grid_for(sc: Scenario, task: Task) -> nl.TimeGrid:
    where = f"tasks[{task.index}]"
    t_end = _number(task.params.get("t_end", sc.grid.t_end), f"{where}.t_end", positive=True)
    n = _number(task.params.get("n_slices", sc.grid.n_slices), f"{where}.n_slices", integer=True, minimum=1)
    return nl.TimeGrid(t_end, int(n))


def _observable(sc: Scenario, task: Task) -> np.ndarray:
    """Task observable; defaults to the projector on the last basis state."""
    d = sc.model.d_H
    if "observable" in task.params:
        return _matrix(task.params["observable"], f"tasks[{task.index}].observable", d)
    B = np.zeros((d, d), dtype=complex)
    B[-1, -1] = 1.0
    return B


def _tol(task: Task, default: float) -> float:
    return _number(task.params.get("tol", default), f"tasks[{task.index}].tol", positive=True)


def _v_verify_algebra(sc: Scenario, task: Task) -> dict:
    names = task.params.get("algebras", ["wiener", "poisson", "newton"])
    known = {"wiener", "poisson", "newton"}
    if not isinstance(names, list) or not set(names) <= known:
        raise ScenarioError(f"tasks[{task.index}].algebras", f"expected a subset of {sorted(known)}")
    return {"algebras": names}


def _v_ccp(sc: Scenario, task: Task) -> dict:
    _need_model(sc, task)
    return {"tol": _tol(task, 1e-10)}


def _v_extract(sc: Scenario, task: Task) -> dict:
    model = _need_model(sc, task)
    if not ga.check_ccp(model.germ).passed:
        raise ScenarioError(f"tasks[{task.index}]", "extraction needs a CCP germ")
    return {"tol": _tol(task, 1e-8)}


def _v_trajectories(sc: Scenario, task: Task) -> dict:
    model = _need_model(sc, task)
    where = f"tasks[{task.index}]"
    kind = task.params.get("kind", "diffusion")
    if kind not in ("diffusion", "jump"):
        raise ScenarioError(f"{where}.kind", "expected 'diffusion' or 'jump'")
    scheme = task.params.get("scheme", "euler")
    if scheme not in te.SCHEMES:
        raise ScenarioError(f"{where}.scheme", f"expected one of {te.SCHEMES}")
    coeffs = model.coefficients()
    if coeffs.n_channels != 1 or coeffs.d_E != 0:
        raise ScenarioError("model", "trajectory tasks need exactly one channel and no E modes")
    n_traj = _number(task.params.get("n_traj", 1000), f"{where}.n_traj", integer=True, minimum=2)
    psi0 = task.params.get("psi0")
    psi0 = _vector(psi0, f"{where}.psi0", model.d_H) if psi0 is not None else np.ones(model.d_H)
    every = task.params.get("checkpoint_every")
    if every is not None:
        every = _number(every, f"{where}.checkpoint_every", integer=True, minimum=1)
    return {
        "kind": kind,
        "scheme": scheme,
        "n_traj": n_traj,
        "psi0": psi0 / np.linalg.norm(psi0),
        "grid": _grid_for(sc, task),
        "observable": _observable(sc, task),
        "checkpoint_every": every,
        "bias_constant": _number(task.params.get("bias_constant", 10.0), f"{where}.bias_constant", minimum=0),
    }


def _lattice_for(sc: Scenario, task: Task, hp: ce.HPCoefficients, grid: nl.TimeGrid) -> nl.SliceSpace:
    if sc.n_noise is not None and sc.n_noise != hp.n_modes:
        raise ScenarioError("slice.n_noise", f"model needs {hp.n_modes} noise modes, got {sc.n_noise}")
    return nl.SliceSpace(hp.n_modes, sc.trunc)


def _v_cocycle(sc: Scenario, task: Task) -> dict:
    model = _need_model(sc, task)
    where = f"tasks[{task.index}]"
    mode = task.params.get("mode", "exact_slice")
    if mode not in ce.MODES:
        raise ScenarioError(f"{where}.mode", f"expected one of {ce.MODES}")
    layout = task.params.get("layout", "auto")
    try:
        hp = ce.hp_from_kl(model.coefficients(), layout)
        if mode == "exact_slice":
            ce.slice_operator(hp, 0.1, hp.slice_space(sc.trunc), mode)
    except ValueError as exc:
        raise ScenarioError(f"{where}.mode" if "scattering" in str(exc) else f"{where}.layout", str(exc)) from None
    grid = _grid_for(sc, task)
    ss = _lattice_for(sc, task, hp, grid)
    unitarity = bool(task.params.get("check_unitarity", False))
    unitarity_slices = _number(task.params.get("unitarity_slices", 10), f"{where}.unitarity_slices", integer=True, minimum=1)
    if unitarity:
        try:
            nl.Lattice(hp.d_H, ss, unitarity_slices).require_operator()
        except nl.LatticeTooLarge as exc:
            raise ScenarioError(f"{where}.unitarity_slices", str(exc)) from None
    return {
        "hp": hp,
        "mode": mode,
        "grid": grid,
        "slice": ss,
        "observable": _observable(sc, task),
        "tol": _tol(task, 10 * grid.dt),
        "check_unitarity": unitarity,
        "unitarity_slices": unitarity_slices,
    }


def _v_picard(sc: Scenario, task: Task) -> dict:
    _need_model(sc, task)
    where = f"tasks[{task.index}]"
    grid = _grid_for(sc, task)
    if grid.n_slices > 800:
        raise ScenarioError(f"{where}.n_slices", "Picard quadrature is quadratic in the grid size; use at most 800 slices")
    return {
        "grid": grid,
        "observable": _observable(sc, task),
        "tol": _tol(task, 1e-6),
        "max_iter": _number(task.params.get("max_iter", 100), f"{where}.max_iter", integer=True, minimum=1),
    }


def _v_semigroup(sc: Scenario, task: Task) -> dict:
    _need_model(sc, task)
    where = f"tasks[{task.index}]"
    expect = task.params.get("expect_class")
    if expect is not None and expect not in CLASSES:
        raise ScenarioError(f"{where}.expect_class", f"expected one of {CLASSES}")
    grid = _grid_for(sc, task)
    if grid.n_slices > 2000:
        raise ScenarioError(f"{where}.n_slices", "at most 2000 slices")
    return {"grid": grid, "tol": _tol(task, 1e-8), "expect_class": expect}


def _v_generating_function(sc: Scenario, task: Task) -> dict:
    model = _need_model(sc, task)
    where = f"tasks[{task.index}]"
    hp = ce.hp_from_kl(model.coefficients())
    grid = _grid_for(sc, task)
    ss = _lattice_for(sc, task, hp, grid)
    try:
        ce.slice_operator(hp, grid.dt, ss, "exact_slice")
        mode = "exact_slice"
    except ValueError:
        mode = "first_order"
    return {
        "hp": hp,
        "grid": grid,
        "slice": ss,
        "mode": mode,
        "n_functions": _number(task.params.get("n_functions", 3), f"{where}.n_functions", integer=True, minimum=1),
        "tol": _tol(task, 1e-8),
    }


def _sequence(data: Any, where: str) -> est.NormSequence:
    if not isinstance(data, dict):
        raise ScenarioError(where, "expected an object with 'kind'")
    try:
        if data.get("kind") == "table":
            return est.NormSequence.from_table(data.get("table", []))
        return est.NormSequence(str(data.get("kind")), float(data.get("c0", 1.0)), float(data.get("q", 1.0)))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(where, str(exc)) from None


def _v_bounds(sc: Scenario, task: Task) -> dict:
    where = f"tasks[{task.index}]"
    seq = _sequence(task.params.get("sequence", {"kind": "geometric", "q": 0.5}), f"{where}.sequence")
    xi = _number(task.params.get("xi", 1.0), f"{where}.xi", positive=True)
    zeta = _number(task.params.get("zeta", 1.0), f"{where}.zeta", positive=True)
    rho = _number(task.params.get("rho", 2.0), f"{where}.rho", positive=True)
    times = task.params.get("t", [0.0, 0.1, 0.2, 0.5])
    if not isinstance(times, list):
        raise ScenarioError(f"{where}.t", "expected a list of times")
    times = [_number(t, f"{where}.t", minimum=0.0) for t in times]
    return {"sequence": seq, "xi": xi, "zeta": zeta, "rho": rho, "t": times}


VALIDATORS: dict[str, Callable[[Scenario, Task], dict]] = {
    "verify_algebra": _v_verify_algebra,
    "ccp": _v_ccp,
    "extract": _v_extract,
    "trajectories": _v_trajectories,
    "cocycle": _v_cocycle,
    "picard": _v_picard,
    "semigroup": _v_semigroup,
    "generating_function": _v_generating_function,
    "bounds": _v_bounds,
}


def validate(sc: Scenario) -> list[dict]:
    return [VALIDATORS[t.type](sc, t) for t in sc.tasks]


# ---------------------------------------------------------------------------
# task execution


@dataclass
class TaskOutput:
    checks: list[dict] = field(default_factory=list)
    header: list[str] | None = None
    rows: list[list] = field(default_factory=list)
    report: dict = field(default_factory=dict)

    def check(self, name: str, passed: bool, **values: Any) -> None:
        self.checks.append({"name": name, "passed": bool(passed), **{k: _plain(v) for k, v in values.items()}})


def _plain(value: Any) -> Any:
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _entries(prefix: str, M: np.ndarray) -> list[str]:
    d = M.shape[0]
    return [f"{prefix}{i}{j}_{part}" for i in range(d) for j in range(d) for part in ("re", "im")]


def _flat(M: np.ndarray) -> list[float]:
    return [float(x) for z in np.asarray(M).reshape(-1) for x in (z.real, z.imag)]


def _exp_reference(germ: ga.StructuralGerm, B: np.ndarray, times: np.ndarray) -> np.ndarray:
    lam = germ.gamma[0, 0]
    return np.array([apply_superop(scipy.linalg.expm(t * lam), B) for t in times])


def _run_verify_algebra(sc: Scenario, p: dict, ctx: dict) -> TaskOutput:
    out = TaskOutput(header=["algebra", "axiom", "residual", "passed"])
    builders = {"wiener": ia.wiener_algebra, "poisson": ia.poisson_algebra, "newton": ia.newton_algebra}
    for name in p["algebras"]:
        rep = ia.verify_ito_axioms(builders[name]())
        for c in rep.checks:
            out.rows.append([name, c.name, c.residual, c.passed])
        out.check(f"{name}_axioms", rep.passed, max_residual=max(c.residual for c in rep.checks))
    return out


def _run_ccp(sc: Scenario, p: dict, ctx: dict) -> TaskOutput:
    res = ga.check_ccp(sc.model.germ, tol=p["tol"])
    out = TaskOutput(report={"reason": res.reason, "star_residual": res.star_residual})
    out.check("ccp", res.passed, min_eigenvalue=res.min_eigenvalue, tol=p["tol"])
    return out


def _run_extract(sc: Scenario, p: dict, ctx: dict) -> TaskOutput:
    coeffs = ga.extract_stinespring(sc.model.germ)
    dist = ga.generator_from_KL(coeffs).distance(sc.model.germ)
    gauge = ga.gauge_residual(coeffs)
    out = TaskOutput(report={"coefficients": coeffs.to_dict()})
    out.check("stinespring_round_trip", dist <= p["tol"], distance=dist, tol=p["tol"])
    out.check("gauge", gauge <= 1e-10, residual=gauge)
    return out


def _run_trajectories(sc: Scenario, p: dict, ctx: dict) -> TaskOutput:
    coeffs = sc.model.coefficients()
    K, L = coeffs.K, coeffs.L_l[0]
    kwargs = dict(checkpoint_every=p["checkpoint_every"], store_propagators=True, workers=ctx["threads"])
    if p["kind"] == "diffusion":
        batch = te.simulate_diffusion(te.DiffusionModel(K, L), p["psi0"], p["grid"], p["n_traj"], sc.seed, p["scheme"], **kwargs)
    else:
        batch = te.simulate_jump(te.JumpModel(K, L + np.eye(coeffs.d_H)), p["psi0"], p["grid"], p["n_traj"], sc.seed, **kwargs)
    stats = te.normalization_stats(batch)
    B = p["observable"]
    res = te.heisenberg_map(batch, B)
    out = TaskOutput(header=["t", "mean_weight", "stderr", *_entries("obs", B)], report={"batch": batch.metadata()})
    for k, t in enumerate(batch.times):
        out.rows.append([float(t), float(stats.mean_weight[k]), float(stats.stderr[k]), *_flat(res.mean[k])])
    cmp = te.mc_semigroup_compare(batch, B, sc.model.germ, bias_constant=p["bias_constant"])
    out.check(
        "semigroup_compare",
        cmp.passed,
        max_deviation=float(np.max(cmp.deviation[-1])),
        band=float(np.min(cmp.band[-1])),
    )
    report = ga.conservativity_report(coeffs)
    if report.filtering:
        gap = abs(stats.mean_weight[-1] - 1.0)
        out.check("mean_weight", gap <= 3 * stats.stderr[-1] + 1e-12, deviation=float(gap), stderr=float(stats.stderr[-1]))
    elif report.subfiltering:
        out.check("mean_weight_monotone", stats.monotone)
    out.report["n_flagged"] = batch.n_flagged
    return out


def _run_cocycle(sc: Scenario, p: dict, ctx: dict) -> TaskOutput:
    hp, grid, B = p["hp"], p["grid"], p["observable"]
    flow = ce.flow_via_cocycle(hp, B, grid, p["slice"], p["mode"])
    ref = _exp_reference(sc.model.germ, B, grid.times)
    dev = np.max(np.abs(flow.values - ref), axis=(1, 2))
    out = TaskOutput(header=["t", *_entries("flow", B), "residual"])
    for k, t in enumerate(grid.times):
        out.rows.append([float(t), *_flat(flow.values[k]), float(dev[k])])
    out.check("flow_vs_semigroup", dev[-1] <= p["tol"], deviation=float(dev[-1]), tol=p["tol"])
    if p["check_unitarity"]:
        ugrid = nl.TimeGrid(grid.t_end, p["unitarity_slices"])
        rep = ce.unitarity_check(hp, ugrid, p["slice"], p["mode"])
        out.report["unitarity_conditions"] = rep.conditions
        out.report["lattice_residual"] = rep.final_residual
        out.check("unitarity_conditions", rep.algebraic_passed, violated=rep.violated)
    return out


def _run_picard(sc: Scenario, p: dict, ctx: dict) -> TaskOutput:
    grid, B = p["grid"], p["observable"]
    flow = ce.picard_minimal_flow(sc.model.coefficients(), B, [(None, None)], grid, max_iter=p["max_iter"])
    ref = _exp_reference(sc.model.germ, B, grid.times)
    dev = np.max(np.abs(flow.values[0] - ref), axis=(1, 2))
    out = TaskOutput(
        header=["t", *_entries("picard", B), "residual"],
        report={"iterations": flow.iterations, "sup_differences": list(flow.trace), "converged": flow.converged},
    )
    for k, t in enumerate(grid.times):
        out.rows.append([float(t), *_flat(flow.values[0][k]), float(dev[k])])
    out.check("picard_vs_semigroup", flow.converged and dev.max() <= p["tol"], deviation=float(dev.max()), tol=p["tol"])
    out.check("picard_monotone", flow.monotone_min_eigenvalue >= -1e-10, min_eigenvalue=flow.monotone_min_eigenvalue)
    return out


def _run_semigroup(sc: Scenario, p: dict, ctx: dict) -> TaskOutput:
    coeffs = sc.model.coefficients()
    res = ce.markov_semigroup(coeffs, p["grid"])
    ident = np.eye(coeffs.d_H)
    out = TaskOutput(header=["t", *_entries("P", ident), "residual"], report={"iterations": res.iterations})
    dev = np.max(np.abs(res.P - res.reference), axis=(1, 2))
    for k, t in enumerate(res.times):
        out.rows.append([float(t), *_flat(res.P[k]), float(dev[k])])
    out.check("markov_vs_exp", res.converged and res.max_deviation <= p["tol"], deviation=res.max_deviation, tol=p["tol"])
    out.check("markov_monotone", res.monotone_min_eigenvalue >= -1e-10, min_eigenvalue=res.monotone_min_eigenvalue)
    rep = ga.conservativity_report(coeffs)
    flags = {"filtering": rep.filtering, "subfiltering": rep.subfiltering, "contractive": rep.contractive}
    out.report["class"] = rep.klass
    out.report["flags"] = flags
    if p["expect_class"] is not None:
        expect = p["expect_class"]
        ok = rep.klass == "none" if expect == "none" else flags[expect]
        out.check("conservativity_report", ok, expected=expect, found=rep.klass, **flags)
    return out


def _run_generating_function(sc: Scenario, p: dict, ctx: dict) -> TaskOutput:
    hp, grid = p["hp"], p["grid"]
    rng = np.random.default_rng(sc.seed)
    g_list = []
    for _ in range(p["n_functions"]):
        values = []
        for _ in range(grid.n_slices):
            beta = complex(rng.normal(), rng.normal())
            alpha = complex(rng.normal(), 0.0)
            e = hp.n_e
            values.append(ia.ItoQuadruple(np.zeros((e, e)), np.full(e, beta), np.full(e, beta), alpha))
        g_list.append(ce.StepFunctionG(tuple(values), grid.n_slices))
    res = ce.generating_function(hp, g_list, grid, p["slice"], p["mode"])
    ident = np.eye(hp.d_H)
    out = TaskOutput(header=["t", *_entries("theta0_", ident)], report={"gram_min_eigenvalue": res.min_eigenvalue})
    for k, t in enumerate(grid.times):
        out.rows.append([float(t), *_flat(res.zero_path[k])])
    out.check("gram_positive", res.min_eigenvalue >= -p["tol"], min_eigenvalue=res.min_eigenvalue)
    rep = ga.conservativity_report(sc.model.coefficients())
    if rep.filtering:
        gap = float(np.max(np.abs(res.zero_path[-1] - ident)))
        out.check("theta_zero_identity", gap <= 10 * grid.dt, deviation=gap)
    elif rep.subfiltering:
        out.check("theta_zero_monotone", res.zero_path_monotone_min_eigenvalue >= -1e-10, min_eigenvalue=res.zero_path_monotone_min_eigenvalue)
    return out


def _run_bounds(sc: Scenario, p: dict, ctx: dict) -> TaskOutput:
    out = TaskOutput(header=["t", "bound", "convergent"])
    for t in p["t"]:
        r = est.series_bound(p["sequence"], est.ScaleParams(p["xi"], p["zeta"], t, p["rho"]))
        out.rows.append([t, r.value if r.convergent else float("inf"), r.convergent])
    t_max = est.integrability_radius(p["xi"], p["zeta"], p["rho"])
    out.report["integrability_radius"] = t_max
    if t_max > 0:
        plug = abs(est.scale_ratio(t_max, p["xi"], p["zeta"]) - p["rho"])
        out.check("radius_plug_back", plug <= 1e-10, residual=plug)
    return out


RUNNERS: dict[str, Callable[[Scenario, dict, dict], TaskOutput]] = {
    "verify_algebra": _run_verify_algebra,
    "ccp": _run_ccp,
    "extract": _run_extract,
    "trajectories": _run_trajectories,
    "cocycle": _run_cocycle,
    "picard": _run_picard,
    "semigroup": _run_semigroup,
    "generating_function": _run_generating_function,
    "bounds": _run_bounds,
}


def csv_text(header: list[str], rows: list[list]) -> str:
    """CSV with shortest round-trip floats (``repr``)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def run_scenario(sc: Scenario, output_dir: Path, threads: int = 1, quiet: bool = False) -> int:
    """Validate all tasks, run them in order and write reports; returns the exit code."""
    params = validate(sc)
    output_dir.mkdir(parents=True, exist_ok=True)
    summary_tasks = []
    all_passed = True
    started = time.time()
    for task, p in zip(sc.tasks, params):
        t0 = time.perf_counter()
        try:
            out = RUNNERS[task.type](sc, p, {"threads": threads})
            error = None
        except Exception as exc:  # a failing task must not stop the rest
            out = TaskOutput()
            out.check("task_completed", False)
            error = f"{type(exc).__name__}: {exc}"
        runtime = time.perf_counter() - t0
        if out.header is not None:
            (output_dir / f"{task.label}.csv").write_text(csv_text(out.header, out.rows))
        (output_dir / f"{task.label}.json").write_text(json.dumps(out.report, indent=2, default=_json_default, sort_keys=True) + "\n")
        passed = all(c["passed"] for c in out.checks)
        all_passed = all_passed and passed
        entry = {"index": task.index, "type": task.type, "passed": passed, "checks": out.checks, "runtime_s": runtime}
        if error:
            entry["error"] = error
        summary_tasks.append(entry)
        if not quiet:
            status = "PASS" if passed else "FAIL"
            names = ", ".join(f"{c['name']}={'ok' if c['passed'] else 'FAIL'}" for c in out.checks) or "no checks"
            print(f"[{status}] {task.label}: {names} ({runtime:.2f} s)")
            if error:
                print(f"        {error}")
    summary = {
        "scenario": sc.name,
        "seed": sc.seed,
        "passed": all_passed,
        "tasks": summary_tasks,
        "metadata": {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)), "wall_time_s": time.time() - started},
    }
    (output_dir / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
    return 0 if all_passed else 1


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# ---------------------------------------------------------------------------
# describe


def lattice_bytes(system_dim: int, n_noise: int, trunc: int, n_slices: int) -> int:
    """Bytes of one dense complex operator on the full lattice (exact integer)."""
    dim = system_dim * trunc ** (n_noise * n_slices)
    return dim * dim * BYTES_PER_ENTRY


def _format_bytes(n: int) -> str:
    if n >= 1024**5:
        return f"about 2^{n.bit_length() - 1} B"
    for unit in ("B", "KiB", "MiB", "GiB", "TiB"):
        if n < 1024:
            return f"{n} {unit}"
        n //= 1024
    return f"{n} PiB"


def describe(sc: Scenario, stream=None) -> None:
    stream = stream or sys.stdout
    limit = nl.MAX_OPERATOR_DIM**2 * BYTES_PER_ENTRY
    d = sc.model.d_H if sc.model else 1
    if sc.n_noise is not None:
        n_noise = sc.n_noise
    elif sc.model is not None:
        n_noise = ce.hp_from_kl(sc.model.coefficients()).n_modes
    else:
        n_noise = 0
    print(f"scenario {sc.name!r} (seed {sc.seed})", file=stream)
    print(f"  model: d_H = {d}" + (f", d_E = {sc.model.germ.d_E}" if sc.model else " (none)"), file=stream)
    print(f"  grid: t_end = {sc.grid.t_end}, n_slices = {sc.grid.n_slices}, dt = {sc.grid.dt}", file=stream)
    print(f"  slice: {n_noise} noise modes, trunc {sc.trunc}", file=stream)
    size = lattice_bytes(d, n_noise, sc.trunc, sc.grid.n_slices)
    print(f"  full lattice operator: {_format_bytes(size)}", file=stream)
    if size > limit:
        print(f"  WARNING: full lattice exceeds the {_format_bytes(limit)} bound; only transfer-map tasks can run", file=stream)
    print(f"  {len(sc.tasks)} task(s):", file=stream)
    for t in sc.tasks:
        extra = ", ".join(f"{k}={v}" for k, v in sorted(t.params.items()) if not isinstance(v, (list, dict)))
        print(f"    {t.label}" + (f" ({extra})" if extra else ""), file=stream)


# ---------------------------------------------------------------------------
# entry point


def _threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("QSFLOW_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ScenarioError("QSFLOW_THREADS", f"expected an integer, got {env!r}") from None
    return 1


def _bounds_command(args: argparse.Namespace) -> int:
    data: dict = {}
    if args.params:
        try:
            data = json.loads(Path(args.params).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError("params", str(exc)) from None
    for key in ("xi", "zeta", "rho"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    seq = dict(data.get("sequence", {"kind": "geometric", "q": 0.5}))
    if args.kind:
        seq["kind"] = args.kind
    if args.q is not None:
        seq["q"] = args.q
    if args.c0 is not None:
        seq["c0"] = args.c0
    data["sequence"] = seq
    xi = _number(data.get("xi", 1.0), "xi", positive=True)
    zeta = _number(data.get("zeta", 1.0), "zeta", positive=True)
    rho = _number(data.get("rho", 2.0), "rho", positive=True)
    if "t" not in data:
        t_max = args.t_max if args.t_max is not None else est.integrability_radius(xi, zeta, rho)
        n = max(2, args.points)
        data["t"] = [t_max * k / (n - 1) for k in range(n)]
    task = Task(0, "bounds", data)
    sc = Scenario("bounds", 0, None, nl.TimeGrid(1.0, 1), 2, None, [task], Path("."))
    p = _v_bounds(sc, task)
    out = _run_bounds(sc, p, {})
    sys.stdout.write(csv_text(out.header, out.rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsflow", description="Quantum stochastic flow verification and simulation.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="validate and run a scenario")
    run.add_argument("scenario")
    run.add_argument("--output-dir", type=Path)
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--threads", type=int, help="trajectory workers (default: QSFLOW_THREADS or 1)")
    run.add_argument("--quiet", action="store_true")
    desc = sub.add_parser("describe", help="print the validated task plan")
    desc.add_argument("scenario")
    bnd = sub.add_parser("bounds", help="tabulate the scale series bound as CSV")
    bnd.add_argument("params", nargs="?", help="optional JSON file with xi, zeta, rho, sequence, t")
    bnd.add_argument("--xi", type=float)
    bnd.add_argument("--zeta", type=float)
    bnd.add_argument("--rho", type=float)
    bnd.add_argument("--kind", choices=("geometric", "factorial"))
    bnd.add_argument("--q", type=float)
    bnd.add_argument("--c0", type=float)
    bnd.add_argument("--t-max", type=float)
    bnd.add_argument("--points", type=int, default=11)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "bounds":
            return _bounds_command(args)
        sc = parse_scenario(args.scenario)
        if args.command == "describe":
            validate(sc)
            describe(sc)
            return 0
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ScenarioError("--seed", "must be a 64-bit unsigned integer")
            sc.seed = args.seed
        threads = _threads(args.threads)
        if threads < 1:
            raise ScenarioError("--threads", "must be at least 1")
        out_dir = args.output_dir or Path(f"{sc.name}_output")
        return run_scenario(sc, out_dir, threads, args.quiet)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
