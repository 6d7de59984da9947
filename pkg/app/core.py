import math
import os
from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from tqdm import tqdm

from app.config import ProblemBlock, RunConfig, settings
from app.errors import ConfigError
from app.processors.concentration import (
    AutonomousGroundState,
    CutoffSpec,
    RadialModel,
    autonomous_ground_state,
    barycenter_radius,
    concentration_gap,
    default_cutoff,
    make_phi,
    radial_deviation,
    recentred_distance,
)
from app.processors.energy import (
    Nonlinearity,
    Potential,
    PotentialKind,
    Problem,
    SignClass,
    nonlinear_work,
    norm_sq,
    project_to_manifold,
)
from app.processors.fields import (
    GridSpec,
    RadialGrid,
    ScalarField,
    gaussian,
    gaussian_mixture,
    read_field,
)
from app.processors.morse import morse_index
from app.processors.optimizer import SolutionRecord, is_duplicate, minimize, multi_start
from app.processors.records import RecordWriter, write_csv, write_profile_csv
from app.processors.verification import VerificationSuite

logger = logging.getLogger(__name__)

ProgressCallback = Optional[Callable[[float, str], None]]


class ExitCode(IntEnum):
    OK = 0
    CONFIG = 1
    NOT_CONVERGED = 2
    ASSERTION = 3
    VERIFY = 4


def build_potential(block) -> Potential:
    if block.kind == "user_field":
        return Potential(kind=PotentialKind.USER_FIELD, values=read_field(block.path))
    return Potential(
        kind=PotentialKind(block.kind),
        V0=block.V0,
        centers=tuple(tuple(c) for c in block.centers),
        kappa=block.kappa,
        well_radius=block.well_radius,
    )


def build_problem(
    block: ProblemBlock,
    eps: Optional[float] = None,
    c: Optional[float] = None,
    rho: Optional[float] = None,
) -> Problem:
    grid = GridSpec(block.grid.n, block.grid.L)
    nl = block.nonlinearity
    return Problem(
        grid=grid,
        potential=build_potential(block.potential),
        eps=block.eps if eps is None else eps,
        f=Nonlinearity(nl.family, p=nl.p, a=nl.a),
        c=block.c if c is None else c,
        rho=rho,
    )


def nearest_well(point: Sequence[float], wells: Sequence[Sequence[float]]) -> Tuple[int, float]:
    distances = [float(np.linalg.norm(np.subtract(point, w))) for w in wells]
    i = int(np.argmin(distances))
    return i, distances[i]


def classify_trend(cs: Sequence[float], lams: Sequence[float]) -> Dict[str, Any]:
    """
    Behaviour of lambda_c as c -> 0 from the two smallest levels: a log-log slope
    of |lambda| below -1/4 reads as divergence to -infinity, otherwise as bounded.
    """
    order = np.argsort(cs)
    c0, c1 = cs[order[0]], cs[order[1]]
    l0, l1 = abs(lams[order[0]]), abs(lams[order[1]])
    slope = (math.log(l1) - math.log(l0)) / (math.log(c1) - math.log(c0))
    return {
        "trend": "divergent" if slope < -0.25 else "bounded",
        "log_slope": slope,
        "lambda_smallest_c": -l0,
    }


class BPSolveApp:
    def __init__(self, seed: int = 0, threads: Optional[int] = None):
        self.seed = seed
        self.threads = threads or settings.THREADS

    def _progress(self, progress_callback: ProgressCallback, fraction: float, message: str) -> None:
        logger.info(f"[BPSolve] {message}")
        if progress_callback:
            progress_callback(fraction, message)

    def _ground_state(self, cfg: RunConfig, c: Optional[float] = None) -> AutonomousGroundState:
        problem = cfg.problem
        nl = problem.nonlinearity
        mu = problem.potential.V0
        if problem.potential.kind == "user_field":
            mu = build_potential(problem.potential).V0
        return autonomous_ground_state(
            mu,
            Nonlinearity(nl.family, p=nl.p, a=nl.a),
            problem.c if c is None else c,
            RadialGrid(cfg.radial.m, cfg.radial.r_max),
            cfg.solver,
            start_width=problem.start_width,
        )

    # --- solve ---------------------------------------------------------------------------

    def solve(self, cfg: RunConfig, out_dir: str, progress_callback: ProgressCallback = None, **_) -> Dict[str, Any]:
        # 1. Validation
        self._progress(progress_callback, 0.1, "Building problem...")
        P = build_problem(cfg.problem)
        writer = RecordWriter(out_dir)

        # 2. Descent from a centred Gaussian
        self._progress(progress_callback, 0.3, "Minimizing on the constraint manifold...")
        start = gaussian(P.grid, width=cfg.problem.start_width)
        rec = minimize(P, start, cfg.solver)

        # 3. Persist
        self._progress(progress_callback, 0.9, "Writing record...")
        writer.write_solution(rec, tag="solution")
        if P.f.vanishes_on_nonpositive and rec.sign_class == SignClass.NEGATIVE:
            writer.write_entry("energy_identity", gap=abs(rec.energy - 0.5 * norm_sq(P, rec.u)))

        exit_code = ExitCode.OK if not rec.violations() else ExitCode.NOT_CONVERGED
        self._progress(progress_callback, 1.0, "Done!")
        return {
            "status": "completed" if exit_code == ExitCode.OK else "flagged",
            "exit_code": exit_code,
            "record": rec,
            "records_path": writer.path,
            "table": [
                ("energy", rec.energy),
                ("lambda", rec.lam),
                ("constraint", rec.constraint),
                ("residual", rec.residual),
                ("iterations", rec.iterations),
                ("sign_class", rec.sign_class.value),
                ("barycenter", rec.barycenter),
            ],
        }

    # --- autonomous --------------------------------------------------------------------------

    def autonomous(self, cfg: RunConfig, out_dir: str, progress_callback: ProgressCallback = None, **_) -> Dict[str, Any]:
        self._progress(progress_callback, 0.1, "Solving the radial autonomous problem...")
        gs = self._ground_state(cfg)
        writer = RecordWriter(out_dir)

        profile_path = os.path.join(out_dir, "autonomous_profile.csv")
        write_profile_csv(profile_path, gs.profile)
        nonpositive = gs.positive_part <= cfg.solver.sign_tol
        writer.write_entry(
            "autonomous",
            mu=gs.mu,
            c=gs.c,
            energy=gs.energy,
            lam=gs.lam,
            residual=gs.residual,
            iterations=gs.iterations,
            certified=gs.certified,
            half_mass_radius=gs.half_mass_radius,
            energy_identity_gap=gs.energy_identity_gap,
            nonpositive=nonpositive,
            profile_path="autonomous_profile.csv",
        )
        ok = gs.certified and gs.lam < 0 and gs.energy > 0 and nonpositive
        self._progress(progress_callback, 1.0, "Done!")
        return {
            "status": "completed" if ok else "flagged",
            "exit_code": ExitCode.OK if ok else ExitCode.NOT_CONVERGED,
            "ground_state": gs,
            "records_path": writer.path,
            "table": [
                ("energy", gs.energy),
                ("lambda", gs.lam),
                ("residual", gs.residual),
                ("iterations", gs.iterations),
                ("half_mass_radius", gs.half_mass_radius),
                ("energy_identity_gap", gs.energy_identity_gap),
            ],
        }

    # --- bifurcation ---------------------------------------------------------------------------

    def _bifurcation_cell(self, cfg: RunConfig, c: float) -> Dict[str, Any]:
        problem = cfg.problem
        if cfg.experiment.radial and problem.potential.kind == "constant":
            gs = self._ground_state(cfg, c=c)
            model = RadialModel(gs.profile.grid, gs.mu, gs.f, c)
            u = gs.profile.values
            work = model.integrate(gs.f.f(u) * u)
            return {"c": c, "norm_sq": gs.norm_sq, "lam": gs.lam, "work": work, "certified": gs.certified}
        P = build_problem(problem, c=c)
        rec = minimize(P, gaussian(P.grid, width=problem.start_width), cfg.solver)
        return {
            "c": c,
            "norm_sq": norm_sq(P, rec.u),
            "lam": rec.lam,
            "work": nonlinear_work(P, rec.u),
            "certified": rec.certified,
            "record": rec,
        }

    def bifurcation(self, cfg: RunConfig, out_dir: str, progress_callback: ProgressCallback = None, **_) -> Dict[str, Any]:
        c_list = cfg.experiment.c_list
        writer = RecordWriter(out_dir)
        cells: List[Optional[Dict[str, Any]]] = [None] * len(c_list)

        self._progress(progress_callback, 0.1, f"Sweeping {len(c_list)} constraint levels...")
        with tqdm(total=len(c_list), desc="Bifurcation", unit="level", colour="green") as pbar:
            with ThreadPoolExecutor(max_workers=self.threads) as executor:
                futures = {}
                for i, c in enumerate(c_list):
                    future = executor.submit(self._bifurcation_cell, cfg, c)
                    future.add_done_callback(lambda _: pbar.update(1))
                    futures[future] = i
                for future, i in futures.items():
                    cells[i] = future.result()

        rows = []
        for i, cell in enumerate(cells):
            c = cell["c"]
            q = cell["norm_sq"] / math.sqrt(c)
            identity = abs(cell["lam"] * c + cell["norm_sq"] + cell["work"]) / max(abs(cell["lam"] * c), 1e-300)
            cell.update(q=q, identity=identity)
            rows.append([c, cell["norm_sq"], cell["lam"], q, identity])
            if "record" in cell:
                writer.write_solution(cell["record"], cell={"c_index": i}, tag="bifurcation")
            writer.write_entry(
                "bifurcation_level",
                cell={"c_index": i},
                c=c,
                norm_sq=cell["norm_sq"],
                lam=cell["lam"],
                q=q,
                identity_residual=identity,
                certified=cell["certified"],
            )
        write_csv(os.path.join(out_dir, "bifurcation.csv"), ["c", "norm_sq", "lambda", "q", "identity_residual"], rows)

        qs = [cell["q"] for cell in cells]
        steps = [b - a for a, b in zip(qs, qs[1:])]
        non_decreasing = all(s >= -1e-6 * abs(a) for s, a in zip(steps, qs))
        strict = all(s > 1e-6 * abs(a) for s, a in zip(steps, qs))
        flat = all(abs(s) <= 1e-6 * abs(a) for s, a in zip(steps, qs))
        identity_ok = all(cell["identity"] <= 1e-6 for cell in cells)
        negative = all(cell["lam"] < 0 for cell in cells)
        certified = all(cell["certified"] for cell in cells)
        trend = classify_trend(c_list, [cell["lam"] for cell in cells]) if len(c_list) >= 2 else {}
        writer.write_entry(
            "bifurcation_summary",
            non_decreasing=non_decreasing,
            strictly_increasing=strict,
            constant=flat,
            identity_ok=identity_ok,
            all_lambda_negative=negative,
            q_smallest_c=qs[0],
            **trend,
        )

        if not certified:
            exit_code = ExitCode.NOT_CONVERGED
        elif not (non_decreasing and identity_ok and negative):
            exit_code = ExitCode.ASSERTION
        else:
            exit_code = ExitCode.OK
        self._progress(progress_callback, 1.0, "Done!")
        return {
            "status": "completed" if exit_code == ExitCode.OK else "flagged",
            "exit_code": exit_code,
            "cells": cells,
            "monotonicity": "strict" if strict else ("constant" if flat else ("non-decreasing" if non_decreasing else "violated")),
            "trend": trend,
            "records_path": writer.path,
            "table": [("c", "norm_sq", "lambda", "q", "identity")] + [tuple(r) for r in rows],
        }

    # --- multiplicity ---------------------------------------------------------------------------

    def _annotate(
        self,
        P: Problem,
        rec: SolutionRecord,
        gs: AutonomousGroundState,
        wells: Sequence[Sequence[float]],
        k: int,
        max_iter: int,
    ) -> Dict[str, Any]:
        well, error = nearest_well(rec.barycenter, wells)
        center = tuple(np.asarray(rec.barycenter) / P.eps)
        info = {
            "well": well,
            "barycenter_error": error,
            "recentred_distance": recentred_distance(rec.u, gs, center),
        }
        if P.potential.kind == PotentialKind.CONSTANT:
            info["radial_deviation"] = radial_deviation(rec.u, gs, center)
        try:
            spectrum = morse_index(P, rec, k=k, max_iter=max_iter)
            rec.morse_index = spectrum.morse_index
            rec.spectrum = spectrum.to_dict()
        except Exception as e:
            logger.warning(f"[Multiplicity] Morse index unavailable: {e}")
        return info

    def multiplicity(self, cfg: RunConfig, out_dir: str, progress_callback: ProgressCallback = None, **_) -> Dict[str, Any]:
        # 1. Validation
        problem = cfg.problem
        wells = [tuple(c) for c in problem.potential.centers]
        if problem.potential.kind != "multi_well" or not wells:
            raise ConfigError("multiplicity needs a multi_well potential with at least one center")
        eps_list = cfg.experiment.eps_list
        writer = RecordWriter(out_dir)

        # 2. Autonomous ground state and cutoff
        self._progress(progress_callback, 0.05, "Computing the autonomous ground state...")
        gs = self._ground_state(cfg)
        grid = GridSpec(problem.grid.n, problem.grid.L)
        T = cfg.experiment.cutoff_T or default_cutoff(gs, wells, eps_list, grid)
        cut = CutoffSpec(T)
        rho = barycenter_radius(wells, T)
        separations = [
            float(np.linalg.norm(np.subtract(a, b))) for i, a in enumerate(wells) for b in wells[i + 1:]
        ]
        resolution = 0.1 * min(separations) if separations else T
        logger.info(f"[Multiplicity] E_gs={gs.energy:.10g}, T={T:.4g}, rho={rho:.4g}")

        # 3. Per-eps sweep
        per_eps = []
        for j, eps in enumerate(eps_list):
            self._progress(progress_callback, 0.1 + 0.7 * j / len(eps_list), f"eps={eps}: bumps and descent...")
            P = build_problem(problem, eps=eps, rho=rho)
            gap = concentration_gap(P, gs, wells, cut)
            starts = [make_phi(P, gs, y, cut) for y in wells]
            records = multi_start(P, starts, cfg.solver, threads=self.threads)
            solutions = []
            for rec in records:
                info = {}
                if rec.certified:
                    info = self._annotate(P, rec, gs, wells, cfg.morse.k, cfg.morse.max_iter)
                writer.write_solution(rec, cell={"eps_index": j, "start": rec.start_index}, tag="multiplicity")
                solutions.append((rec, info))
            per_eps.append({"eps": eps, "gap": gap, "solutions": solutions})
            writer.write_entry(
                "concentration",
                cell={"eps_index": j},
                eps=eps,
                h=gap.h,
                bump_energies=[s.energy for s in gap.samples],
                bump_barycenter_errors=[s.barycenter_error for s in gap.samples],
                distinct=sum(1 for rec, _ in solutions if rec.certified),
            )

        # 4. Gates at the smallest eps
        self._progress(progress_callback, 0.85, "Checking concentration and multiplicity...")
        failures = self._multiplicity_gates(per_eps, gs, wells, resolution)

        # 5. Exploratory high-energy search
        self._progress(progress_callback, 0.9, "Searching for a higher-energy solution...")
        last = per_eps[-1]
        P_last = build_problem(problem, eps=last["eps"], rho=rho)
        found = self._high_energy_search(P_last, gs, wells, cut, [rec for rec, _ in last["solutions"]], cfg)
        for i, rec in enumerate(found):
            writer.write_solution(rec, cell={"search": i}, tag="high_energy")

        writer.write_entry("multiplicity_summary", failures=failures, high_energy_found=len(found), cutoff_T=T, rho=rho)
        flagged = any(not rec.certified for entry in per_eps for rec, _ in entry["solutions"])
        if failures:
            exit_code = ExitCode.ASSERTION
        elif flagged:
            exit_code = ExitCode.NOT_CONVERGED
        else:
            exit_code = ExitCode.OK

        table = [("eps", "h", "distinct", "energies", "barycenter_errors", "morse")]
        for entry in per_eps:
            certified = [(rec, info) for rec, info in entry["solutions"] if rec.certified]
            table.append((
                entry["eps"],
                entry["gap"].h,
                len(certified),
                [round(rec.energy, 10) for rec, _ in certified],
                [round(info.get("barycenter_error", float("nan")), 6) for _, info in certified],
                [rec.morse_index for rec, _ in certified],
            ))
        self._progress(progress_callback, 1.0, "Done!")
        return {
            "status": "completed" if exit_code == ExitCode.OK else "flagged",
            "exit_code": exit_code,
            "ground_state": gs,
            "cutoff_T": T,
            "per_eps": per_eps,
            "failures": failures,
            "high_energy": found,
            "records_path": writer.path,
            "table": table,
        }

    def _multiplicity_gates(
        self,
        per_eps: List[Dict[str, Any]],
        gs: AutonomousGroundState,
        wells: Sequence[Sequence[float]],
        resolution: float,
    ) -> List[str]:
        failures = []
        hs = [entry["gap"].h for entry in per_eps]
        if any(b >= a for a, b in zip(hs, hs[1:])):
            failures.append(f"h(eps) not strictly decreasing: {hs}")
        bump_errors = [entry["gap"].max_barycenter_error for entry in per_eps]
        if any(b > a + 1e-9 * resolution for a, b in zip(bump_errors, bump_errors[1:])):
            failures.append(f"bump barycenter errors increase: {bump_errors}")
        if bump_errors[-1] >= resolution:
            failures.append(f"bump barycenter error {bump_errors[-1]:.3e} exceeds {resolution:.3e}")

        last = per_eps[-1]
        h = last["gap"].h
        certified = [(rec, info) for rec, info in last["solutions"] if rec.certified]
        if len(certified) < len(wells):
            failures.append(f"{len(certified)} distinct certified solutions for {len(wells)} wells")
        for rec, info in certified:
            if rec.sign_class != SignClass.NEGATIVE or not rec.lam < 0:
                failures.append(f"solution from start {rec.start_index} is {rec.sign_class.value}, lambda {rec.lam:.3e}")
            if rec.energy > gs.energy + h + 1e-12 * abs(gs.energy):
                failures.append(f"energy {rec.energy:.10g} above E_gs + h = {gs.energy + h:.10g}")
            elif info.get("recentred_distance", 0.0) >= 0.1:
                failures.append(f"low-energy solution {info['recentred_distance']:.3f} away from the recentred profile")
        resolved = {info["well"] for rec, info in certified if info.get("barycenter_error", np.inf) < resolution}
        if len(resolved) < len(wells):
            failures.append(f"barycenters resolve {len(resolved)} of {len(wells)} wells")
        for msg in failures:
            logger.error(f"[Multiplicity] {msg}")
        return failures

    def _high_energy_search(
        self,
        P: Problem,
        gs: AutonomousGroundState,
        wells: Sequence[Sequence[float]],
        cut: CutoffSpec,
        known: List[SolutionRecord],
        cfg: RunConfig,
    ) -> List[SolutionRecord]:
        """Superpositions of the well bumps, minimized and filtered against known solutions."""
        rng = np.random.default_rng([self.seed, 7])
        bumps = [make_phi(P, gs, y, cut).values for y in wells]
        starts = [ScalarField(P.grid, sum(bumps))]
        for _ in range(cfg.experiment.high_energy_starts):
            weights = rng.uniform(0.3, 1.0, size=len(bumps))
            values = sum(w * b for w, b in zip(weights, bumps))
            noise = gaussian_mixture(P.grid, rng, width=1.0, spread=0.2, signed=False).values
            values = values + 0.05 * np.max(np.abs(values)) * noise
            starts.append(project_to_manifold(P, ScalarField(P.grid, values))[1])
        found = multi_start(P, starts, cfg.solver, threads=self.threads)
        certified_known = [r for r in known if r.certified]
        top = max((r.energy for r in certified_known), default=-np.inf)
        fresh = [
            r
            for r in found
            if r.certified
            and r.energy > top
            and not any(is_duplicate(r, k, cfg.solver.distinct_tol) for k in certified_known)
        ]
        for r in fresh:
            logger.info(f"[Multiplicity] Higher-energy solution: E={r.energy:.10g}, lambda={r.lam:.6g}")
        return fresh

    # --- verify -------------------------------------------------------------------------------

    def verify(
        self,
        cfg: RunConfig,
        out_dir: str,
        progress_callback: ProgressCallback = None,
        quick: bool = False,
        **_,
    ) -> Dict[str, Any]:
        self._progress(progress_callback, 0.1, "Running verification suite...")
        suite = VerificationSuite(
            seed=self.seed,
            quick=quick,
            corrupt_kernel=cfg.verify.corrupt_kernel,
            symmetrization_profiles=cfg.verify.symmetrization_profiles,
        )
        results = suite.run()
        writer = RecordWriter(out_dir)
        for r in results:
            writer.write_entry("check", name=r.name, passed=r.passed, detail=r.detail, seconds=r.seconds)
        ok = all(r.passed for r in results)
        self._progress(progress_callback, 1.0, "Done!")
        return {
            "status": "completed" if ok else "failed",
            "exit_code": ExitCode.OK if ok else ExitCode.VERIFY,
            "results": results,
            "records_path": writer.path,
            "table": [("check", "result", "seconds", "detail")]
            + [(r.name, "PASS" if r.passed else "FAIL", f"{r.seconds:.2f}", r.detail) for r in results],
        }
