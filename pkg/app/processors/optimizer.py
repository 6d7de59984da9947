"""
Projected gradient descent on the constraint manifold {G(u) = c}.

Each step moves along the tangent-projected (optionally preconditioned) gradient and
re-projects by exact scaling. The line search works on the exact quartic G(u - s p),
so trial steps cost no convolutions.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple
import logging
import math

import numpy as np
from tqdm import tqdm

from app.config import SolveConfig, settings
from app.errors import DegenerateInputError
from app.processors.energy import (
    Problem,
    SignClass,
    VariationalModel,
    classify_sign,
    constraint_parts,
)
from app.processors.fields import ScalarField

logger = logging.getLogger(__name__)

NORM_EXPONENT = 12.0 / 5.0
TINY_CONSTRAINT = 1e-14
MIN_NORM_RATIO = 0.5
EPS = float(np.finfo(np.float64).eps)
# energy changes below ROUNDING_FLOOR * eps * (|E| + Q) are not resolvable
ROUNDING_FLOOR = 1e3


@dataclass
class DescentResult:
    u: np.ndarray
    lam: float
    energy: float
    constraint: float
    residual: float
    gradient_norm: float
    iterations: int
    converged: bool
    status: str
    energy_trace: List[float]
    min_norm_ratio: float


@dataclass
class SolutionRecord:
    u: ScalarField
    lam: float
    energy: float
    constraint: float
    residual: float
    barycenter: Tuple[float, float, float]
    sign_class: SignClass
    iterations: int
    converged: bool
    c: float
    tol: float
    gradient_norm: float = float("nan")
    morse_index: Optional[int] = None
    spectrum: Optional[Dict[str, Any]] = None
    energy_trace: List[float] = field(default_factory=list)
    min_norm_ratio: float = float("nan")
    start_index: Optional[int] = None
    status: str = "converged"
    error: Optional[str] = None

    @property
    def certified(self) -> bool:
        if self.error is not None or not self.converged:
            return False
        return self.residual <= self.tol * max(1.0, self.gradient_norm)

    def violations(self) -> List[str]:
        """Record invariants that fail; empty for a valid certified solution."""
        if self.error is not None:
            return [f"error: {self.error}"]
        out = []
        if not self.certified:
            out.append(f"residual {self.residual:.3e} not certified (status {self.status})")
        if not abs(self.constraint - self.c) <= 1e-8 * self.c:
            out.append(f"constraint {self.constraint!r} differs from c={self.c}")
        if not self.lam < 0:
            out.append(f"multiplier {self.lam!r} is not negative")
        if not self.energy > 0:
            out.append(f"energy {self.energy!r} is not positive")
        if math.isfinite(self.min_norm_ratio) and self.min_norm_ratio < MIN_NORM_RATIO:
            out.append(f"L^{{12/5}} norm fell to {self.min_norm_ratio:.3f} of its start value")
        return out


def _lp(model: VariationalModel, u: np.ndarray) -> float:
    return model.integrate(np.abs(u) ** NORM_EXPONENT) ** (1.0 / NORM_EXPONENT)


def tangent_direction(model: VariationalModel, g: np.ndarray, b: np.ndarray, precondition: bool = True) -> np.ndarray:
    """
    Projects the (preconditioned) gradient onto {<p, b> = 0} along M^{-1} b, so that
    <g, p> >= 0 holds in the preconditioned metric.
    """
    if precondition:
        d = model.precondition(g)
        Mb = model.precondition(b)
    else:
        d = g
        Mb = b
    return d - (model.inner(d, b) / model.inner(Mb, b)) * Mb


def _residual(model: VariationalModel, u: np.ndarray, b: np.ndarray, G: float) -> Tuple[np.ndarray, float, np.ndarray]:
    """Returns (g, lambda, g + lambda b) at a point with known constraint parts."""
    g = model.apply_linear(u) + model.f.f(u)
    lam = -model.inner(g, u) / G
    return g, lam, g + lam * b


def _merit(model: VariationalModel, r: np.ndarray, precondition: bool) -> float:
    return model.inner(r, model.precondition(r) if precondition else r)


def _reproject(model: VariationalModel, w: np.ndarray, c: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    phi_w, b_w, G_w = constraint_parts(model, w)
    t = (c / G_w) ** 0.25
    return t * w, t * t * phi_w, t ** 3 * b_w, t ** 4 * G_w


def stationarity(model: VariationalModel, u: np.ndarray) -> Tuple[float, float, float]:
    """(lambda, ||g + lambda b||, ||g||) of an arbitrary nonzero field."""
    _, b, G = constraint_parts(model, u)
    if not G > 0:
        raise DegenerateInputError("Stationarity needs G(u) > 0")
    g, lam, r = _residual(model, u, b, G)
    return lam, math.sqrt(max(model.inner(r, r), 0.0)), math.sqrt(max(model.inner(g, g), 0.0))


def descend(model: VariationalModel, u0: np.ndarray, cfg: SolveConfig) -> DescentResult:
    """
    Runs the manifold descent on raw arrays of any VariationalModel.
    Returns a DescentResult; non-convergence is reported through status, never raised.

    Steps are accepted by the Armijo rule while the predicted decrease s * slope is
    resolvable in floating point. Below that floor the energy test is meaningless and
    a step is accepted when it lowers the (preconditioned) residual instead.
    """
    f = model.f
    c = model.c
    u = np.array(u0, dtype=np.float64, copy=True)

    phi, b, G = constraint_parts(model, u)
    if not G > 0:
        raise DegenerateInputError("Descent start has G(u) = 0")
    u *= (c / G) ** 0.25
    phi, b, G = constraint_parts(model, u)

    Au = model.apply_linear(u)
    Qu = 0.5 * model.inner(Au, u)
    E = Qu + model.integrate(f.F(u))
    trace = [E]
    norm0 = _lp(model, u)
    min_ratio = 1.0

    status = "max_iter"
    converged = False
    iterations = 0
    residual_steps = 0
    lam = res = gnorm = float("nan")

    while True:
        g, lam, r = _residual(model, u, b, G)
        res = math.sqrt(max(model.inner(r, r), 0.0))
        gnorm = math.sqrt(max(model.inner(g, g), 0.0))
        if res <= cfg.tol_residual * max(1.0, gnorm):
            converged = True
            status = "converged"
            break
        if iterations >= cfg.max_iter:
            break

        p = tangent_direction(model, g, b, cfg.precondition)
        slope = model.inner(g, p)
        if not slope > 0:
            status = "stalled"
            break

        # G(u - s p) = G + c1 s + c2 s^2 + c3 s^3 + c4 s^4
        up = u * p
        pp = p * p
        K_up = model.convolve(up)
        K_pp = model.convolve(pp)
        c1 = -4.0 * model.inner(phi, up)
        c2 = 4.0 * model.inner(K_up, up) + 2.0 * model.inner(phi, pp)
        c3 = -4.0 * model.inner(K_up, pp)
        c4 = model.inner(K_pp, pp)
        Ap = model.apply_linear(p)
        Au_p = model.inner(Au, p)
        Ap_p = model.inner(Ap, p)

        floor = ROUNDING_FLOOR * EPS * (abs(E) + abs(Qu))
        merit = None
        moved = None
        dE = 0.0
        s = cfg.step_init
        accepted = False
        while s >= cfg.step_min:
            if s * slope <= floor:
                if merit is None:
                    merit = _merit(model, r, cfg.precondition)
                trial = _reproject(model, u - s * p, c)
                _, _, r_trial = _residual(model, trial[0], trial[2], trial[3])
                if _merit(model, r_trial, cfg.precondition) < merit:
                    moved = trial
                    accepted = True
                    break
                s *= cfg.step_shrink
                continue
            tail = s * (c1 + s * (c2 + s * (c3 + s * c4)))
            Gs = G + tail
            if Gs <= TINY_CONSTRAINT * G:
                s *= cfg.step_shrink
                continue
            x = ((c - G) - tail) / Gs
            t2m1 = x / (math.sqrt(1.0 + x) + 1.0)
            t = math.sqrt(1.0 + t2m1)
            tm1 = t2m1 / (t + 1.0)
            dQw = -s * Au_p + 0.5 * s * s * Ap_p
            dQ = t2m1 * (Qu + dQw) + dQw
            delta = tm1 * u - t * s * p
            dE = dQ + model.integrate(f.F_increment(u, delta))
            if dE <= -cfg.armijo_c * s * slope:
                accepted = True
                break
            s *= cfg.step_shrink

        if not accepted:
            status = "stalled"
            break

        u, phi, b, G = moved if moved is not None else _reproject(model, u - s * p, c)
        Au = model.apply_linear(u)
        Qu = 0.5 * model.inner(Au, u)
        E_new = Qu + model.integrate(f.F(u))
        if moved is not None:
            # change below rounding; the trace records it as no increase
            residual_steps += 1
            dE = min(E_new - E, 0.0)
        E = E_new
        trace.append(trace[-1] + dE)
        iterations += 1
        if norm0 > 0:
            min_ratio = min(min_ratio, _lp(model, u) / norm0)

    if not converged:
        logger.warning(
            f"[Optimizer] Stopped ({status}) after {iterations} iterations, residual {res:.3e}"
        )
    else:
        logger.debug(
            f"[Optimizer] Converged in {iterations} iterations "
            f"({residual_steps} past the energy floor), residual {res:.3e}"
        )

    return DescentResult(
        u=u,
        lam=lam,
        energy=E,
        constraint=G,
        residual=res,
        gradient_norm=gnorm,
        iterations=iterations,
        converged=converged,
        status=status,
        energy_trace=trace,
        min_norm_ratio=min_ratio,
    )


def minimize(P: Problem, u0: ScalarField, cfg: SolveConfig) -> SolutionRecord:
    from app.processors.concentration import barycenter

    start = P.check(u0)
    result = descend(P, start, cfg)
    u = u0.with_values(result.u)
    return SolutionRecord(
        u=u,
        lam=result.lam,
        energy=result.energy,
        constraint=result.constraint,
        residual=result.residual,
        barycenter=barycenter(u, P.eps, P.barycenter_radius),
        sign_class=classify_sign(result.u, P.f, tol=cfg.sign_tol),
        iterations=result.iterations,
        converged=result.converged,
        c=P.c,
        tol=cfg.tol_residual,
        gradient_norm=result.gradient_norm,
        energy_trace=result.energy_trace,
        min_norm_ratio=result.min_norm_ratio,
        status=result.status,
    )


def failed_record(P: Problem, start: ScalarField, index: int, error: Exception) -> SolutionRecord:
    nan = float("nan")
    return SolutionRecord(
        u=start,
        lam=nan,
        energy=nan,
        constraint=nan,
        residual=nan,
        barycenter=(nan, nan, nan),
        sign_class=SignClass.ZERO,
        iterations=0,
        converged=False,
        c=P.c,
        tol=nan,
        start_index=index,
        status="failed",
        error=f"{type(error).__name__}: {error}",
    )


def relative_distance(a: ScalarField, b: ScalarField) -> float:
    diff = np.linalg.norm(a.values - b.values)
    scale = max(np.linalg.norm(a.values), np.linalg.norm(b.values))
    return float(diff / scale) if scale > 0 else 0.0


def is_duplicate(a: SolutionRecord, b: SolutionRecord, tol: float) -> bool:
    if relative_distance(a.u, b.u) >= tol:
        return False
    return abs(a.lam - b.lam) < tol * abs(a.lam)


def canonical_key(rec: SolutionRecord) -> Tuple[int, float, float, int]:
    if rec.error is not None:
        return (1, 0.0, 0.0, rec.start_index or 0)
    return (0, rec.energy, rec.lam, rec.start_index or 0)


def deduplicate(records: List[SolutionRecord], tol: float) -> List[SolutionRecord]:
    kept: List[SolutionRecord] = []
    for rec in sorted(records, key=canonical_key):
        if rec.error is None and any(k.error is None and is_duplicate(rec, k, tol) for k in kept):
            continue
        kept.append(rec)
    return kept


def multi_start(
    P: Problem,
    starts: List[ScalarField],
    cfg: SolveConfig,
    threads: Optional[int] = None,
    progress: bool = True,
) -> List[SolutionRecord]:
    """
    Minimizes from every start in parallel; failed starts come back as flagged records.
    Output is deduplicated and sorted by (energy, lambda), independent of scheduling.
    """
    if not starts:
        return []

    workers = threads or settings.THREADS
    records: List[Optional[SolutionRecord]] = [None] * len(starts)

    def solve_one(index: int) -> SolutionRecord:
        try:
            rec = minimize(P, starts[index], cfg)
        except Exception as e:
            logger.error(f"[Optimizer] Start {index} failed: {e}")
            return failed_record(P, starts[index], index, e)
        rec.start_index = index
        return rec

    with tqdm(total=len(starts), desc="Multi-start", unit="start", colour="green", disable=not progress) as pbar:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = {}
            for i in range(len(starts)):
                future = executor.submit(solve_one, i)
                future.add_done_callback(lambda _: pbar.update(1))
                futures[future] = i
            for future, i in futures.items():
                records[i] = future.result()

    distinct = deduplicate([r for r in records if r is not None], cfg.distinct_tol)
    logger.info(f"[Optimizer] {len(starts)} starts gave {len(distinct)} distinct records")
    return distinct
