"""
Numerical Morse index: smallest eigenvalues of the Lagrangian Hessian restricted to the
tangent space {v : <v, b> = 0} of the constraint, computed matrix-free.
"""
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Tuple
import logging
import warnings

import numpy as np
from scipy.sparse.linalg import LinearOperator, lobpcg

from app.config import settings
from app.errors import PreconditionError
from app.processors.energy import PotentialKind, Problem, constraint_parts, hessian_action
from app.processors.fields import spectral_derivative, solve_shifted_laplacian
from app.processors.optimizer import SolutionRecord

logger = logging.getLogger(__name__)

Apply = Callable[[np.ndarray], np.ndarray]

EIG_TOL_SCALE = 1e-6
TRANSLATION_OVERLAP = 0.5
TRANSLATION_SCALE = 1e-3


@dataclass
class SpectrumReport:
    eigenvalues: List[float]
    morse_index: int
    tol_eig: float
    norm_estimate: float
    residuals: List[float]
    may_exceed_k: bool
    partial: bool
    translation_modes: List[int] = field(default_factory=list)
    margin: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_norm(apply: Apply, size: int, iterations: int = 100, seed: Optional[int] = None) -> float:
    """Power iteration; returns |Rayleigh quotient| of the final iterate."""
    rng = np.random.default_rng(settings.SEED if seed is None else seed)
    v = rng.standard_normal(size)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(max(50, iterations)):
        w = apply(v)
        estimate = abs(float(np.dot(v, w)))
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
    return estimate


def smallest_eigenpairs(
    apply: Apply,
    size: int,
    k: int,
    tol: float,
    precondition: Optional[Apply] = None,
    constraint: Optional[np.ndarray] = None,
    max_iter: int = 400,
    seed: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    LOBPCG for the k smallest eigenpairs of a symmetric operator, optionally orthogonal
    to the columns of constraint. Returns (values ascending, unit vectors, residual norms);
    convergence is judged by the caller on the residual norms ||A x - theta x||.
    """
    rng = np.random.default_rng(settings.SEED if seed is None else seed)

    def matmat(X: np.ndarray) -> np.ndarray:
        X = X.reshape(size, -1)
        return np.column_stack([apply(X[:, j]) for j in range(X.shape[1])])

    A = LinearOperator((size, size), matvec=apply, matmat=matmat, dtype=np.float64)
    M = None
    if precondition is not None:
        M = LinearOperator(
            (size, size),
            matvec=precondition,
            matmat=lambda X: np.column_stack([precondition(X[:, j]) for j in range(X.shape[1])]),
            dtype=np.float64,
        )
    Y = None if constraint is None else constraint.reshape(size, -1)
    X0 = rng.standard_normal((size, k))

    with warnings.catch_warnings():
        # an unmet tolerance shows up in the returned residuals
        warnings.simplefilter("ignore", UserWarning)
        values, vectors = lobpcg(A, X0, M=M, Y=Y, tol=tol, maxiter=max_iter, largest=False)

    order = np.argsort(values)
    values = np.asarray(values)[order]
    vectors = np.asarray(vectors)[:, order]
    vectors /= np.linalg.norm(vectors, axis=0)
    residuals = np.array(
        [np.linalg.norm(apply(vectors[:, j]) - values[j] * vectors[:, j]) for j in range(values.size)]
    )
    return values, vectors, residuals


class TangentHessian:
    """v -> Pi H Pi v on flattened arrays, Pi the L2 projection orthogonal to b."""

    def __init__(self, P: Problem, rec: SolutionRecord):
        self.P = P
        self.shape = P.grid.shape
        self.u = P.check(rec.u)
        self.lam = rec.lam
        self.phi, b, _ = constraint_parts(P, self.u)
        self.b = b.reshape(-1) / np.linalg.norm(b)
        self.size = P.grid.size

    def project(self, v: np.ndarray) -> np.ndarray:
        return v - np.dot(self.b, v) * self.b

    def __call__(self, v: np.ndarray) -> np.ndarray:
        w = self.project(np.ravel(v)).reshape(self.shape)
        Hw = hessian_action(self.P, self.u, self.phi, self.lam, w)
        return self.project(Hw.reshape(-1))

    def precondition(self, v: np.ndarray) -> np.ndarray:
        w = solve_shifted_laplacian(self.P.grid, self.project(np.ravel(v)).reshape(self.shape), self.P.V0)
        return self.project(w.reshape(-1))

    def translation_basis(self) -> np.ndarray:
        cols = [
            self.project(spectral_derivative(self.P.grid, self.u, axis).reshape(-1)) for axis in range(3)
        ]
        Q, _ = np.linalg.qr(np.column_stack(cols))
        return Q


def operator_norm_estimate(P: Problem, rec: SolutionRecord, iterations: int = 100) -> float:
    if not rec.certified:
        raise PreconditionError("Operator norm needs a certified critical point")
    op = TangentHessian(P, rec)
    return estimate_norm(op, op.size, iterations)


def morse_index(P: Problem, rec: SolutionRecord, k: int = 8, max_iter: int = 400) -> SpectrumReport:
    if not rec.certified:
        raise PreconditionError(
            f"Morse index needs a certified record (residual {rec.residual:.3e}, status {rec.status})"
        )

    op = TangentHessian(P, rec)
    norm_est = estimate_norm(op, op.size)
    tol_eig = EIG_TOL_SCALE * norm_est

    # two extra vectors keep the requested k away from the block edge
    block = min(k + 2, op.size // 5)
    values, vectors, residuals = smallest_eigenpairs(
        op,
        op.size,
        block,
        tol=0.5 * tol_eig,
        precondition=op.precondition,
        constraint=op.b,
        max_iter=max_iter,
    )
    values, vectors = values[:k], vectors[:, :k]
    residuals = [float(r) for r in residuals[:k]]
    partial = any(r > tol_eig for r in residuals)

    translations: List[int] = []
    if P.potential.kind == PotentialKind.CONSTANT:
        basis = op.translation_basis()
        for i in range(values.size):
            overlap = float(np.sum((basis.T @ vectors[:, i]) ** 2))
            if overlap >= TRANSLATION_OVERLAP and abs(values[i]) <= TRANSLATION_SCALE * norm_est:
                translations.append(i)

    counted = [i for i in range(values.size) if i not in translations]
    index = sum(1 for i in counted if values[i] < -tol_eig)
    margin = min((abs(float(values[i])) for i in counted), default=float("nan"))
    report = SpectrumReport(
        eigenvalues=[float(x) for x in values],
        morse_index=index,
        tol_eig=tol_eig,
        norm_estimate=norm_est,
        residuals=residuals,
        may_exceed_k=bool(values.size and values[-1] < -tol_eig),
        partial=partial,
        translation_modes=translations,
        margin=margin,
    )
    if partial:
        logger.warning(f"[Morse] Partial spectrum: max eigen-residual {max(residuals):.3e}, tol {tol_eig:.3e}")
    logger.info(f"[Morse] index={index}, smallest={report.eigenvalues[:3]}, margin={margin:.3e}")
    return report
