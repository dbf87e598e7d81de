"""
Linearized monotonicity tests, threshold selection and the box-wise
reconstruction loop.

For a test box B the test matrix is
    T = L0 + Λ'[α₁χ_B, α₂χ_B, rho_sign·α₃χ_B] - Lmeas
and B is accepted when few eigenvalues of T lie below -δ.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, field_validator
from scipy import linalg

from . import fem, settings
from .errors import DimensionError, InsufficientDataError, InvalidMatrixError, NoGapError, ResonanceError
from .fem import DisplacementField, FrequencyConfig, MaterialField
from .mesh import Box, Mesh, RegionMask, TestInclusionGrid, outer_support_completion
from .ntd import FrechetKernel, LoadBasis, NtDMatrix, ntd_matrix_with_solutions

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_FACTORS = (1e-3, 1e-2, 1e-1)
INSIDE, OUTSIDE = 'inside', 'outside'


class TestParameters(BaseModel):
    """
    alpha in (Pa, Pa, kg/m³); delta in NtD spectral-norm units.
    A box passes when its count is <= M_l; M_l None means pick it from the
    count gap (select_threshold).
    """
    __test__ = False

    alpha: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    delta: float = 0.0
    M_l: Optional[int] = None
    rho_sign: int = -1

    @field_validator('alpha')
    @classmethod
    def _alpha_nonnegative(cls, v):
        if any(a < 0 or not math.isfinite(a) for a in v):
            raise ValueError(f"alpha components must be finite and >= 0, got {v}")
        return v

    @field_validator('delta')
    @classmethod
    def _delta_nonnegative(cls, v):
        if v < 0 or not math.isfinite(v):
            raise ValueError(f"delta must be finite and >= 0, got {v}")
        return v

    @field_validator('M_l')
    @classmethod
    def _ml_nonnegative(cls, v):
        if v is not None and v < 0:
            raise ValueError(f"M_l must be >= 0, got {v}")
        return v

    @field_validator('rho_sign')
    @classmethod
    def _sign(cls, v):
        if v not in (-1, 1):
            raise ValueError(f"rho_sign must be +1 or -1, got {v}")
        return v


@dataclass
class TestOutcome:
    __test__ = False

    box_id: int
    negative_count: int
    eigenvalues: List[float]
    decision: str
    alpha: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    null_data: bool = False


@dataclass
class AssumptionReport:
    lhs: float
    rhs: float
    holds: bool

    @property
    def ratio(self) -> float:
        if self.rhs == 0:
            return math.inf if self.lhs > 0 else math.nan
        return self.lhs / self.rhs


@dataclass
class ReconstructionResult:
    outcomes: List[TestOutcome]
    accepted: List[int]
    completed_mask: RegionMask
    parameters: TestParameters
    omega: float
    threshold: int
    alpha_sweep: List[Tuple[float, float, float]] = field(default_factory=list)
    null_data: bool = False
    assumption: Optional[AssumptionReport] = None
    sweep_counts: List[List[int]] = field(default_factory=list)
    no_gap: bool = False


@dataclass
class MonotonicityReport:
    """Per-load sides of an NtD monotonicity inequality; slack < -tol is a violation."""
    lhs: np.ndarray
    rhs: np.ndarray
    slack: np.ndarray
    tolerance: np.ndarray

    @property
    def violations(self) -> List[int]:
        return [int(k) for k in np.flatnonzero(self.slack < -self.tolerance)]


def _check_matrix(matrix) -> np.ndarray:
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidMatrixError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidMatrixError('matrix has non-finite entries')
    return 0.5 * (A + A.T)


def count_negative_eigenvalues(matrix, threshold: float = 0.0) -> Tuple[int, np.ndarray]:
    """Number of eigenvalues strictly below -threshold, and all eigenvalues ascending."""
    A = _check_matrix(matrix)
    if A.size == 0:
        return 0, np.zeros(0)
    eigenvalues = linalg.eigvalsh(A)
    return int(np.sum(eigenvalues < -threshold)), eigenvalues


def inertia_count(matrix, threshold: float = 0.0) -> int:
    """
    Same count via Sylvester inertia: negative eigenvalues of the block
    diagonal factor of LDLᵀ(A + threshold·I).
    """
    A = _check_matrix(matrix)
    if A.size == 0:
        return 0
    _, D, _ = linalg.ldl(A + threshold * np.eye(len(A)))
    count, k, n = 0, 0, len(D)
    while k < n:
        if k < n - 1 and D[k, k + 1] != 0:
            count += int(np.sum(linalg.eigvalsh(D[k:k + 2, k:k + 2]) < 0))
            k += 2
        else:
            count += int(D[k, k] < 0)
            k += 1
    return count


def _check_consistent(L0: NtDMatrix, Lmeas: NtDMatrix, kernel: FrechetKernel):
    if L0.size != Lmeas.size or L0.size != kernel.size:
        raise DimensionError(
            f"basis mismatch: L0 {L0.size}, Lmeas {Lmeas.size}, background solutions {kernel.size}"
        )
    if not math.isclose(L0.omega, Lmeas.omega, rel_tol=1e-9):
        logger.warning(f"L0 omega={L0.omega:.6g} and Lmeas omega={Lmeas.omega:.6g} differ")


def is_null_data(L0: NtDMatrix, Lmeas: NtDMatrix, delta: float) -> bool:
    """Measured data indistinguishable from the background at noise level delta."""
    diff = np.linalg.norm(Lmeas.entries - L0.entries, 2)
    return bool(diff <= max(delta, 1e-14 * L0.norm))


def _box_mask(kernel: FrechetKernel, box: Union[Box, RegionMask]) -> RegionMask:
    return kernel.mesh.aligned_box_mask(box) if isinstance(box, Box) else box


def _count_for_alpha(kernel: FrechetKernel, mask: RegionMask, L0: NtDMatrix, Lmeas: NtDMatrix,
                     alpha, rho_sign: int, delta: float, omega: float):
    a1, a2, a3 = alpha
    F = kernel.directional(mask, a1, a2, rho_sign * a3, omega)
    return count_negative_eigenvalues(L0.entries + F - Lmeas.entries, delta)


def monotonicity_test(box: Union[Box, RegionMask], L0: NtDMatrix, Lmeas: NtDMatrix,
                      background_solutions: Sequence[DisplacementField], params: TestParameters,
                      freq: FrequencyConfig, box_id: int = 0,
                      kernel: Optional[FrechetKernel] = None) -> TestOutcome:
    """Inside iff the count is <= params.M_l (0 when M_l is unset)."""
    kernel = kernel or FrechetKernel(background_solutions)
    _check_consistent(L0, Lmeas, kernel)
    mask = _box_mask(kernel, box)
    count, eigenvalues = _count_for_alpha(kernel, mask, L0, Lmeas, params.alpha, params.rho_sign,
                                          params.delta, freq.omega)
    limit = params.M_l if params.M_l is not None else 0
    return TestOutcome(
        box_id=box_id,
        negative_count=count,
        eigenvalues=[float(x) for x in eigenvalues],
        decision=INSIDE if count <= limit else OUTSIDE,
        alpha=tuple(params.alpha),
        null_data=is_null_data(L0, Lmeas, params.delta),
    )


def select_threshold(counts: Sequence[int]) -> int:
    """Top of the low cluster: the count just below the largest gap in the sorted counts."""
    if len(counts) < 2:
        raise InsufficientDataError('threshold selection needs at least two boxes')
    ordered = np.sort(np.asarray(counts, dtype=int))
    gaps = np.diff(ordered)
    if gaps.max() == 0:
        raise NoGapError(f"all counts equal {int(ordered[0])}; supply M_l explicitly")
    # argmax returns the first maximum, i.e. the smaller threshold on ties
    return int(ordered[int(np.argmax(gaps))])


def check_assumption(background_solutions: Sequence[DisplacementField], materials_true: MaterialField,
                     materials_background: MaterialField, freq: FrequencyConfig,
                     kernel: Optional[FrechetKernel] = None) -> AssumptionReport:
    """
    lhs = Σ_g ∫ 2(μ-μ₀)|ε(u₀)|² + (λ-λ₀)|∇·u₀|², rhs = Σ_g ∫ ω²(ρ-ρ₀)|u₀|².
    """
    kernel = kernel or FrechetKernel(background_solutions)
    d_lam = materials_true.lam - materials_background.lam
    d_mu = materials_true.mu - materials_background.mu
    d_rho = materials_true.rho - materials_background.rho
    trace = lambda P: np.trace(P, axis1=1, axis2=2)
    lhs = float(d_mu @ trace(kernel.P_mu) + d_lam @ trace(kernel.P_lam))
    rhs = float(freq.omega ** 2 * (d_rho @ trace(kernel.P_rho)))
    report = AssumptionReport(lhs=lhs, rhs=rhs, holds=lhs > rhs)
    logger.info(f"assumption omega={freq.omega:.6g} lhs={lhs:.3e} rhs={rhs:.3e} holds={report.holds}")
    return report


def assumption_failure_frequency(mesh: Mesh, materials_true: MaterialField,
                                 materials_background: MaterialField, basis: LoadBasis,
                                 f_min_hz: float = 20.0, f_max_hz: float = 1000.0,
                                 n_scan: int = 40, bisection_steps: int = 12) -> Optional[float]:
    """
    Lowest frequency (Hz) where the assumption stops holding: a geometric scan
    over [f_min_hz, f_max_hz] followed by bisection. Resonant scan points are
    skipped. None when it holds over the whole range.
    """
    def holds_at(f_hz: float) -> Optional[bool]:
        freq = FrequencyConfig(value=f_hz, interpret_hz=True)
        try:
            _, solutions = ntd_matrix_with_solutions(mesh, materials_background, freq, basis)
        except ResonanceError:
            logger.warning(f"assumption scan skips resonant f={f_hz:.4g} Hz")
            return None
        return check_assumption(solutions, materials_true, materials_background, freq).holds

    last_ok, first_bad = None, None
    for f in np.geomspace(f_min_hz, f_max_hz, n_scan):
        state = holds_at(float(f))
        if state is None:
            continue
        if state:
            last_ok = float(f)
        else:
            first_bad = float(f)
            break
    if first_bad is None:
        return None
    if last_ok is None:
        return first_bad

    lo, hi = last_ok, first_bad
    for _ in range(bisection_steps):
        mid = math.sqrt(lo * hi)
        state = holds_at(mid)
        if state is None:
            break
        lo, hi = (mid, hi) if state else (lo, mid)
    logger.info(f"assumption failure frequency ~{hi:.4g} Hz")
    return hi


def default_alpha_sweep(background: Tuple[float, float, float], inclusion: Tuple[float, float, float],
                        factors: Sequence[float] = DEFAULT_ALPHA_FACTORS) -> List[Tuple[float, float, float]]:
    """α₁ = α₂ = f·|λ₁-λ₀|, α₃ = f·|ρ₁-ρ₀| for each factor f."""
    d_lam = abs(inclusion[0] - background[0])
    d_rho = abs(inclusion[2] - background[2])
    return [(f * d_lam, f * d_lam, f * d_rho) for f in factors]


def _member_separation(counts: Sequence[int], threshold: int) -> Optional[int]:
    """min(high) - max(low) around threshold, None when either side is empty."""
    low = [c for c in counts if c <= threshold]
    high = [c for c in counts if c > threshold]
    if not low or not high:
        return None
    return min(high) - max(low)


def choose_sweep_member(per_member_counts: Sequence[Sequence[int]], sweep: Sequence[Tuple[float, float, float]],
                        M_l: Optional[int]) -> Tuple[Optional[int], Optional[int]]:
    """
    Index of the sweep member whose counts separate best, and its threshold.

    Each member is thresholded on its own (M_l, or select_threshold of its
    counts). Members that leave every box on one side are uninformative.
    Ties go to the larger α. Returns (None, None) when no member separates
    and M_l is unset; with an explicit M_l the largest α is used instead.
    """
    best, best_key = None, None
    for j, counts in enumerate(per_member_counts):
        if M_l is not None:
            threshold = M_l
        else:
            try:
                threshold = select_threshold(counts)
            except NoGapError:
                continue
        separation = _member_separation(counts, threshold)
        if separation is None:
            continue
        key = (separation, float(np.linalg.norm(sweep[j])))
        if best_key is None or key > best_key:
            best, best_key = (j, threshold), key
    if best is not None:
        return best
    if M_l is None:
        return None, None
    largest = max(range(len(sweep)), key=lambda j: float(np.linalg.norm(sweep[j])))
    return largest, M_l


def reconstruct(grid: TestInclusionGrid, L0: NtDMatrix, Lmeas: NtDMatrix,
                background_solutions: Sequence[DisplacementField], params: TestParameters,
                freq: FrequencyConfig,
                alpha_sweep: Optional[Sequence[Tuple[float, float, float]]] = None,
                assumption: Optional[AssumptionReport] = None,
                workers: Optional[int] = None) -> ReconstructionResult:
    """
    Test every grid box for every α in the sweep. The member whose counts
    separate best (choose_sweep_member) decides: a box is accepted when its
    count under that α is strictly below M̃_l = M_l + 1. The union of accepted
    boxes is completed to its outer support. Without a count gap and with
    M_l unset nothing is accepted and no_gap is set.
    """
    sweep = [tuple(a) for a in (alpha_sweep or [params.alpha])]
    if assumption is not None and not assumption.holds:
        logger.warning(f"assumption does not hold (lhs={assumption.lhs:.3e} rhs={assumption.rhs:.3e}); proceeding")
    if len(grid) == 0:
        mask = RegionMask(np.zeros(background_solutions[0].mesh.n_elements, dtype=bool)) \
            if background_solutions else RegionMask(np.zeros(0, dtype=bool))
        return ReconstructionResult([], [], mask, params, freq.omega, (params.M_l or 0) + 1, sweep)

    kernel = FrechetKernel(background_solutions)
    _check_consistent(L0, Lmeas, kernel)
    masks = [_box_mask(kernel, box) for box in grid.boxes]

    def counts_for_box(k: int):
        return [
            _count_for_alpha(kernel, masks[k], L0, Lmeas, alpha, params.rho_sign, params.delta, freq.omega)
            for alpha in sweep
        ]

    workers = settings.WORKERS if workers is None else workers
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_box = list(pool.map(counts_for_box, range(len(grid))))

    # sweep_counts[j][k]: count of box k under sweep member j
    sweep_counts = [[per_box[k][j][0] for k in range(len(grid))] for j in range(len(sweep))]
    member, M_l = choose_sweep_member(sweep_counts, sweep, params.M_l)
    no_gap = member is None
    if no_gap:
        logger.warning(f"no sweep member separates the counts at omega={freq.omega:.6g}; accepting no box")
        member = max(range(len(sweep)), key=lambda j: float(np.linalg.norm(sweep[j])))
    null_data = is_null_data(L0, Lmeas, params.delta)
    if null_data:
        logger.warning('measured NtD matrix equals the background within delta; decisions are degenerate')

    alpha = sweep[member]
    strict = M_l + 1 if M_l is not None else 0
    outcomes, accepted = [], []
    union = np.zeros(kernel.mesh.n_elements, dtype=bool)
    for k in range(len(grid)):
        count, eigenvalues = per_box[k][member]
        inside = count < strict
        outcomes.append(TestOutcome(k, count, [float(x) for x in eigenvalues],
                                    INSIDE if inside else OUTSIDE, alpha, null_data))
        if inside:
            accepted.append(k)
            union |= masks[k].flags

    completed = outer_support_completion(RegionMask(union), kernel.mesh)
    logger.info(f"reconstruct omega={freq.omega:.6g} boxes={len(grid)} alpha={alpha} M_l={M_l} accepted={accepted}")
    return ReconstructionResult(
        outcomes=outcomes,
        accepted=accepted,
        completed_mask=completed,
        parameters=params.model_copy(update={'M_l': M_l, 'alpha': alpha}),
        omega=freq.omega,
        threshold=strict,
        alpha_sweep=sweep,
        null_data=null_data,
        assumption=assumption,
        sweep_counts=sweep_counts,
        no_gap=no_gap,
    )


def _solve_set(mesh: Mesh, materials: MaterialField, freq: FrequencyConfig, basis: LoadBasis, tag: str):
    return ntd_matrix_with_solutions(mesh, materials, freq, basis, tag)


def _side_tolerance(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return 1e-8 * np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), np.finfo(float).tiny)


def _diag_pairing(solutions: Sequence[DisplacementField], d_lam, d_mu, d_rho, omega: float,
                  mass_extra: Optional[Sequence[DisplacementField]] = None,
                  rho_extra: Optional[np.ndarray] = None) -> np.ndarray:
    kernel = FrechetKernel(solutions)
    diag = lambda P: np.einsum('eii->ei', P)
    value = d_mu @ diag(kernel.P_mu) + d_lam @ diag(kernel.P_lam) + omega ** 2 * (d_rho @ diag(kernel.P_rho))
    if mass_extra is not None:
        extra = FrechetKernel(mass_extra)
        value = value + omega ** 2 * (rho_extra @ diag(extra.P_rho))
    return value


def verify_monotonicity_lower(mesh: Mesh, materials1: MaterialField, materials2: MaterialField,
                              freq: FrequencyConfig, basis: LoadBasis) -> MonotonicityReport:
    """
    gᵀ(L2 - L1)g >= ∫ 2(μ₁-μ₂)|ε(u₁)|² + (λ₁-λ₂)|∇·u₁|² + ω²(ρ₂-ρ₁)|u₁|² per basis load.
    """
    L1, u1 = _solve_set(mesh, materials1, freq, basis, 'materials1')
    L2, _ = _solve_set(mesh, materials2, freq, basis, 'materials2')
    lhs = np.diag(L2.entries - L1.entries)
    rhs = _diag_pairing(u1, materials1.lam - materials2.lam, materials1.mu - materials2.mu,
                        materials2.rho - materials1.rho, freq.omega)
    report = MonotonicityReport(lhs, rhs, lhs - rhs, _side_tolerance(lhs, rhs))
    logger.info(f"monotonicity lower omega={freq.omega:.6g} violations={report.violations}")
    return report


def verify_monotonicity_upper(mesh: Mesh, materials1: MaterialField, materials2: MaterialField,
                              freq: FrequencyConfig, basis: LoadBasis) -> MonotonicityReport:
    """
    gᵀ(L2 - L1)g <= ∫ 2(μ₁-μ₂)|ε(u₂)|² + (λ₁-λ₂)|∇·u₂|² + ω²(ρ₂-ρ₁)|u₂|²
                    + ω² ∫ ρ₁|u₁-u₂|² per basis load.
    """
    L1, u1 = _solve_set(mesh, materials1, freq, basis, 'materials1')
    L2, u2 = _solve_set(mesh, materials2, freq, basis, 'materials2')
    lhs = np.diag(L2.entries - L1.entries)
    diffs = [fem.DisplacementField(mesh, a.values - b.values) for a, b in zip(u1, u2)]
    rhs = _diag_pairing(u2, materials1.lam - materials2.lam, materials1.mu - materials2.mu,
                        materials2.rho - materials1.rho, freq.omega,
                        mass_extra=diffs, rho_extra=materials1.rho)
    report = MonotonicityReport(lhs, rhs, rhs - lhs, _side_tolerance(lhs, rhs))
    logger.info(f"monotonicity upper omega={freq.omega:.6g} violations={report.violations}")
    return report
