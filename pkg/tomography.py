"""
Tomography - qutrit state and qubit process reconstruction

Covers:
- The nine-element qutrit rotation set and its 81 two-qutrit pairs
- Simulated tomography records sampled through the readout model
- Readout mitigation of records
- Maximum-likelihood state estimation (triangular factor, L-BFGS-B)
- Maximum-likelihood qubit process estimation via the Choi matrix
- Transfer and Bell-state figures of merit

Rotation convention: R_n(theta) = exp(-i theta sigma_n / 2) on a two-level
block, third level untouched. Composite names read right to left, so
'ef_x90*ge_x180' applies the ge pi pulse first.
"""

import logging
from dataclasses import dataclass, replace
from itertools import product
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize

from errors import DimensionError, DomainError, EstimationError
from quantum_core import (DensityMatrix, HilbertSpace, bell_psi_plus, clip_to_physical, concurrence,
                          mutually_unbiased_states, pauli_basis, pauli_expectations, qutrit_rotation,
                          state_fidelity)
from readout_sim import (AssignmentMatrix, TriModalModel, classify_many, expected_assignment_matrix,
                         joint_matrix, mitigate, sample_shots)

logger = logging.getLogger(__name__)

DEFAULT_SHOTS = 4000
LIKELIHOOD_TOLERANCE = 1e-10
MAX_ITERATIONS = 10_000
CONSISTENCY_TOLERANCE = 1e-10
QUBIT_BLOCK = (0, 1, 3, 4)   # gg, ge, eg, ee inside a two-qutrit space


def _standard_rotations() -> List[Tuple[str, np.ndarray]]:
    r = qutrit_rotation
    ge_pi = r('ge', 'x', np.pi)
    return [
        ('I', np.eye(3, dtype=complex)),
        ('ge_x90', r('ge', 'x', np.pi / 2)),
        ('ge_y90', r('ge', 'y', np.pi / 2)),
        ('ge_x180', ge_pi),
        ('ef_x90', r('ef', 'x', np.pi / 2)),
        ('ef_y90', r('ef', 'y', np.pi / 2)),
        ('ef_x90*ge_x180', r('ef', 'x', np.pi / 2) @ ge_pi),
        ('ef_y90*ge_x180', r('ef', 'y', np.pi / 2) @ ge_pi),
        ('ef_x180*ge_x180', r('ef', 'x', np.pi) @ ge_pi),
    ]


@dataclass(frozen=True)
class RotationSet:
    names: Tuple[str, ...]
    unitaries: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.names) != len(self.unitaries):
            raise ValueError("Rotation names and unitaries differ in length")
        for name, u in zip(self.names, self.unitaries):
            if np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0]))) > 1e-12:
                raise DomainError(f"Rotation '{name}' is not unitary")

    @classmethod
    def standard(cls) -> 'RotationSet':
        names, unitaries = zip(*_standard_rotations())
        return cls(tuple(names), tuple(unitaries))

    def settings(self, n_qutrits: int) -> List[Tuple[str, np.ndarray]]:
        """Setting labels and unitaries; two-qutrit labels are 'A-gate|B-gate'."""
        if n_qutrits == 1:
            return list(zip(self.names, self.unitaries))
        if n_qutrits == 2:
            return [(f"{na}|{nb}", np.kron(ua, ub))
                    for (na, ua), (nb, ub) in product(zip(self.names, self.unitaries), repeat=2)]
        raise DimensionError(f"Tomography supports 1 or 2 qutrits, got {n_qutrits}")


STANDARD_ROTATIONS = RotationSet.standard()


@dataclass
class TomographyRecord:
    """
    Outcome frequencies per setting. `shots` is None for infinite-shot
    (exact) records; `counts` is kept when shots were sampled. Mitigated
    records carry the assignment matrix and may hold negative frequencies.
    """
    settings: Tuple[str, ...]
    n_qutrits: int
    frequencies: np.ndarray
    shots: Optional[int] = None
    counts: Optional[np.ndarray] = None
    mitigation: Optional[AssignmentMatrix] = None

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        d = 3 ** self.n_qutrits
        if self.frequencies.shape != (len(self.settings), d):
            raise DimensionError(
                f"Frequencies shape {self.frequencies.shape} does not match {len(self.settings)} settings x {d}")
        if self.counts is not None:
            self.counts = np.asarray(self.counts, dtype=int)
            if self.shots is None or np.any(self.counts.sum(axis=1) != self.shots):
                raise ValueError("Counts per setting must sum to shots_per_setting")

    def to_dict(self) -> dict:
        return {
            'settings': list(self.settings),
            'n_qutrits': self.n_qutrits,
            'shots_per_setting': self.shots,
            'counts': None if self.counts is None else self.counts.tolist(),
            'frequencies': self.frequencies.tolist(),
            'mitigation': None if self.mitigation is None else self.mitigation.to_dict(),
        }


@dataclass(frozen=True)
class ProcessMatrix:
    """Qubit channel chi in the Pauli basis {I, X, Y, Z}."""
    chi: np.ndarray
    trace_preserving: bool = True
    tolerance: float = 1e-8

    def __post_init__(self):
        chi = np.array(self.chi, dtype=complex)
        if chi.shape != (4, 4):
            raise DimensionError(f"Process matrix must be 4x4, got {chi.shape}")
        if np.max(np.abs(chi - chi.conj().T)) > self.tolerance:
            raise DomainError("Process matrix is not Hermitian")
        if np.linalg.eigvalsh((chi + chi.conj().T) / 2).min() < -self.tolerance:
            raise DomainError("Process matrix is not positive semidefinite")
        trace = np.trace(chi).real
        if self.trace_preserving and abs(trace - 1) > self.tolerance:
            raise DomainError(f"Trace-preserving process matrix has trace {trace:.10g}")
        if trace > 1 + self.tolerance:
            raise DomainError(f"Process matrix trace {trace:.10g} exceeds 1")
        chi.setflags(write=False)
        object.__setattr__(self, 'chi', chi)
        object.__setattr__(self, 'trace_preserving', bool(self.trace_preserving))

    @property
    def trace(self) -> float:
        return float(np.trace(self.chi).real)


@dataclass(frozen=True)
class BellAnalysis:
    fidelity: float
    concurrence: float
    pauli_expectations: np.ndarray
    qubit_trace: float


# ---------------------------------------------------------------------------
# Design matrix
# ---------------------------------------------------------------------------

def projectors(rotations: RotationSet, n_qutrits: int) -> np.ndarray:
    """U^dag |k><k| U for every setting and outcome, shape (S, d, d, d)."""
    d = 3 ** n_qutrits
    out = []
    for _, u in rotations.settings(n_qutrits):
        out.append([np.outer(u[k].conj(), u[k]) for k in range(d)])
    return np.array(out)


def design_matrix(rotations: RotationSet, n_qutrits: int) -> np.ndarray:
    """Rows m with p = m . vec(rho) (row-major vec)."""
    proj = projectors(rotations, n_qutrits)
    d = proj.shape[-1]
    return np.transpose(proj, (0, 1, 3, 2)).reshape(-1, d * d)


def check_informationally_complete(rotations: RotationSet = STANDARD_ROTATIONS, n_qutrits: int = 1) -> int:
    rank = int(np.linalg.matrix_rank(design_matrix(rotations, n_qutrits)))
    needed = 9 ** n_qutrits
    if rank < needed:
        raise DomainError(f"Rotation set is not informationally complete: rank {rank} < {needed}")
    return rank


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

ReadoutChoice = Union[None, TriModalModel, Sequence[TriModalModel]]


def _readout_models(readout: ReadoutChoice, n_qutrits: int) -> Optional[List[TriModalModel]]:
    if readout is None:
        return None
    models = [readout] if isinstance(readout, TriModalModel) else list(readout)
    if len(models) == 1 and n_qutrits == 2:
        models = models * 2
    if len(models) != n_qutrits:
        raise DimensionError(f"Need {n_qutrits} readout models, got {len(models)}")
    return models


def _expected_matrix(models: Optional[List[TriModalModel]], n_qutrits: int) -> Optional[np.ndarray]:
    if models is None:
        return None
    mats = [expected_assignment_matrix(m) for m in models]
    return mats[0].entries if n_qutrits == 1 else joint_matrix(*mats).entries


def simulate_tomography(rho: DensityMatrix, rotations: RotationSet = STANDARD_ROTATIONS,
                        readout: ReadoutChoice = None, shots: Optional[int] = DEFAULT_SHOTS,
                        seed=None) -> TomographyRecord:
    """
    Apply every setting to rho and record assigned-outcome frequencies.

    Each shot's true outcome is drawn from the rotated populations, then a
    readout point is drawn per qutrit and classified. shots=None gives
    exact frequencies R^T p (perfect readout when readout is None).
    """
    d = rho.space.total_dim
    if d not in (3, 9):
        raise DimensionError(f"Tomography needs a 3- or 9-dimensional state, got {d}")
    n_qutrits = 1 if d == 3 else 2
    models = _readout_models(readout, n_qutrits)
    settings = rotations.settings(n_qutrits)
    rng = np.random.default_rng(seed)
    r_exact = _expected_matrix(models, n_qutrits) if shots is None else None

    freqs = np.empty((len(settings), d))
    counts = None if shots is None else np.zeros((len(settings), d), dtype=int)
    for s, (_, u) in enumerate(settings):
        p = np.clip(np.real(np.diag(u @ rho.entries @ u.conj().T)), 0, None)
        p = p / p.sum()
        if shots is None:
            freqs[s] = p if r_exact is None else r_exact.T @ p
            continue
        true_counts = rng.multinomial(shots, p)
        if models is None:
            counts[s] = true_counts
        else:
            for outcome, c in enumerate(true_counts):
                if c == 0:
                    continue
                levels = np.unravel_index(outcome, (3,) * n_qutrits)
                assigned = [classify_many(m, sample_shots(m, int(level), int(c), rng))
                            for m, level in zip(models, levels)]
                flat = assigned[0] if n_qutrits == 1 else 3 * assigned[0] + assigned[1]
                counts[s] += np.bincount(flat, minlength=d)
        freqs[s] = counts[s] / shots

    names = tuple(name for name, _ in settings)
    return TomographyRecord(names, n_qutrits, freqs, shots, counts)


def mitigate_record(record: TomographyRecord, r: AssignmentMatrix) -> TomographyRecord:
    """Invert readout error setting by setting; negative entries are kept."""
    if r.dim != 3 ** record.n_qutrits:
        raise DimensionError(f"{r.dim}x{r.dim} assignment matrix for a {record.n_qutrits}-qutrit record")
    mitigated = np.array([mitigate(f / f.sum(), r).values for f in record.frequencies])
    return replace(record, frequencies=mitigated, mitigation=r)


def bootstrap(record: TomographyRecord, n_resamples: int, seed=None) -> List[TomographyRecord]:
    """Parametric resamples of a sampled record (multinomial on its frequencies)."""
    if record.shots is None:
        raise ValueError("Cannot bootstrap an infinite-shot record")
    rng = np.random.default_rng(seed)
    base = np.clip(record.frequencies, 0, None)
    base = base / base.sum(axis=1, keepdims=True)
    out = []
    for _ in range(n_resamples):
        counts = np.array([rng.multinomial(record.shots, p) for p in base])
        out.append(TomographyRecord(record.settings, record.n_qutrits, counts / record.shots,
                                    record.shots, counts, record.mitigation))
    return out


# ---------------------------------------------------------------------------
# State MLE
# ---------------------------------------------------------------------------

def _weights(frequencies: np.ndarray) -> np.ndarray:
    negative = frequencies < 0
    if negative.any():
        logger.info("Dropping %.3g of negative frequency mass from the likelihood", -frequencies[negative].sum())
    return np.where(negative, 0.0, frequencies)


def _unpack(x: np.ndarray, d: int, iu) -> np.ndarray:
    m = len(iu[0])
    t = np.zeros((d, d), dtype=complex)
    t[iu] = x[:m] + 1j * x[m:]
    return t


class _StateLikelihood:
    """Negative log-likelihood of rho = T^dag T / Tr with its analytic gradient."""

    def __init__(self, rows: np.ndarray, weights: np.ndarray, d: int):
        self.rows = rows
        self.weights = weights
        self.d = d
        self.iu = np.triu_indices(d)
        self.projectors = np.transpose(rows.reshape(-1, d, d), (0, 2, 1))
        self.history: List[float] = []

    def rho(self, x: np.ndarray) -> np.ndarray:
        t = _unpack(x, self.d, self.iu)
        a = t.conj().T @ t
        return a / np.trace(a).real

    def __call__(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        t = _unpack(x, self.d, self.iu)
        a = t.conj().T @ t
        tr = np.trace(a).real
        rho = a / tr
        p = np.clip(np.real(self.rows @ rho.reshape(-1)), 1e-300, None)
        value = float(self.weights @ np.log(p))
        w = np.tensordot(self.weights / p, self.projectors, axes=1)
        w_prime = (w - np.trace(w @ rho).real * np.eye(self.d)) / tr
        g = (w_prime @ t.conj().T).T
        grad_t = 2 * g[self.iu]
        grad = np.concatenate([grad_t.real, -grad_t.imag])
        return -value, -grad

    def log_likelihood(self, x: np.ndarray) -> float:
        return -self(x)[0]


def _linear_inversion(rows: np.ndarray, freqs: np.ndarray, d: int) -> Tuple[np.ndarray, float]:
    vec, *_ = np.linalg.lstsq(rows, freqs.astype(complex), rcond=None)
    m = vec.reshape(d, d)
    m = (m + m.conj().T) / 2
    residual = float(np.linalg.norm(np.real(rows @ m.reshape(-1)) - freqs))
    return m, residual


def mle_state(record: TomographyRecord, rotations: RotationSet = STANDARD_ROTATIONS,
              tol: float = LIKELIHOOD_TOLERANCE, max_iter: int = MAX_ITERATIONS) -> DensityMatrix:
    """
    Physical state maximizing sum_k f_k log p_k(rho).

    When the frequencies are exactly reproduced by a physical linear
    inversion that state is the global maximum and is returned directly.
    """
    d = 3 ** record.n_qutrits
    space = HilbertSpace.single('Q', 3) if d == 3 else HilbertSpace.qutrits('A', 'B')
    rows = design_matrix(rotations, record.n_qutrits)
    freqs = record.frequencies.reshape(-1)

    lin, residual = _linear_inversion(rows, freqs, d)
    if residual <= CONSISTENCY_TOLERANCE and np.linalg.eigvalsh(lin).min() >= -CONSISTENCY_TOLERANCE:
        logger.debug("Linear inversion is physical and exact; skipping optimization")
        return clip_to_physical(lin, space)

    start = clip_to_physical(lin, space).entries
    start = 0.99 * start + 0.01 * np.eye(d) / d
    t0 = np.linalg.cholesky(start).conj().T
    iu = np.triu_indices(d)
    x0 = np.concatenate([t0[iu].real, t0[iu].imag])

    objective = _StateLikelihood(rows, _weights(freqs), d)
    history = [objective.log_likelihood(x0)]

    def monitor(xk):
        value = objective.log_likelihood(xk)
        if value < history[-1] - 1e-9 * max(1.0, abs(history[-1])):
            raise EstimationError("Log-likelihood decreased during optimization",
                                  iterations=len(history), last_log_likelihood=value)
        history.append(value)

    result = minimize(objective, x0, jac=True, method='L-BFGS-B', callback=monitor,
                      options={'maxiter': max_iter, 'ftol': tol, 'gtol': 1e-12, 'maxcor': 30})
    if result.nit >= max_iter:
        raise EstimationError(f"State MLE did not converge in {max_iter} iterations",
                              iterations=result.nit, last_log_likelihood=-result.fun)
    logger.debug("State MLE: %d iterations, log-likelihood %.8f (%s)", result.nit, -result.fun, result.message)
    rho = objective.rho(result.x)
    return DensityMatrix(space, (rho + rho.conj().T) / 2)


# ---------------------------------------------------------------------------
# Process MLE
# ---------------------------------------------------------------------------

_PAULI_VECTORS = np.array([s.reshape(-1) for s in pauli_basis()]).T   # columns |sigma_m>>


def _qubit_block_with_leak(rho: np.ndarray) -> np.ndarray:
    """g/e block plus the leaked population as an incoherent third level."""
    rho = np.asarray(rho, dtype=complex)
    out = np.zeros((3, 3), dtype=complex)
    if rho.shape == (2, 2):
        out[:2, :2] = rho
        out[2, 2] = max(0.0, 1 - np.trace(rho).real)
        return out
    if rho.shape != (3, 3):
        raise DimensionError(f"Process outputs must be qubit or qutrit states, got {rho.shape}")
    out[:2, :2] = rho[:2, :2]
    out[2, 2] = rho[2, 2].real
    return out


def _measurement_projectors() -> List[np.ndarray]:
    """Z, X and Y basis projectors on the g/e block, each followed by the leak projector."""
    mub = [psi for _, psi in mutually_unbiased_states()]
    out = []
    for plus, minus in ((0, 1), (2, 4), (3, 5)):
        for phi in (mub[plus], mub[minus]):
            proj = np.zeros((3, 3), dtype=complex)
            proj[:2, :2] = np.outer(phi, phi.conj())
            out.append(proj)
        leak = np.zeros((3, 3), dtype=complex)
        leak[2, 2] = 1
        out.append(leak)
    return out


def _process_design(inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Rows giving each (input, basis, outcome) probability as a linear form in vec(J)."""
    rows = []
    for psi in inputs:
        rho_in = np.outer(psi, psi.conj())
        for proj in _measurement_projectors():
            # p = sum_{ajbk} J[a,j,b,k] rho_in[j,k] P[b,a]
            rows.append(np.einsum('jk,ba->ajbk', rho_in, proj).reshape(-1))
    return np.array(rows)


def _normalized_choi(t: np.ndarray) -> np.ndarray:
    raw = t.conj().T @ t
    s = np.einsum('ajak->jk', raw.reshape(3, 2, 3, 2))
    w, v = np.linalg.eigh((s + s.conj().T) / 2)
    inv_sqrt = (v / np.sqrt(np.clip(w, 1e-300, None))) @ v.conj().T
    sandwich = np.kron(np.eye(3), inv_sqrt)
    return sandwich @ raw @ sandwich


def _choi_to_process(choi: np.ndarray) -> ProcessMatrix:
    block = choi.reshape(3, 2, 3, 2)[:2, :, :2, :].reshape(4, 4)
    chi = _PAULI_VECTORS.conj().T @ block @ _PAULI_VECTORS / 4
    chi = (chi + chi.conj().T) / 2
    leak = 1 - np.trace(chi).real
    return ProcessMatrix(chi, trace_preserving=bool(abs(leak) <= 1e-8))


def process_tomography(outputs: Sequence, inputs: Optional[Sequence[np.ndarray]] = None,
                       tol: float = 1e-12, max_iter: int = MAX_ITERATIONS) -> ProcessMatrix:
    """
    Qubit process matrix from the outputs for the six mutually unbiased
    inputs. Outputs may be qubit states or qutrit states (population
    outside g/e counts as leakage, making the channel trace-decreasing).
    """
    outputs = [o[1] if isinstance(o, tuple) else o for o in outputs]
    outputs = [o.entries if isinstance(o, DensityMatrix) else np.asarray(o) for o in outputs]
    inputs = [psi for _, psi in mutually_unbiased_states()] if inputs is None else list(inputs)
    if len(outputs) != 6 or len(inputs) != 6:
        raise ValueError(f"Process tomography needs six inputs and six outputs, got {len(inputs)} and {len(outputs)}")

    data = [_qubit_block_with_leak(o) for o in outputs]
    # exact data: solve the linear map directly
    maps = np.array([np.einsum('jk,ac,bd->abcjdk', np.outer(psi, psi.conj()), np.eye(3), np.eye(3))
                     .reshape(9, 36) for psi in inputs]).reshape(-1, 36)
    target = np.concatenate([d.reshape(-1) for d in data])
    choi_vec, *_ = np.linalg.lstsq(maps, target, rcond=None)
    choi = choi_vec.reshape(6, 6)
    choi = (choi + choi.conj().T) / 2
    residual = np.linalg.norm(maps @ choi.reshape(-1) - target)
    if residual <= CONSISTENCY_TOLERANCE and np.linalg.eigvalsh(choi).min() >= -CONSISTENCY_TOLERANCE:
        logger.debug("Process linear inversion is physical and exact")
        w, v = np.linalg.eigh(choi)
        return _choi_to_process((v * np.clip(w, 0, None)) @ v.conj().T)

    projs = _measurement_projectors()
    rows = _process_design(inputs)
    pseudo = np.clip([np.real(np.trace(p @ d)) for d in data for p in projs], 0, None)

    iu = np.triu_indices(6)
    w, v = np.linalg.eigh(choi)
    start = (v * np.clip(w, 1e-3, None)) @ v.conj().T
    t0 = np.linalg.cholesky(start).conj().T
    x0 = np.concatenate([t0[iu].real, t0[iu].imag])

    def negative_log_likelihood(x):
        t = _unpack(x, 6, iu)
        p = np.clip(np.real(rows @ _normalized_choi(t).reshape(-1)), 1e-300, None)
        return -float(pseudo @ np.log(p))

    result = minimize(negative_log_likelihood, x0, method='L-BFGS-B',
                      options={'maxiter': max_iter, 'ftol': tol, 'gtol': 1e-10})
    if result.nit >= max_iter:
        raise EstimationError(f"Process MLE did not converge in {max_iter} iterations",
                              iterations=result.nit, last_log_likelihood=-result.fun)
    logger.debug("Process MLE: %d iterations (%s)", result.nit, result.message)
    return _choi_to_process(_normalized_choi(_unpack(result.x, 6, iu)))


def transfer_metrics(chi: ProcessMatrix, outputs: Sequence,
                     inputs: Optional[Sequence[np.ndarray]] = None) -> Tuple[float, float]:
    """(F_p, F_s): overlap with the identity process and mean input-state fidelity."""
    outputs = [o[1] if isinstance(o, tuple) else o for o in outputs]
    outputs = [o.entries if isinstance(o, DensityMatrix) else np.asarray(o) for o in outputs]
    inputs = [psi for _, psi in mutually_unbiased_states()] if inputs is None else list(inputs)
    process_fidelity = float(chi.chi[0, 0].real)
    fidelities = [float(np.real(psi.conj() @ out[:2, :2] @ psi)) for psi, out in zip(inputs, outputs)]
    return process_fidelity, float(np.mean(fidelities))


# ---------------------------------------------------------------------------
# Bell state
# ---------------------------------------------------------------------------

def reduce_to_qubits(rho33: DensityMatrix) -> DensityMatrix:
    """The {gg, ge, eg, ee} block of a two-qutrit state, left sub-normalized."""
    if rho33.space.total_dim != 9:
        raise DimensionError(f"Qubit reduction needs a two-qutrit state, got dimension {rho33.space.total_dim}")
    block = rho33.entries[np.ix_(QUBIT_BLOCK, QUBIT_BLOCK)]
    return DensityMatrix(HilbertSpace.qubits('A', 'B'), block,
                         trace_tolerance=rho33.trace_tolerance, subnormalized=True)


def bell_protocol_analysis(rho33: DensityMatrix) -> BellAnalysis:
    """Fidelity to |psi+>, concurrence and Pauli expectations of the qubit block."""
    reduced = reduce_to_qubits(rho33)
    return BellAnalysis(
        fidelity=state_fidelity(reduced, bell_psi_plus()),
        concurrence=concurrence(reduced),
        pauli_expectations=pauli_expectations(reduced),
        qubit_trace=reduced.trace,
    )
