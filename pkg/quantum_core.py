"""
Quantum Core - Hilbert-space algebra shared by every simulation module

Provides:
- Composite Hilbert spaces of qutrits, qubits and truncated Fock modes
- Immutable operator / state / density-matrix value types
- Tensor products, partial traces and operator embedding
- Fidelity, Wootters concurrence and Hilbert-Schmidt distance
- Pauli and Gell-Mann expectation values

All matrices are dense numpy arrays; the largest space used by the link
simulation is 36-dimensional (qutrit x two Fock levels per node).

Gell-Mann basis ordering: identity first, then the eight standard
Gell-Mann matrices lambda_1 .. lambda_8 in their conventional order.
"""

import logging
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DimensionError

logger = logging.getLogger(__name__)

TOLERANCE = 1e-10

QUTRIT_LEVELS = ('g', 'e', 'f')
PAULI_LABELS = ('I', 'X', 'Y', 'Z')


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=complex)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class HilbertSpace:
    """Ordered tensor product of labelled factors."""
    factors: Tuple[Tuple[str, int], ...]

    def __post_init__(self):
        factors = tuple((str(label), int(dim)) for label, dim in self.factors)
        object.__setattr__(self, 'factors', factors)
        if not factors:
            raise DimensionError("A Hilbert space needs at least one factor")
        labels = [label for label, _ in factors]
        if len(set(labels)) != len(labels):
            raise DimensionError(f"Duplicate factor labels: {labels}")
        for label, dim in factors:
            if dim < 2:
                raise DimensionError(f"Factor '{label}' has dimension {dim}; at least 2 required")

    @property
    def labels(self) -> List[str]:
        return [label for label, _ in self.factors]

    @property
    def dims(self) -> List[int]:
        return [dim for _, dim in self.factors]

    @property
    def total_dim(self) -> int:
        return int(np.prod(self.dims))

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DimensionError(f"Unknown factor label '{label}'; space has {self.labels}") from None

    def concat(self, other: 'HilbertSpace') -> 'HilbertSpace':
        return HilbertSpace(self.factors + other.factors)

    def subspace(self, keep: Sequence[str]) -> 'HilbertSpace':
        keep = set(keep)
        return HilbertSpace(tuple(f for f in self.factors if f[0] in keep))

    @classmethod
    def single(cls, label: str, dim: int) -> 'HilbertSpace':
        return cls(((label, dim),))

    @classmethod
    def qubits(cls, *labels: str) -> 'HilbertSpace':
        return cls(tuple((label, 2) for label in labels))

    @classmethod
    def qutrits(cls, *labels: str) -> 'HilbertSpace':
        return cls(tuple((label, 3) for label in labels))


@dataclass(frozen=True)
class ComplexOperator:
    """Dense operator acting on a declared Hilbert space."""
    space: HilbertSpace
    entries: np.ndarray

    def __post_init__(self):
        entries = _frozen(self.entries)
        n = self.space.total_dim
        if entries.shape != (n, n):
            raise DimensionError(f"Operator shape {entries.shape} does not match space dimension {n}")
        object.__setattr__(self, 'entries', entries)

    def dag(self) -> 'ComplexOperator':
        return ComplexOperator(self.space, self.entries.conj().T)

    def __matmul__(self, other: 'ComplexOperator') -> 'ComplexOperator':
        if other.space.total_dim != self.space.total_dim:
            raise DimensionError("Operator product between incompatible spaces")
        return ComplexOperator(self.space, self.entries @ other.entries)

    def __add__(self, other: 'ComplexOperator') -> 'ComplexOperator':
        if other.space.total_dim != self.space.total_dim:
            raise DimensionError("Operator sum between incompatible spaces")
        return ComplexOperator(self.space, self.entries + other.entries)

    def __mul__(self, scalar: complex) -> 'ComplexOperator':
        return ComplexOperator(self.space, self.entries * scalar)

    __rmul__ = __mul__

    @classmethod
    def identity(cls, space: HilbertSpace) -> 'ComplexOperator':
        return cls(space, np.eye(space.total_dim))


@dataclass(frozen=True)
class PureState:
    """Normalized state vector."""
    space: HilbertSpace
    amplitudes: np.ndarray

    def __post_init__(self):
        amplitudes = np.array(self.amplitudes, dtype=complex).reshape(-1)
        if amplitudes.size != self.space.total_dim:
            raise DimensionError(
                f"State has {amplitudes.size} amplitudes for a {self.space.total_dim}-dim space")
        norm = np.linalg.norm(amplitudes)
        if abs(norm - 1.0) > 1e-8:
            raise ValueError(f"State vector is not normalized (norm {norm:.12g})")
        amplitudes.setflags(write=False)
        object.__setattr__(self, 'amplitudes', amplitudes)

    @classmethod
    def from_unnormalized(cls, space: HilbertSpace, amplitudes) -> 'PureState':
        amplitudes = np.asarray(amplitudes, dtype=complex)
        return cls(space, amplitudes / np.linalg.norm(amplitudes))

    def projector(self) -> 'DensityMatrix':
        return DensityMatrix(self.space, np.outer(self.amplitudes, self.amplitudes.conj()))


@dataclass(frozen=True)
class DensityMatrix:
    """
    Hermitian positive semidefinite matrix with unit trace.

    Reduced two-qubit matrices carved out of two-qutrit states keep their
    trace below one; they are built with subnormalized=True.
    """
    space: HilbertSpace
    entries: np.ndarray
    trace_tolerance: float = TOLERANCE
    subnormalized: bool = False

    def __post_init__(self):
        entries = _frozen(self.entries)
        n = self.space.total_dim
        if entries.shape != (n, n):
            raise DimensionError(f"Density matrix shape {entries.shape} does not match space dimension {n}")
        tol = self.trace_tolerance
        herm_err = np.max(np.abs(entries - entries.conj().T))
        if herm_err > tol:
            raise ValueError(f"Density matrix is not Hermitian (error {herm_err:.3g} > {tol:.1g})")
        min_eig = np.linalg.eigvalsh((entries + entries.conj().T) / 2).min()
        if min_eig < -tol:
            raise ValueError(f"Density matrix has negative eigenvalue {min_eig:.3g}")
        trace = np.trace(entries).real
        if self.subnormalized:
            if trace > 1.0 + tol:
                raise ValueError(f"Sub-normalized density matrix has trace {trace:.12g} > 1")
        elif abs(trace - 1.0) > tol:
            raise ValueError(f"Density matrix trace {trace:.12g} differs from 1")
        object.__setattr__(self, 'entries', entries)

    @property
    def trace(self) -> float:
        return float(np.trace(self.entries).real)

    def populations(self) -> np.ndarray:
        return np.clip(np.diag(self.entries).real, 0.0, None)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.entries).min())

    def expect(self, operator: Union[ComplexOperator, np.ndarray]) -> complex:
        op = operator.entries if isinstance(operator, ComplexOperator) else np.asarray(operator)
        return complex(np.trace(self.entries @ op))

    @classmethod
    def maximally_mixed(cls, space: HilbertSpace) -> 'DensityMatrix':
        n = space.total_dim
        return cls(space, np.eye(n) / n)

    @classmethod
    def product(cls, *states: 'DensityMatrix', trace_tolerance: float = TOLERANCE) -> 'DensityMatrix':
        space = reduce(lambda a, b: a.concat(b), [s.space for s in states])
        entries = reduce(np.kron, [s.entries for s in states])
        return cls(space, entries, trace_tolerance=trace_tolerance)


MatrixLike = Union[np.ndarray, ComplexOperator, DensityMatrix]


def _as_matrix(m: MatrixLike) -> np.ndarray:
    if isinstance(m, (ComplexOperator, DensityMatrix)):
        return m.entries
    return np.asarray(m, dtype=complex)


# ---------------------------------------------------------------------------
# Standard operators
# ---------------------------------------------------------------------------

def pauli_basis() -> List[np.ndarray]:
    """I, X, Y, Z with |g> = |0> the +1 eigenstate of Z."""
    return [
        np.eye(2, dtype=complex),
        np.array([[0, 1], [1, 0]], dtype=complex),
        np.array([[0, -1j], [1j, 0]], dtype=complex),
        np.array([[1, 0], [0, -1]], dtype=complex),
    ]


def gell_mann_basis() -> List[np.ndarray]:
    """Identity followed by lambda_1 .. lambda_8."""
    l = [np.zeros((3, 3), dtype=complex) for _ in range(8)]
    l[0][0, 1] = l[0][1, 0] = 1
    l[1][0, 1], l[1][1, 0] = -1j, 1j
    l[2][0, 0], l[2][1, 1] = 1, -1
    l[3][0, 2] = l[3][2, 0] = 1
    l[4][0, 2], l[4][2, 0] = -1j, 1j
    l[5][1, 2] = l[5][2, 1] = 1
    l[6][1, 2], l[6][2, 1] = -1j, 1j
    l[7] = np.diag([1, 1, -2]).astype(complex) / np.sqrt(3)
    return [np.eye(3, dtype=complex)] + l


def basis_ket(dim: int, index: int) -> np.ndarray:
    ket = np.zeros(dim, dtype=complex)
    ket[index] = 1.0
    return ket


def destroy(dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, dim)), k=1).astype(complex)


def transition(dim: int, to_level: int, from_level: int) -> np.ndarray:
    """|to><from| on a single factor."""
    op = np.zeros((dim, dim), dtype=complex)
    op[to_level, from_level] = 1.0
    return op


def qutrit_rotation(transition_name: str, axis: str, angle: float) -> np.ndarray:
    """
    exp(-i angle sigma_axis / 2) on the 'ge' or 'ef' two-level block of a
    qutrit, identity on the spectator level.
    """
    blocks = {'ge': (0, 1), 'ef': (1, 2)}
    if transition_name not in blocks:
        raise ValueError(f"Unknown qutrit transition '{transition_name}'")
    sigma = {'x': pauli_basis()[1], 'y': pauli_basis()[2]}.get(axis)
    if sigma is None:
        raise ValueError(f"Unknown rotation axis '{axis}'")
    block = np.cos(angle / 2) * np.eye(2) - 1j * np.sin(angle / 2) * sigma
    lo, hi = blocks[transition_name]
    rot = np.eye(3, dtype=complex)
    rot[np.ix_([lo, hi], [lo, hi])] = block
    return rot


def embed(op: np.ndarray, space: HilbertSpace, label: str) -> np.ndarray:
    """Place a single-factor operator on `label`, identity elsewhere."""
    target = space.index(label)
    if op.shape != (space.dims[target],) * 2:
        raise DimensionError(f"Operator shape {op.shape} does not fit factor '{label}'")
    parts = [op if i == target else np.eye(d) for i, d in enumerate(space.dims)]
    return reduce(np.kron, parts)


def bell_psi_plus() -> PureState:
    """(|ge> + |eg>)/sqrt(2) on two qubits."""
    return PureState(HilbertSpace.qubits('A', 'B'), np.array([0, 1, 1, 0]) / np.sqrt(2))


def qubit_state(alpha: complex, beta: complex) -> np.ndarray:
    vec = np.array([alpha, beta], dtype=complex)
    return vec / np.linalg.norm(vec)


def mutually_unbiased_states() -> List[Tuple[str, np.ndarray]]:
    """The six qubit preparations used as process-tomography inputs."""
    s = 1 / np.sqrt(2)
    return [
        ('g', np.array([1, 0], dtype=complex)),
        ('e', np.array([0, 1], dtype=complex)),
        ('+x', np.array([s, s], dtype=complex)),
        ('+y', np.array([s, 1j * s], dtype=complex)),
        ('-x', np.array([s, -s], dtype=complex)),
        ('-y', np.array([s, -1j * s], dtype=complex)),
    ]


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def tensor(operators: Sequence[ComplexOperator]) -> ComplexOperator:
    """Kronecker product in listed order."""
    if not operators:
        raise ValueError("tensor() needs at least one operator")
    space = reduce(lambda a, b: a.concat(b), [op.space for op in operators])
    return ComplexOperator(space, reduce(np.kron, [op.entries for op in operators]))


def apply_unitary(rho: DensityMatrix, unitary: np.ndarray) -> DensityMatrix:
    unitary = np.asarray(unitary, dtype=complex)
    if unitary.shape != rho.entries.shape:
        raise DimensionError(f"Unitary shape {unitary.shape} does not match state {rho.entries.shape}")
    return DensityMatrix(rho.space, unitary @ rho.entries @ unitary.conj().T,
                         trace_tolerance=rho.trace_tolerance, subnormalized=rho.subnormalized)


def state_fidelity(rho: DensityMatrix, target: PureState) -> float:
    """<psi|rho|psi>; sub-normalized rho is used as is."""
    if rho.space.total_dim != target.space.total_dim:
        raise DimensionError(
            f"Cannot compare a {rho.space.total_dim}-dim state with a {target.space.total_dim}-dim target")
    psi = target.amplitudes
    return float(np.real(psi.conj() @ rho.entries @ psi))


def concurrence(rho: MatrixLike) -> float:
    """
    Wootters concurrence of a two-qubit matrix.

    Trace below one is accepted (reduced qutrit states) and the value is
    not renormalized.
    """
    m = _as_matrix(rho)
    if m.shape != (4, 4):
        raise DimensionError(f"Concurrence needs a 4x4 matrix, got {m.shape}")
    if np.max(np.abs(m - m.conj().T)) > TOLERANCE:
        raise ValueError("Concurrence input is not Hermitian")
    if np.linalg.eigvalsh((m + m.conj().T) / 2).min() < -TOLERANCE:
        raise ValueError("Concurrence input has negative eigenvalues")
    yy = np.kron(pauli_basis()[2], pauli_basis()[2])
    r = m @ yy @ m.conj() @ yy
    lambdas = np.sqrt(np.clip(np.linalg.eigvals(r).real, 0.0, None))
    lambdas = np.sort(lambdas)[::-1]
    return float(max(0.0, lambdas[0] - lambdas[1] - lambdas[2] - lambdas[3]))


def hs_distance(m1: MatrixLike, m2: MatrixLike) -> float:
    """Hilbert-Schmidt norm of the difference, sqrt(Tr (m1-m2)^dag (m1-m2))."""
    a, b = _as_matrix(m1), _as_matrix(m2)
    if a.shape != b.shape:
        raise DimensionError(f"Shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum(np.abs(a - b) ** 2)))


def pauli_expectations(rho: MatrixLike) -> np.ndarray:
    """Tr(rho s_i s_j) for (i, j) in {I,X,Y,Z}^2, row-major."""
    m = _as_matrix(rho)
    if m.shape != (4, 4):
        raise DimensionError(f"Pauli expectations need a 4x4 matrix, got {m.shape}")
    paulis = pauli_basis()
    return np.array([np.trace(m @ np.kron(si, sj)).real for si in paulis for sj in paulis])


def pauli_labels() -> List[str]:
    return [a + b for a in PAULI_LABELS for b in PAULI_LABELS]


def reconstruct_from_paulis(expectations: Sequence[float]) -> np.ndarray:
    """Inverse of pauli_expectations: rho = 1/4 sum <s_i s_j> s_i x s_j."""
    paulis = pauli_basis()
    ops = [np.kron(si, sj) for si in paulis for sj in paulis]
    return sum(e * op for e, op in zip(expectations, ops)) / 4


def gell_mann_expectations(rho: MatrixLike) -> np.ndarray:
    """Tr(rho G_i x G_j) over the 9-element basis, row-major."""
    m = _as_matrix(rho)
    if m.shape != (9, 9):
        raise DimensionError(f"Gell-Mann expectations need a 9x9 matrix, got {m.shape}")
    basis = gell_mann_basis()
    return np.array([np.trace(m @ np.kron(gi, gj)).real for gi in basis for gj in basis])


def partial_trace(rho: DensityMatrix, keep: Iterable[str]) -> DensityMatrix:
    """Trace out every factor whose label is not in `keep`."""
    keep = list(keep)
    for label in keep:
        rho.space.index(label)
    dims = rho.space.dims
    drop = [i for i, label in enumerate(rho.space.labels) if label not in keep]
    tensor_form = rho.entries.reshape(dims + dims)
    remaining = len(dims)
    for idx in sorted(drop, reverse=True):
        tensor_form = np.trace(tensor_form, axis1=idx, axis2=idx + remaining)
        remaining -= 1
    space = rho.space.subspace(keep)
    n = space.total_dim
    return DensityMatrix(space, tensor_form.reshape(n, n),
                         trace_tolerance=rho.trace_tolerance, subnormalized=rho.subnormalized)


def clip_to_physical(matrix: np.ndarray, space: HilbertSpace, target_trace: float = 1.0,
                     subnormalized: bool = False) -> DensityMatrix:
    """Zero negative eigenvalues, renormalize to `target_trace`, log the clipped mass."""
    m = np.asarray(matrix, dtype=complex)
    m = (m + m.conj().T) / 2
    w, v = np.linalg.eigh(m)
    clipped = float(-w[w < 0].sum())
    if clipped > TOLERANCE:
        logger.warning("Clipped %.3g of negative eigenvalue mass", clipped)
    elif clipped > 0:
        logger.debug("Clipped %.3g of negative eigenvalue mass", clipped)
    w = np.clip(w, 0.0, None)
    if w.sum() <= 0:
        raise ValueError("Matrix has no positive spectrum to renormalize")
    w *= target_trace / w.sum()
    fixed = (v * w) @ v.conj().T
    return DensityMatrix(space, (fixed + fixed.conj().T) / 2, subnormalized=subnormalized)
