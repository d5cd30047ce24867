"""
Link Dynamics - cascaded two-node master equation for the photon link

Simulates:
- Emission of a shaped photon by node A through the |f0> <-> |g1> sideband
- Propagation through a lossy, unidirectional channel (beam-splitter loss)
- Absorption at node B with the time-reversed drive
- Qutrit decay and pure dephasing at both nodes

Experiments built on top: excitation transfer, truncation and lag sweeps,
photon-envelope records, the process-tomography and Bell-state protocols,
and single-qutrit Ramsey checks.

The Markovian cascade has no intrinsic delay, so everything runs in node
B's retarded frame: node B's schedule is shifted by the extra lag only and
the propagation delay is added back for lab-frame timing.
"""

import functools
import logging
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp, trapezoid

from errors import DomainError, IntegrationError
from pulse_synthesis import (ABSORPTION, DEFAULT_RAMP, DEFAULT_SAMPLE_DT, DRIVE_FORMS, EMISSION, EXACT,
                             TRUNCATION_HALFWIDTH, PhotonShape, PulseSchedule,
                             build_schedule, target_envelope)
from quantum_core import (QUTRIT_LEVELS, DensityMatrix, HilbertSpace, basis_ket, destroy,
                          embed, mutually_unbiased_states, partial_trace, qutrit_rotation,
                          transition)

logger = logging.getLogger(__name__)

TRANSMON_LABELS = tuple(a + b for a, b in product(QUTRIT_LEVELS, QUTRIT_LEVELS))
STATE_TOLERANCE = 1e-6

EMIT_FROM_A = 'emit_from_A'
EMIT_FROM_B = 'emit_from_B'
EMIT_A_ABSORB_B = 'emit_A_absorb_B'
PHOTON_SCENARIOS = (EMIT_FROM_A, EMIT_FROM_B, EMIT_A_ABSORB_B)

PREPARATIONS = ('ideal', 'reset', 'thermal')

# Preparation gates, applied to |g>
EF_PI = qutrit_rotation('ef', 'x', np.pi)
PREPARE_F = EF_PI @ qutrit_rotation('ge', 'x', np.pi)
PREPARE_E_PLUS_F = qutrit_rotation('ef', 'y', np.pi / 2) @ qutrit_rotation('ge', 'x', np.pi)
PREPARE_G_PLUS_F = EF_PI @ qutrit_rotation('ge', 'y', np.pi / 2)
MUB_GATES = {
    'g': np.eye(3, dtype=complex),
    'e': qutrit_rotation('ge', 'x', np.pi),
    '+x': qutrit_rotation('ge', 'y', np.pi / 2),
    '+y': qutrit_rotation('ge', 'x', -np.pi / 2),
    '-x': qutrit_rotation('ge', 'y', -np.pi / 2),
    '-y': qutrit_rotation('ge', 'x', np.pi / 2),
}


@dataclass(frozen=True)
class NodeModel:
    """Physical parameters of one transmon-qutrit node (SI units, rad/s)."""
    label: str
    t1_ge: float
    t1_ef: float
    t2e_ge: float
    t2e_ef: float
    kappa: float
    thermal_population: float = 0.0
    reset_residual: float = 0.0
    fock_cutoff: int = 1
    # free-evolution coherence during the sideband drives, as a fraction of T2e
    ramsey_ratio: float = 1.0

    def __post_init__(self):
        for name in ('t1_ge', 't1_ef', 't2e_ge', 't2e_ef', 'kappa'):
            if not getattr(self, name) > 0:
                raise DomainError(f"Node {self.label}: {name} must be positive, got {getattr(self, name)}")
        if self.t2e_ge > 2 * self.t1_ge * (1 + 1e-12):
            raise DomainError(
                f"Node {self.label}: t2e_ge = {self.t2e_ge:.4g} s exceeds 2*t1_ge = {2 * self.t1_ge:.4g} s")
        for name in ('thermal_population', 'reset_residual'):
            if not 0 <= getattr(self, name) < 1:
                raise DomainError(f"Node {self.label}: {name} must be in [0, 1), got {getattr(self, name)}")
        if int(self.fock_cutoff) < 1:
            raise DomainError(f"Node {self.label}: fock_cutoff must be >= 1")
        if not 0 < self.ramsey_ratio <= 1:
            raise DomainError(f"Node {self.label}: ramsey_ratio must be in (0, 1], got {self.ramsey_ratio}")

    @classmethod
    def ideal(cls, label: str, kappa: float, fock_cutoff: int = 1) -> 'NodeModel':
        """Decoherence-free node."""
        return cls(label, np.inf, np.inf, np.inf, np.inf, kappa, fock_cutoff=fock_cutoff)

    def without_decoherence(self) -> 'NodeModel':
        return replace(self, t1_ge=np.inf, t1_ef=np.inf, t2e_ge=np.inf, t2e_ef=np.inf)

    def dephasing_rates(self) -> Tuple[float, float]:
        return _dephasing_rates(self)


@functools.lru_cache(maxsize=None)
def _dephasing_rates(node: NodeModel) -> Tuple[float, float]:
    """
    Rates of sqrt(g_a) diag(0,1,1) and sqrt(g_b) diag(0,0,1) such that the
    ge and ef coherences decay at 1/(ramsey_ratio * T2e). A coherence already
    limited by energy decay gets no extra dephasing.
    """
    t2_ge, t2_ef = node.ramsey_ratio * node.t2e_ge, node.ramsey_ratio * node.t2e_ef
    gamma_ge = 2 * (1 / t2_ge - 0.5 / node.t1_ge)
    gamma_ef = 2 * (1 / t2_ef - 0.5 * (1 / node.t1_ge + 1 / node.t1_ef))
    if gamma_ef < 0:
        achieved = 0.5 * (1 / node.t1_ge + 1 / node.t1_ef)
        logger.warning("Node %s: ef coherence is decay-limited; T2e_ef %.3g us "
                       "unreachable, using %.3g us", node.label, t2_ef * 1e6, 1e6 / achieved)
    return max(gamma_ge, 0.0), max(gamma_ef, 0.0)


@dataclass(frozen=True)
class LinkModel:
    loss: float
    propagation_delay: float = 0.0
    cascade_phase: float = 0.0

    def __post_init__(self):
        if not 0 <= self.loss < 1:
            raise DomainError(f"Link loss must be in [0, 1), got {self.loss}")
        if self.propagation_delay < 0:
            raise DomainError(f"Propagation delay must be non-negative, got {self.propagation_delay}")


@dataclass(frozen=True)
class SequenceSettings:
    """Pulse construction, timing bookkeeping and integrator settings."""
    sample_dt: float = DEFAULT_SAMPLE_DT
    ramp: float = DEFAULT_RAMP
    halfwidth: float = TRUNCATION_HALFWIDTH
    record_dt: float = 1e-9
    ef_gate: float = 24e-9
    guard_time: float = 0.0
    detuning: float = 0.0
    rtol: float = 1e-8
    atol: float = 1e-10
    max_step: float = 2e-9
    drive_form: str = EXACT

    def __post_init__(self):
        if self.drive_form not in DRIVE_FORMS:
            raise DomainError(f"Unknown drive form '{self.drive_form}'; expected one of {DRIVE_FORMS}")

    def untruncated(self) -> 'SequenceSettings':
        """Wide window without ramps, approximating infinite pulses."""
        return replace(self, halfwidth=20.0, ramp=0.0)


DEFAULT_SETTINGS = SequenceSettings()


@dataclass
class ExperimentTrace:
    """Recorded populations and output field; final_state is after any closing gate."""
    times: np.ndarray
    populations: Dict[str, np.ndarray]
    output_field: np.ndarray
    final_state: DensityMatrix
    traces: np.ndarray
    min_eigenvalues: np.ndarray
    metadata: Dict = field(default_factory=dict)
    output_flux: Optional[np.ndarray] = None

    @property
    def output_power(self) -> np.ndarray:
        return np.abs(self.output_field) ** 2

    def final_populations(self) -> Dict[str, float]:
        return transmon_populations(self.final_state.entries, self.final_state.space)


@dataclass
class LagSweep:
    curve: Dict[float, float]
    best_offset: float
    best_efficiency: float
    refined_offset: float


@dataclass
class PhotonRecord:
    scenario: str
    times: np.ndarray
    field: np.ndarray
    power: np.ndarray
    integrated_power: float
    # detected photon number relative to emission from node B
    photon_number: float = float('nan')


def link_space(node_a: NodeModel, node_b: NodeModel) -> HilbertSpace:
    return HilbertSpace((('A.q', 3), ('A.r', node_a.fock_cutoff + 1),
                         ('B.q', 3), ('B.r', node_b.fock_cutoff + 1)))


def transmon_populations(rho: np.ndarray, space: HilbertSpace) -> Dict[str, float]:
    """Probabilities of the nine two-transmon states, summed over resonator states."""
    diag = np.real(np.diag(rho)).reshape(space.dims)
    grid = diag.sum(axis=(1, 3))
    return {label: float(grid[i, j])
            for (i, j), label in zip(product(range(3), range(3)), TRANSMON_LABELS)}


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

def _left(op):
    return sparse.kron(sparse.csr_matrix(op), sparse.identity(op.shape[0]), format='csr')


def _right(op):
    return sparse.kron(sparse.identity(op.shape[0]), sparse.csr_matrix(op), format='csr')


def _superoperator(hamiltonian: np.ndarray, jumps: Sequence[np.ndarray]) -> sparse.csr_matrix:
    """Row-major vectorized Lindbladian using H_eff = H - i/2 sum L^dag L."""
    n = hamiltonian.shape[0]
    h_eff = hamiltonian.astype(complex)
    for op in jumps:
        h_eff = h_eff - 0.5j * op.conj().T @ op
    sup = -1j * _left(h_eff) + 1j * _right(h_eff.conj())
    for op in jumps:
        sup = sup + sparse.kron(sparse.csr_matrix(op), sparse.csr_matrix(op.conj()), format='csr')
    sup.eliminate_zeros()
    return sup.tocsr()


def _qutrit_jumps(node: NodeModel) -> List[np.ndarray]:
    gamma_ge, gamma_ef = node.dephasing_rates()
    return [
        np.sqrt(1 / node.t1_ge) * transition(3, 0, 1),
        np.sqrt(1 / node.t1_ef) * transition(3, 1, 2),
        np.sqrt(gamma_ge) * np.diag([0, 1, 1]).astype(complex),
        np.sqrt(gamma_ef) * np.diag([0, 0, 1]).astype(complex),
    ]


@dataclass(frozen=True)
class LindbladGenerator:
    """G(t) = static + sum_k rate_k(t) * drive_k, acting on row-major vec(rho)."""
    space: HilbertSpace
    static: sparse.csr_matrix
    drives: Tuple[Tuple[Callable[[float], float], sparse.csr_matrix], ...] = ()
    output_operator: Optional[np.ndarray] = None
    t_span: Tuple[float, float] = (0.0, 0.0)

    def superoperator(self, t: float) -> sparse.csr_matrix:
        sup = self.static
        for rate, drive in self.drives:
            sup = sup + float(rate(t)) * drive
        return sup

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        out = self.static @ y
        for rate, drive in self.drives:
            g = float(rate(t))
            if g != 0.0:
                out = out + g * (drive @ y)
        return out

    def __call__(self, t: float, rho: np.ndarray) -> np.ndarray:
        """dρ/dt as a matrix."""
        n = self.space.total_dim
        return self.rhs(t, np.asarray(rho, dtype=complex).reshape(-1)).reshape(n, n)


def _shifted_rate(schedule: PulseSchedule, offset: float, t: float) -> float:
    return float(schedule.rate_at(t - offset))


def build_generator(node_a: NodeModel, node_b: NodeModel, link: LinkModel,
                    sched_a: Optional[PulseSchedule], sched_b: Optional[PulseSchedule],
                    delay_offset: float = 0.0, detuning: float = 0.0) -> LindbladGenerator:
    """
    Cascaded generator for emitter A feeding absorber B.

    sched_b runs in node B's retarded frame and is shifted by delay_offset;
    either schedule may be None for an undriven node. `detuning` is a
    residual sideband detuning applied to both resonators.
    """
    for sched, node in ((sched_a, node_a), (sched_b, node_b)):
        if sched is not None and not np.isclose(sched.kappa, node.kappa, rtol=1e-9):
            raise DomainError(
                f"Schedule built for kappa {sched.kappa:.6g} rad/s but node {node.label} has {node.kappa:.6g} rad/s")
    if link.propagation_delay < 0:
        raise DomainError(f"Negative propagation delay {link.propagation_delay}")

    space = link_space(node_a, node_b)
    a_a = embed(destroy(node_a.fock_cutoff + 1), space, 'A.r')
    a_b = embed(destroy(node_b.fock_cutoff + 1), space, 'B.r')

    def sideband(label: str, mode: np.ndarray) -> np.ndarray:
        lower = embed(transition(3, 0, 2), space, f'{label}.q')
        term = lower @ mode.conj().T
        return term + term.conj().T

    l_a = np.sqrt((1 - link.loss) * node_a.kappa) * a_a
    l_b = np.exp(1j * link.cascade_phase) * np.sqrt(node_b.kappa) * a_b
    cascade = l_a + l_b
    jumps = [cascade]
    if link.loss > 0:
        jumps.append(np.sqrt(link.loss * node_a.kappa) * a_a)
    for label, node in (('A', node_a), ('B', node_b)):
        for op in _qutrit_jumps(node):
            if np.any(op):
                jumps.append(embed(op, space, f'{label}.q'))

    h_static = (l_b.conj().T @ l_a - l_a.conj().T @ l_b) / 2j
    if detuning:
        h_static = h_static + detuning * (a_a.conj().T @ a_a + a_b.conj().T @ a_b)

    drives = []
    starts, stops = [], []
    for sched, label, mode, offset in ((sched_a, 'A', a_a, 0.0), (sched_b, 'B', a_b, delay_offset)):
        if sched is None:
            continue
        x = sideband(label, mode)
        drives.append((functools.partial(_shifted_rate, sched, offset), -1j * _left(x) + 1j * _right(x.T)))
        starts.append(sched.start_time + offset)
        stops.append(sched.stop_time + offset)

    span = (min(starts), max(stops)) if starts else (0.0, 0.0)
    return LindbladGenerator(space, _superoperator(h_static, jumps), tuple(drives), cascade, span)


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def _integrate(generator: LindbladGenerator, rho0: np.ndarray, t_grid: np.ndarray,
               settings: SequenceSettings) -> np.ndarray:
    n = generator.space.total_dim
    if len(t_grid) == 1:
        return rho0.reshape(1, n, n)
    sol = solve_ivp(generator.rhs, (t_grid[0], t_grid[-1]), rho0.reshape(-1).astype(complex),
                    method='DOP853', t_eval=t_grid, rtol=settings.rtol, atol=settings.atol,
                    max_step=settings.max_step)
    if sol.status != 0 or sol.y.shape[1] != len(t_grid):
        failed_at = float(sol.t[-1]) if len(sol.t) else float(t_grid[0])
        raise IntegrationError(f"Integration stopped at t = {failed_at * 1e9:.3f} ns: {sol.message}",
                               failed_at=failed_at)
    if not np.all(np.isfinite(sol.y)):
        raise IntegrationError("Integrator produced non-finite values", failed_at=float(t_grid[0]))
    logger.debug("Integrated %d grid points with %d RHS evaluations", len(t_grid), sol.nfev)
    return sol.y.T.reshape(len(t_grid), n, n)


def evolve(rho0: DensityMatrix, generator: LindbladGenerator, t_grid,
           settings: SequenceSettings = DEFAULT_SETTINGS) -> ExperimentTrace:
    """Integrate from t_grid[0] to t_grid[-1] recording at every grid time."""
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("Time grid must be non-empty and strictly increasing")
    if rho0.space.total_dim != generator.space.total_dim:
        raise DomainError("Initial state does not live in the generator's space")

    states = _integrate(generator, np.asarray(rho0.entries), t_grid, settings)
    space = generator.space
    pops = {label: np.empty(len(t_grid)) for label in TRANSMON_LABELS}
    out_op = generator.output_operator
    output = np.zeros(len(t_grid), dtype=complex)
    flux = np.zeros(len(t_grid))
    number_op = None if out_op is None else out_op.conj().T @ out_op
    traces = np.empty(len(t_grid))
    min_eigs = np.empty(len(t_grid))
    for k, rho in enumerate(states):
        hermitian = (rho + rho.conj().T) / 2
        if space.dims[0] == 3 and len(space.dims) == 4:
            for label, value in transmon_populations(hermitian, space).items():
                pops[label][k] = value
        if out_op is not None:
            output[k] = np.trace(out_op @ rho)
            flux[k] = np.trace(number_op @ hermitian).real
        traces[k] = np.trace(hermitian).real
        min_eigs[k] = np.linalg.eigvalsh(hermitian).min()

    final = (states[-1] + states[-1].conj().T) / 2
    return ExperimentTrace(
        times=t_grid,
        populations=pops,
        output_field=output,
        final_state=DensityMatrix(space, final, trace_tolerance=STATE_TOLERANCE),
        traces=traces,
        min_eigenvalues=min_eigs,
        output_flux=flux,
    )


# ---------------------------------------------------------------------------
# Preparation
# ---------------------------------------------------------------------------

def _prepared_qutrit(gate: np.ndarray, error_probability: float) -> np.ndarray:
    """gate|g> mixed with gate|e> (a residual excitation before the gates)."""
    good = gate @ basis_ket(3, 0)
    bad = gate @ basis_ket(3, 1)
    return ((1 - error_probability) * np.outer(good, good.conj())
            + error_probability * np.outer(bad, bad.conj()))


def initial_state(nodes: Tuple[NodeModel, NodeModel], preparation: str = 'ideal',
                  gate_a: np.ndarray = PREPARE_F, gate_b: Optional[np.ndarray] = None) -> DensityMatrix:
    """
    Empty resonators, qutrits prepared by gate_a / gate_b acting on |g>.

    'reset' and 'thermal' preparations start each qutrit with its
    reset_residual / thermal_population in |e> before the gates.
    """
    if preparation not in PREPARATIONS:
        raise ValueError(f"Unknown preparation '{preparation}'; expected one of {PREPARATIONS}")
    node_a, node_b = nodes
    gate_b = np.eye(3, dtype=complex) if gate_b is None else gate_b

    def error(node: NodeModel) -> float:
        if preparation == 'reset':
            return node.reset_residual
        if preparation == 'thermal':
            return node.thermal_population
        return 0.0

    vac_a = np.outer(basis_ket(node_a.fock_cutoff + 1, 0), basis_ket(node_a.fock_cutoff + 1, 0))
    vac_b = np.outer(basis_ket(node_b.fock_cutoff + 1, 0), basis_ket(node_b.fock_cutoff + 1, 0))
    parts = [_prepared_qutrit(gate_a, error(node_a)), vac_a, _prepared_qutrit(gate_b, error(node_b)), vac_b]
    return DensityMatrix(link_space(node_a, node_b), functools.reduce(np.kron, parts))


def apply_gate(rho: DensityMatrix, gate: np.ndarray, label: str) -> DensityMatrix:
    u = embed(gate, rho.space, label)
    out = u @ rho.entries @ u.conj().T
    return DensityMatrix(rho.space, (out + out.conj().T) / 2, trace_tolerance=rho.trace_tolerance)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def _schedules(nodes, gamma: float, settings: SequenceSettings) -> Tuple[PulseSchedule, PulseSchedule]:
    node_a, node_b = nodes
    kwargs = dict(sample_dt=settings.sample_dt, ramp=settings.ramp, halfwidth=settings.halfwidth,
                  form=settings.drive_form)
    return (build_schedule(gamma, node_a.kappa, EMISSION, **kwargs),
            build_schedule(gamma, node_b.kappa, ABSORPTION, **kwargs))


def _grid(t_start: float, t_stop: float, step: float) -> np.ndarray:
    if t_stop <= t_start:
        return np.array([t_start])
    n = int(np.ceil((t_stop - t_start) / step))
    return np.linspace(t_start, t_stop, n + 1)


def _run_sequence(nodes, link: LinkModel, gamma: float, delay_offset: float,
                  truncation: Optional[float], rho0: DensityMatrix,
                  settings: SequenceSettings) -> ExperimentTrace:
    node_a, node_b = nodes
    sched_a, sched_b = _schedules(nodes, gamma, settings)
    t_start = min(sched_a.start_time, sched_b.start_time + delay_offset)
    if truncation is None:
        t_stop = max(sched_a.stop_time, sched_b.stop_time + delay_offset)
    else:
        sched_a, sched_b = sched_a.truncated(truncation), sched_b.truncated(truncation)
        t_stop = max(sched_a.start_time, sched_b.start_time + delay_offset) + truncation

    generator = build_generator(node_a, node_b, link, sched_a, sched_b, delay_offset, settings.detuning)
    trace = evolve(rho0, generator, _grid(t_start, t_stop, settings.record_dt), settings)
    trace.final_state = apply_gate(trace.final_state, EF_PI, 'B.q')
    trace.metadata.update({
        'gamma': gamma,
        'delay_offset': delay_offset,
        'truncation': truncation,
        'lab_frame_offset': link.propagation_delay,
    })
    return trace


def run_transfer(nodes: Tuple[NodeModel, NodeModel], link: LinkModel, gamma: float,
                 delay_offset: float = 0.0, truncation: Optional[float] = None,
                 preparation: str = 'ideal', settings: SequenceSettings = DEFAULT_SETTINGS) -> ExperimentTrace:
    """
    Excitation transfer: A in |f,0>, B in |g,0>, emission at A, absorption at
    B (both truncated `truncation` after their own start), then an ideal e-f
    pi pulse at B. Recorded series are before the closing pulse.
    """
    rho0 = initial_state(nodes, preparation)
    trace = _run_sequence(nodes, link, gamma, delay_offset, truncation, rho0, settings)
    pops = trace.final_populations()
    logger.debug("Transfer (offset %.1f ns, tau %s): P(ge)=%.4f P(gg)=%.4f", delay_offset * 1e9,
                 'full' if truncation is None else f"{truncation * 1e9:.1f} ns", pops['ge'], pops['gg'])
    return trace


def _transfer_populations(nodes, link, gamma, delay_offset, preparation, settings, truncation):
    return run_transfer(nodes, link, gamma, delay_offset, truncation, preparation, settings).final_populations()


def _transfer_efficiency(nodes, link, gamma, preparation, settings, delay_offset):
    return run_transfer(nodes, link, gamma, delay_offset, None, preparation, settings).final_populations()['ge']


def truncation_sweep(nodes: Tuple[NodeModel, NodeModel], link: LinkModel, gamma: float,
                     tau_grid: Sequence[float], delay_offset: float = 0.0, preparation: str = 'ideal',
                     settings: SequenceSettings = DEFAULT_SETTINGS,
                     mapper: Callable = map) -> Dict[float, Dict[str, float]]:
    """Final two-transmon populations for every truncation time (mapper may be Pool.map)."""
    worker = functools.partial(_transfer_populations, nodes, link, gamma, delay_offset, preparation, settings)
    taus = [float(t) for t in tau_grid]
    return dict(zip(taus, mapper(worker, taus)))


def lag_sweep(nodes: Tuple[NodeModel, NodeModel], link: LinkModel, gamma: float,
              offsets: Sequence[float], preparation: str = 'ideal',
              settings: SequenceSettings = DEFAULT_SETTINGS, mapper: Callable = map) -> LagSweep:
    """Transfer efficiency P(ge) versus extra lag of the absorption pulse."""
    offsets = [float(o) for o in offsets]
    if not offsets:
        raise ValueError("Lag sweep needs at least one offset")
    worker = functools.partial(_transfer_efficiency, nodes, link, gamma, preparation, settings)
    efficiencies = list(mapper(worker, offsets))
    best = int(np.argmax(efficiencies))
    refined = offsets[best]
    if len(offsets) > 2 and best in (0, len(offsets) - 1):
        logger.warning("Lag sweep maximum at the grid edge (%.1f ns); widen the offset range", offsets[best] * 1e9)
    if 0 < best < len(offsets) - 1:
        x = np.array(offsets[best - 1:best + 2])
        y = np.array(efficiencies[best - 1:best + 2])
        a, b, _ = np.polyfit(x, y, 2)
        if a < 0:
            refined = float(np.clip(-b / (2 * a), x[0], x[-1]))
    logger.info("Lag sweep: best offset %.1f ns (refined %.2f ns), P(ge)=%.4f",
                offsets[best] * 1e9, refined * 1e9, efficiencies[best])
    return LagSweep(dict(zip(offsets, efficiencies)), offsets[best], float(efficiencies[best]), refined)


def protocol_duration(gamma: float, ramp: float = DEFAULT_RAMP, ef_gate: float = 24e-9,
                      offset: float = 0.0, guard_time: float = 0.0,
                      halfwidth: float = TRUNCATION_HALFWIDTH) -> float:
    """Emission pulse plus absorber offset plus closing e-f gate (lab frame)."""
    return 2 * halfwidth / gamma + 2 * ramp + offset + ef_gate + guard_time


# ---------------------------------------------------------------------------
# Photon envelopes
# ---------------------------------------------------------------------------

def _photon_trace(scenario: str, nodes, link: LinkModel, gamma: float,
                  settings: SequenceSettings, delay_offset: float = 0.0) -> ExperimentTrace:
    node_a, node_b = nodes
    sched_a, sched_b = _schedules(nodes, gamma, settings)
    if scenario == EMIT_FROM_A:
        drives, gates = (sched_a, None), (PREPARE_G_PLUS_F, None)
    elif scenario == EMIT_FROM_B:
        emit_b = build_schedule(gamma, node_b.kappa, EMISSION, sample_dt=settings.sample_dt,
                                ramp=settings.ramp, halfwidth=settings.halfwidth, form=settings.drive_form)
        drives, gates = (None, emit_b), (np.eye(3, dtype=complex), PREPARE_G_PLUS_F)
    elif scenario == EMIT_A_ABSORB_B:
        drives, gates = (sched_a, sched_b), (PREPARE_G_PLUS_F, None)
    else:
        raise ValueError(f"Unknown photon scenario '{scenario}'; expected one of {PHOTON_SCENARIOS}")

    rho0 = initial_state(nodes, 'ideal', gate_a=gates[0], gate_b=gates[1])
    # only the absorber's pulse is shifted; emission from B stays centered on t = 0
    offset = delay_offset if scenario == EMIT_A_ABSORB_B else 0.0
    generator = build_generator(node_a, node_b, link, *drives, delay_offset=offset, detuning=settings.detuning)
    # let the resonators ring down after the pulse
    t_stop = generator.t_span[1] + 10 / min(node_a.kappa, node_b.kappa)
    trace = evolve(rho0, generator, _grid(generator.t_span[0], t_stop, settings.record_dt), settings)
    trace.metadata['scenario'] = scenario
    trace.metadata['delay_offset'] = offset
    return trace


@functools.lru_cache(maxsize=32)
def _reference_power(node_b: NodeModel, gamma: float, settings: SequenceSettings) -> Tuple[float, float]:
    """Integrated |<a_out>|^2 and photon number of an emission from node B."""
    trace = _photon_trace(EMIT_FROM_B, (node_b, node_b), LinkModel(0.0), gamma, settings)
    return (float(trapezoid(trace.output_power, trace.times)),
            float(trapezoid(trace.output_flux, trace.times)))


def photon_records(scenario: str, nodes: Tuple[NodeModel, NodeModel], link: LinkModel, gamma: float,
                   settings: SequenceSettings = DEFAULT_SETTINGS, delay_offset: float = 0.0) -> PhotonRecord:
    """
    |<a_out>|^2 for an emitter prepared in (|g> + |f>)/sqrt(2), normalized so
    that emission from node B integrates to one. Times are lab-frame at the
    output of node A for emission from A. `photon_number` integrates
    <a_out^dag a_out> with the same normalization, so it counts incoherent
    output as well. `delay_offset` shifts node B's absorption pulse.
    """
    trace = _photon_trace(scenario, nodes, link, gamma, settings, delay_offset)
    reference, reference_number = _reference_power(nodes[1], gamma, settings)
    power = trace.output_power / reference
    return PhotonRecord(scenario, trace.times, trace.output_field / np.sqrt(reference), power,
                        float(trapezoid(power, trace.times)),
                        float(trapezoid(trace.output_flux, trace.times)) / reference_number)


def photon_power_ratios(nodes: Tuple[NodeModel, NodeModel], link: LinkModel, gamma: float,
                        settings: SequenceSettings = DEFAULT_SETTINGS,
                        delay_offset: float = 0.0) -> Dict[str, float]:
    """
    Loss and absorption efficiency from detected photon numbers: emission
    from A against emission from B, and the reflection off node B with its
    absorption pulse (lagged by delay_offset) against emission from A.
    The coherent-field ratio is reported alongside as field_transmission.
    """
    emit_a = photon_records(EMIT_FROM_A, nodes, link, gamma, settings)
    emit_b = photon_records(EMIT_FROM_B, nodes, link, gamma, settings)
    absorbed = photon_records(EMIT_A_ABSORB_B, nodes, link, gamma, settings, delay_offset)
    transmission = emit_a.photon_number / emit_b.photon_number
    absorption = 1 - absorbed.photon_number / emit_a.photon_number
    logger.info("Photon envelopes: transmission %.4f, absorption %.4f (B lagged %.1f ns)",
                transmission, absorption, delay_offset * 1e9)
    return {
        'transmission': transmission,
        'loss_estimate': 1 - transmission,
        'absorption_efficiency': absorption,
        'field_transmission': emit_a.integrated_power / emit_b.integrated_power,
    }



def envelope_overlap(times: np.ndarray, field_values: np.ndarray, shape: PhotonShape) -> float:
    """|<field, phi>| / (|field| |phi|) on the given grid."""
    phi = target_envelope(shape, times)
    inner = trapezoid(np.conj(phi) * field_values, times)
    norm_f = np.sqrt(trapezoid(np.abs(field_values) ** 2, times))
    norm_phi = np.sqrt(trapezoid(phi ** 2, times))
    if norm_f == 0:
        return 0.0
    return float(abs(inner) / (norm_f * norm_phi))


# ---------------------------------------------------------------------------
# Tomography protocols
# ---------------------------------------------------------------------------

def reference_phase(rho: np.ndarray, row: int, col: int) -> float:
    """Phase of rho[row, col]; the virtual-Z angle that makes it real positive."""
    return float(np.angle(rho[row, col]))


def frame_correction(rho: DensityMatrix, theta: float, label: str) -> DensityMatrix:
    """Virtual Z: diag(1, e^{-i theta}, 1) on factor `label`."""
    return apply_gate(rho, np.diag([1, np.exp(-1j * theta), 1]), label)


def qubit_transfer_outputs(nodes: Tuple[NodeModel, NodeModel], link: LinkModel, gamma: float,
                           delay_offset: float = 0.0, preparation: str = 'ideal',
                           settings: SequenceSettings = DEFAULT_SETTINGS,
                           mapper: Callable = map) -> List[Tuple[str, DensityMatrix]]:
    """
    Node B qutrit states after sending each of the six qubit inputs
    prepared at A (ge superposition, then e-f pi so |e> -> |f>).

    Node B's frame is rotated so that the +x output has a real positive
    g-e coherence.
    """
    labels = [label for label, _ in mutually_unbiased_states()]
    worker = functools.partial(_process_output, nodes, link, gamma, delay_offset, preparation, settings)
    raw = list(mapper(worker, labels))
    theta = reference_phase(raw[labels.index('+x')].entries, 1, 0)
    logger.debug("Process protocol frame correction: %.4f rad", theta)
    return [(label, frame_correction(rho, theta, 'B')) for label, rho in zip(labels, raw)]


def _process_output(nodes, link, gamma, delay_offset, preparation, settings, label) -> DensityMatrix:
    gate = EF_PI @ MUB_GATES[label]
    rho0 = initial_state(nodes, preparation, gate_a=gate)
    trace = _run_sequence(nodes, link, gamma, delay_offset, None, rho0, settings)
    reduced = partial_trace(trace.final_state, ['B.q'])
    return DensityMatrix(HilbertSpace.single('B', 3), reduced.entries, trace_tolerance=STATE_TOLERANCE)


def bell_state_protocol(nodes: Tuple[NodeModel, NodeModel], link: LinkModel, gamma: float,
                        delay_offset: float = 0.0, preparation: str = 'ideal',
                        settings: SequenceSettings = DEFAULT_SETTINGS) -> DensityMatrix:
    """
    A prepared in (|e> + |f>)/sqrt(2), its f part transferred to B. Returns the
    two-qutrit state of (A, B) with B's frame rotated so that the
    <eg|rho|ge> coherence is real positive.
    """
    rho0 = initial_state(nodes, preparation, gate_a=PREPARE_E_PLUS_F)
    trace = _run_sequence(nodes, link, gamma, delay_offset, None, rho0, settings)
    reduced = partial_trace(trace.final_state, ['A.q', 'B.q'])
    rho = DensityMatrix(HilbertSpace.qutrits('A', 'B'), reduced.entries, trace_tolerance=STATE_TOLERANCE)
    theta = reference_phase(rho.entries, 1, 3)
    return frame_correction(rho, theta, 'B')


# ---------------------------------------------------------------------------
# Single-qutrit checks
# ---------------------------------------------------------------------------

def ramsey_decay(node: NodeModel, transition_name: str, times: Sequence[float],
                 settings: SequenceSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Relative magnitude of the ge or ef coherence of an undriven qutrit."""
    levels = {'ge': (0, 1), 'ef': (1, 2)}
    if transition_name not in levels:
        raise ValueError(f"Unknown transition '{transition_name}'")
    lo, hi = levels[transition_name]
    space = HilbertSpace.single(node.label, 3)
    psi = (basis_ket(3, lo) + basis_ket(3, hi)) / np.sqrt(2)
    generator = LindbladGenerator(space, _superoperator(np.zeros((3, 3)), _qutrit_jumps(node)))
    times = np.asarray(times, dtype=float)
    states = _integrate(generator, np.outer(psi, psi.conj()), times, replace(settings, max_step=np.inf))
    return np.abs(states[:, lo, hi]) / 0.5
