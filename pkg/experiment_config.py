"""
Experiment configuration: INI profiles with explicit units in key names.

The shipped `profiles/measured_device.ini` is always read first and defines
the full schema; user files may only override keys that exist there.
Frequencies are entered as f = omega / 2pi in MHz and converted to rad/s.
"""

import configparser
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, LinkSimError
from link_dynamics import PREPARATIONS, LinkModel, NodeModel, SequenceSettings
from pulse_synthesis import DRIVE_FORMS
from waveguide_loss import WaveguideGeometry

logger = logging.getLogger(__name__)

PROFILE_DIR = Path(__file__).resolve().parent / 'profiles'
DEFAULT_PROFILE = PROFILE_DIR / 'measured_device.ini'
PROJECTED_PROFILE = PROFILE_DIR / 'projected.ini'
OUTPUT_ENV = 'QLINK_OUTPUT_DIR'

TWO_PI_MHZ = 2 * np.pi * 1e6
US, NS = 1e-6, 1e-9


@dataclass(frozen=True)
class ReadoutConfig:
    model: str = 'tuned'            # tuned | ideal
    error_a: float = 0.034
    error_b: float = 0.029
    drift_error: float = 0.05
    drift_error_joint: float = 0.08
    sigma: float = 1.0
    calibration_shots: int = 4000

    @property
    def drift_error_per_node(self) -> float:
        """Per-node error whose two-node product gives the joint drifted error."""
        return 1 - np.sqrt(1 - self.drift_error_joint)


@dataclass(frozen=True)
class TomographyConfig:
    shots: int = 4000
    mitigation: bool = True
    bootstrap: int = 0


@dataclass(frozen=True)
class SweepConfig:
    tau_step: float = 5 * NS
    lag_min: float = -30 * NS
    lag_max: float = 30 * NS
    lag_step: float = 2 * NS


@dataclass(frozen=True)
class WaveguideConfig:
    f0: float = 8.4056086e9
    q_loaded: float = 1e6
    geometry: WaveguideGeometry = WaveguideGeometry()
    length: float = 4.9
    alpha_bound_db_per_km: float = 1.0
    spectrum_csv: str = ''
    synthetic_noise: float = 0.01


@dataclass
class ExperimentConfig:
    node_a: NodeModel
    node_b: NodeModel
    link: LinkModel
    gamma: float
    settings: SequenceSettings
    lag: float
    preparation: str
    sweep: SweepConfig
    readout: ReadoutConfig
    tomography: TomographyConfig
    waveguide: WaveguideConfig
    master_seed: int
    output_dir: str
    formats: Tuple[str, ...]
    kappa_a_quoted: float
    calibration_degree: int = 3
    stark_degree: int = 2
    values: Dict[str, Dict[str, str]] = field(default_factory=dict)
    sources: Tuple[str, ...] = ()

    @property
    def nodes(self) -> Tuple[NodeModel, NodeModel]:
        return self.node_a, self.node_b

    @property
    def config_hash(self) -> str:
        return config_hash(self.values)

    def summary(self) -> Dict[str, float]:
        """Headline parameters in lab units."""
        return {
            'kappa_a_MHz': self.node_a.kappa / TWO_PI_MHZ,
            'kappa_b_MHz': self.node_b.kappa / TWO_PI_MHZ,
            'gamma_MHz': self.gamma / TWO_PI_MHZ,
            'loss': self.link.loss,
            'lag_ns': self.lag / NS,
            'propagation_delay_ns': self.link.propagation_delay / NS,
        }


def config_hash(values: Dict[str, Dict[str, str]]) -> str:
    canonical = json.dumps(values, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def derive_seed(master_seed: int, task_path: str) -> int:
    """64-bit seed for one task, independent of scheduling order."""
    digest = hashlib.sha256(f"{master_seed}:{task_path}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big')


def _read(path: Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=('#', ';'))
    try:
        with open(path, encoding='utf-8') as f:
            parser.read_file(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file '{path}' not found") from None
    except configparser.Error as e:
        raise ConfigError(f"Cannot parse '{path}': {e}") from None
    return parser


def _merge(base: Dict[str, Dict[str, str]], path: Path) -> None:
    """Overlay the keys of `path`; keys absent from the schema are rejected."""
    parser = _read(path)
    unknown = []
    for section in parser.sections():
        if section not in base:
            unknown.append(f"[{section}]")
            continue
        for key, value in parser.items(section, raw=True):
            if key not in base[section]:
                unknown.append(f"{section}.{key}")
            else:
                base[section][key] = value
    if unknown:
        raise ConfigError(f"Unknown configuration keys in '{path}': {', '.join(unknown)}", fields=unknown)


class _Values:
    """Typed access to merged values; errors name the offending field."""

    def __init__(self, values: Dict[str, Dict[str, str]]):
        self.values = values

    def text(self, section: str, key: str) -> str:
        return self.values[section][key].strip()

    def number(self, section: str, key: str, positive: bool = False, non_negative: bool = False) -> float:
        name = f"{section}.{key}"
        raw = self.text(section, key)
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"{name} must be a number, got '{raw}'", fields=[name]) from None
        if positive and not value > 0:
            raise ConfigError(f"{name} must be positive, got {value}", fields=[name])
        if non_negative and value < 0:
            raise ConfigError(f"{name} must be non-negative, got {value}", fields=[name])
        return value

    def integer(self, section: str, key: str, minimum: Optional[int] = None) -> int:
        name = f"{section}.{key}"
        raw = self.text(section, key)
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{name} must be an integer, got '{raw}'", fields=[name]) from None
        if minimum is not None and value < minimum:
            raise ConfigError(f"{name} must be at least {minimum}, got {value}", fields=[name])
        return value

    def flag(self, section: str, key: str) -> bool:
        raw = self.text(section, key).lower()
        if raw in ('1', 'true', 'yes', 'on'):
            return True
        if raw in ('0', 'false', 'no', 'off'):
            return False
        raise ConfigError(f"{section}.{key} must be true or false, got '{raw}'", fields=[f"{section}.{key}"])

    def probability(self, section: str, key: str, scale: float = 0.01) -> float:
        value = self.number(section, key, non_negative=True) * scale
        if value >= 1:
            raise ConfigError(f"{section}.{key} must be below 100 %", fields=[f"{section}.{key}"])
        return value


def _node(v: _Values, section: str, label: str) -> NodeModel:
    try:
        return NodeModel(
            label=label,
            t1_ge=v.number(section, 't1_ge_us', positive=True) * US,
            t1_ef=v.number(section, 't1_ef_us', positive=True) * US,
            t2e_ge=v.number(section, 't2e_ge_us', positive=True) * US,
            t2e_ef=v.number(section, 't2e_ef_us', positive=True) * US,
            kappa=v.number(section, 'kappa_mhz', positive=True) * TWO_PI_MHZ,
            thermal_population=v.probability(section, 'thermal_population_pct'),
            reset_residual=v.probability(section, 'reset_residual_pct'),
            fock_cutoff=v.integer(section, 'fock_cutoff', minimum=1),
            ramsey_ratio=v.number(section, 'ramsey_ratio', positive=True),
        )
    except ConfigError:
        raise
    except LinkSimError as e:
        raise ConfigError(f"[{section}] {e}", fields=[section]) from e


def _build(values: Dict[str, Dict[str, str]], sources: Sequence[str]) -> ExperimentConfig:
    v = _Values(values)
    node_a = _node(v, 'node_a', 'A')
    node_b = _node(v, 'node_b', 'B')
    try:
        link = LinkModel(
            loss=v.probability('link', 'loss_pct'),
            propagation_delay=v.number('link', 'propagation_delay_ns', non_negative=True) * NS,
            cascade_phase=v.number('link', 'cascade_phase_rad'),
        )
    except ConfigError:
        raise
    except LinkSimError as e:
        raise ConfigError(f"[link] {e}", fields=['link']) from e

    gamma = v.number('pulse', 'gamma_mhz', positive=True) * TWO_PI_MHZ
    if gamma > min(node_a.kappa, node_b.kappa) * (1 + 1e-12):
        raise ConfigError("pulse.gamma_mhz exceeds the smaller resonator bandwidth", fields=['pulse.gamma_mhz'])

    drive_form = v.text('pulse', 'drive_form')
    if drive_form not in DRIVE_FORMS:
        raise ConfigError(f"pulse.drive_form must be one of {DRIVE_FORMS}", fields=['pulse.drive_form'])
    settings = SequenceSettings(
        sample_dt=v.number('pulse', 'sample_dt_ns', positive=True) * NS,
        ramp=v.number('pulse', 'ramp_ns', non_negative=True) * NS,
        halfwidth=v.number('pulse', 'halfwidth_over_gamma', positive=True),
        record_dt=v.number('simulation', 'record_dt_ns', positive=True) * NS,
        ef_gate=v.number('pulse', 'ef_gate_ns', non_negative=True) * NS,
        guard_time=v.number('pulse', 'guard_ns', non_negative=True) * NS,
        detuning=v.number('pulse', 'residual_detuning_mhz') * TWO_PI_MHZ,
        rtol=v.number('simulation', 'rtol', positive=True),
        atol=v.number('simulation', 'atol', positive=True),
        max_step=v.number('simulation', 'max_step_ns', positive=True) * NS,
        drive_form=drive_form,
    )
    preparation = v.text('simulation', 'preparation')
    if preparation not in PREPARATIONS:
        raise ConfigError(f"simulation.preparation must be one of {PREPARATIONS}", fields=['simulation.preparation'])

    sweep = SweepConfig(
        tau_step=v.number('simulation', 'tau_step_ns', positive=True) * NS,
        lag_min=v.number('simulation', 'lag_min_ns') * NS,
        lag_max=v.number('simulation', 'lag_max_ns') * NS,
        lag_step=v.number('simulation', 'lag_step_ns', positive=True) * NS,
    )
    if sweep.lag_max <= sweep.lag_min:
        raise ConfigError("simulation.lag_max_ns must exceed lag_min_ns", fields=['simulation.lag_max_ns'])

    model = v.text('readout', 'model')
    if model not in ('tuned', 'ideal'):
        raise ConfigError("readout.model must be 'tuned' or 'ideal'", fields=['readout.model'])
    readout = ReadoutConfig(
        model=model,
        error_a=v.probability('readout', 'error_a_pct'),
        error_b=v.probability('readout', 'error_b_pct'),
        drift_error=v.probability('readout', 'drift_error_pct'),
        drift_error_joint=v.probability('readout', 'drift_error_joint_pct'),
        sigma=v.number('readout', 'sigma', positive=True),
        calibration_shots=v.integer('readout', 'calibration_shots', minimum=1),
    )
    tomography = TomographyConfig(
        shots=v.integer('tomography', 'shots', minimum=1),
        mitigation=v.flag('tomography', 'mitigation'),
        bootstrap=v.integer('tomography', 'bootstrap', minimum=0),
    )
    try:
        waveguide = WaveguideConfig(
            f0=v.number('waveguide', 'f0_ghz', positive=True) * 1e9,
            q_loaded=v.number('waveguide', 'q_loaded', positive=True),
            geometry=WaveguideGeometry(width_a=v.number('waveguide', 'width_mm', positive=True) * 1e-3),
            length=v.number('waveguide', 'length_m', non_negative=True),
            alpha_bound_db_per_km=v.number('waveguide', 'alpha_bound_db_per_km', positive=True),
            spectrum_csv=v.text('waveguide', 'spectrum_csv'),
            synthetic_noise=v.number('waveguide', 'synthetic_noise', non_negative=True),
        )
    except ConfigError:
        raise
    except LinkSimError as e:
        raise ConfigError(f"[waveguide] {e}", fields=['waveguide']) from e

    formats = tuple(f.strip() for f in v.text('output', 'formats').split(',') if f.strip())
    bad = [f for f in formats if f not in ('csv', 'json')]
    if bad or not formats:
        raise ConfigError(f"output.formats must list csv and/or json, got {v.text('output', 'formats')!r}",
                          fields=['output.formats'])

    return ExperimentConfig(
        node_a=node_a,
        node_b=node_b,
        link=link,
        gamma=gamma,
        settings=settings,
        lag=v.number('pulse', 'lag_ns') * NS,
        preparation=preparation,
        sweep=sweep,
        readout=readout,
        tomography=tomography,
        waveguide=waveguide,
        master_seed=v.integer('seeds', 'master', minimum=0),
        output_dir=v.text('output', 'directory') or os.environ.get(OUTPUT_ENV, 'results'),
        formats=formats,
        kappa_a_quoted=v.number('node_a', 'kappa_quoted_mhz', positive=True) * TWO_PI_MHZ,
        calibration_degree=v.integer('pulse', 'calibration_degree', minimum=1),
        stark_degree=v.integer('pulse', 'stark_degree', minimum=0),
        values=values,
        sources=tuple(sources),
    )


def load_config(path=None, overlays: Sequence = ()) -> ExperimentConfig:
    """
    Shipped defaults, then the user file, then any overlay profiles.
    An empty or missing-section user file yields the defaults.
    """
    parser = _read(DEFAULT_PROFILE)
    values = {section: dict(parser.items(section, raw=True)) for section in parser.sections()}
    sources = [str(DEFAULT_PROFILE)]
    for extra in ([path] if path else []) + list(overlays):
        _merge(values, Path(extra))
        sources.append(str(extra))
    config = _build(values, sources)
    logger.info("Loaded configuration from %s (hash %s)", ', '.join(sources), config.config_hash[:12])
    return config


def with_overlay(config: ExperimentConfig, overlay) -> ExperimentConfig:
    """Reload `config` with one more profile layered on top."""
    user = [s for s in config.sources[1:]]
    return load_config(user[0] if user else None, overlays=user[1:] + [overlay])
