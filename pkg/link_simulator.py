#!/usr/bin/env python3
"""
Quantum Link Simulator - command-line entry point

Runs the experiment pipelines against a parameter profile and writes
plot-ready datasets, a JSON summary and a run manifest.
"""

import argparse
import logging
import sys
from pathlib import Path

from errors import ConfigError, LinkSimError
from experiment_config import load_config
from experiment_runner import COMMANDS, VERSION, ExperimentRunner

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='link_simulator',
        description='Pulse-level simulator for a deterministic microwave quantum link',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Transfer populations versus truncation time with the default profile
  %(prog)s run truncation

  # Process tomography with a custom profile, fixed seed, four workers
  %(prog)s run process --config my_device.ini --seed 7 --out results/ --jobs 4

  # Check a profile without running anything
  %(prog)s validate --config my_device.ini

  # Fit a drive calibration and convert the emission pulse to amplitudes
  %(prog)s calibrate --points calibration.csv

Commands:
  truncation   final two-transmon populations versus truncation time
  process      qubit process matrix, with and without readout mitigation
  bell         remote entangled state, fidelity and concurrence
  photons      photon envelopes, channel loss, absorption efficiency
  lag_scan     transfer efficiency versus extra absorber lag
  waveguide    resonance fits and attenuation bounds
  projected    fidelities for improved device parameters
        """
    )
    parser.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    sub = parser.add_subparsers(dest='verb', required=True)

    run = sub.add_parser('run', help='Run one experiment command')
    run.add_argument('command', choices=COMMANDS)
    run.add_argument('--config', help='Parameter profile overriding the defaults')
    run.add_argument('--seed', type=int, help='Master seed (default: [seeds] master)')
    run.add_argument('--out', help='Output directory (default: [output] directory, $QLINK_OUTPUT_DIR, ./results)')
    run.add_argument('--jobs', type=int, default=1, help='Worker processes for sweeps (default: 1)')

    validate = sub.add_parser('validate', help='Validate a parameter profile')
    validate.add_argument('--config', help='Parameter profile overriding the defaults')

    sub.add_parser('version', help='Print the toolkit version')

    calibrate = sub.add_parser('calibrate', help='Fit the drive calibration')
    calibrate.add_argument('--points', required=True, help='CSV with columns A, g_MHz, delta_MHz')
    calibrate.add_argument('--config', help='Parameter profile overriding the defaults')
    calibrate.add_argument('--out', help='Output directory')
    return parser


def main(argv=None) -> int:
    """Main entry point for the script."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    if args.verb == 'version':
        print(f"link_simulator {VERSION}")
        return EXIT_OK

    try:
        if args.config and not Path(args.config).exists():
            raise ConfigError(f"Config file '{args.config}' not found", fields=['--config'])
        config = load_config(args.config)

        if args.verb == 'validate':
            print(f"Configuration OK (hash {config.config_hash[:12]})")
            for name, value in config.summary().items():
                print(f"  {name}: {value:.6g}")
            return EXIT_OK

        if args.verb == 'calibrate':
            print(f"Fitting calibration points: {args.points}")
            result = ExperimentRunner(config, args.out).calibrate(args.points)
            for path in result['artifacts']:
                print(f"  wrote {path}")
            print("\nDone!")
            return EXIT_OK

        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1", fields=['--jobs'])
        runner = ExperimentRunner(config, args.out, args.seed, args.jobs)
        print(f"Running {args.command} (seed {runner.seed}) into {runner.out_dir}")
        manifest = runner.run(args.command)
        print(f"Wrote {len(manifest.artifacts)} artifacts in {manifest.wall_time:.1f} s")
        summary = runner.out_dir / f"{args.command}_report.txt"
        if summary.exists():
            print()
            print(summary.read_text())
        print("Done!")
        return EXIT_OK

    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (LinkSimError, OSError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logging.getLogger(__name__).exception("Unexpected failure")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
