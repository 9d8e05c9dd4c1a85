#!/usr/bin/env python3

import argparse
import sys

from .cli.commands import Commands
from .cli.ui import UI
from .config.experiment import ExperimentConfig
from .config.settings import EVAL_POOLS, SPLIT_MODES
from .errors import ConfigError, TraceGPError

COMMANDS = {
    'kernel': Commands.build_kernel,
    'train': Commands.train,
    'evaluate': Commands.evaluate,
    'cv': Commands.cross_validate,
    'synth': Commands.synth,
    'cfg': Commands.show_config,
}


class CustomArgumentParser(argparse.ArgumentParser):
    def print_help(self, file=None):
        UI.print_help()

    def error(self, message):
        raise ConfigError(f"Usage error: {message}")


def build_parser() -> CustomArgumentParser:
    parser = CustomArgumentParser(description='Trace-norm MV-GP ranking')

    # Global options
    parser.add_argument('--config', '-c', help='Experiment config file (JSON)')
    parser.add_argument('--out', '-o', dest='output_dir', help='Output directory')
    parser.add_argument('--seed', type=int, help='Random seed (default: from config or TRACEGP_SEED)')
    parser.add_argument('--verbose', action='store_true', help='Debug logging')
    parser.add_argument('--version', '-v', action='version',
                        version=f'%(prog)s {__import__("tracegp").__version__}',
                        help='Show version')

    # Inputs
    parser.add_argument('--graph', dest='row_graph', help='Row graph file')
    parser.add_argument('--col-graph', dest='col_graph', help='Column graph file')
    parser.add_argument('--labels', help='Training labels file')
    parser.add_argument('--test-labels', dest='test_labels', help='Test labels file')
    parser.add_argument('--manifest', help='Model manifest written by train')
    parser.add_argument('--scores', help='Dense score matrix (KRNL) evaluated in place of models')

    # Experiment overrides
    parser.add_argument('--add-identity', dest='add_identity', action='store_true', default=None,
                        help='Use exp(-L) + I as the kernel')
    parser.add_argument('--mode', choices=SPLIT_MODES, help='Cross-validation split mode')
    parser.add_argument('--pool', choices=EVAL_POOLS, help='Candidate pool for ranking metrics')
    parser.add_argument('--negative-sets', dest='n_negative_sets', type=int,
                        help='Number of sampled negative sets (0 uses labels as given)')

    # Command argument
    parser.add_argument('command', nargs='?', choices=list(COMMANDS),
                        help='Command to execute (kernel, train, evaluate, cv, synth, cfg)')
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        UI.setup_logging(args.verbose)
        if not args.command:
            parser.print_help()
            return

        overrides = {
            key: getattr(args, key)
            for key in ('output_dir', 'seed', 'row_graph', 'col_graph', 'labels', 'test_labels',
                        'manifest', 'scores', 'add_identity', 'mode', 'pool', 'n_negative_sets')
        }
        config = ExperimentConfig.load(args.config).with_environment().with_overrides(overrides)
        COMMANDS[args.command](config)

    except TraceGPError as e:
        UI.print_error(str(e))
        sys.exit(e.exit_code)
    except KeyboardInterrupt:
        UI.print_warning("\nOperation cancelled by user")
        sys.exit(1)
    except Exception as e:
        UI.print_error(f"An unexpected error occurred: {str(e)}")
        sys.exit(1)


if __name__ == '__main__':
    main()
