"""Command-line front end.

Exit codes: 0 success, 2 invalid input (configuration, program, image or argument errors),
3 runtime failure (e.g. eigenlevel labelling), 4 geometry fit did not converge.
"""
import argparse
import contextlib
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from nvreg import __version__
from nvreg.config import ConfigError, RunConfig, load_config, parse_quantity
from nvreg.dynamics import DecoherenceParams, fidelity
from nvreg.locate import ConvergenceError, DeerDataset, enumerate_sites, fit_geometry, strain_report
from nvreg.optics import (
    DEFAULT_BIN_WIDTH_NS,
    DEFAULT_BINS,
    DEFAULT_LIFETIMES_NS,
    DEFAULT_PHOTONS,
    DEFAULT_PITCH_NM,
    DEFAULT_PIXELS,
    DEFAULT_PSF_FWHM_NM,
    FlimFormatError,
    analyze_flim,
    read_flim,
    symmetric_emitters,
    synthesize_flim,
    write_matrix_csv,
)
from nvreg.primitives import NvregError
from nvreg.sequences import (
    ProgramError,
    ProgramSyntaxError,
    PulseProgram,
    SignalTrace,
    bell_target,
    build_named,
    conditional_phase_sign,
    entangling_tau,
    parse_program,
    render_program,
    run_program,
    state_probe,
)
from nvreg.spincore import CONSTANTS, NVCenter, SpinPairSystem, nv_axes, scaled_to_coupling

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3
EXIT_CONVERGENCE = 4
DEFAULT_FIDELITY_T2 = (200e-6, 500e-6, 1e-3, 2e-3)
INPUT_ERRORS = (ConfigError, ProgramSyntaxError, ProgramError, FlimFormatError, ValueError, OSError)

_handler: Optional[logging.Handler] = None


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    global _handler
    root = logging.getLogger()
    if _handler is not None:
        root.removeHandler(_handler)
    _handler = logging.StreamHandler(sys.stderr)
    _handler.setFormatter(logging.Formatter('%(levelname)s: %(name)s: %(message)s'))
    root.addHandler(_handler)
    root.setLevel(logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO)


@contextlib.contextmanager
def _output(args: argparse.Namespace, suffix: str = ''):
    if args.out and not args.stdout:
        with open(args.out + suffix, 'w', encoding='utf-8', newline='\n') as f:
            yield f
    else:
        yield sys.stdout


def _header_lines(cfg: Optional[RunConfig], extra: Sequence[str] = ()) -> List[str]:
    lines = [f'nvreg {__version__}']
    if cfg is not None:
        lines.append(f'seed = {cfg.seed}')
    lines.extend(extra)
    if cfg is not None:
        lines.append('config:')
        lines.extend(cfg.to_ini().splitlines())
    return lines


def _require_config(args: argparse.Namespace) -> RunConfig:
    if not args.config:
        raise ConfigError(f'{args.command} requires --config')
    cfg = load_config(args.config).with_seed(args.seed)
    cfg.raise_for_seed()
    return cfg


def _system(cfg: RunConfig) -> SpinPairSystem:
    if cfg.target_coupling is None:
        return cfg.system
    system = scaled_to_coupling(cfg.system, cfg.field_setting, cfg.target_coupling)
    logger.info(f'Displacement scaled to {system.distance * 1e9:.4f} nm for {cfg.target_coupling:.6g} Hz')
    return system


def program_from_config(cfg: RunConfig) -> PulseProgram:
    if cfg.sequence_file is not None:
        with open(cfg.sequence_file, encoding='utf-8') as f:
            return parse_program(f.read(), os.path.splitext(os.path.basename(cfg.sequence_file))[0])
    if cfg.sequence_name is not None:
        return build_named(cfg.sequence_name, dict(cfg.sequence_params))
    raise ConfigError('Section [sequence] needs a name or a file')


def _write_gnuplot(path: str, data_path: str, xlabel: str, ylabel: str) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write("set datafile separator ','\n")
        f.write("set datafile commentschars '#'\n")
        f.write('set key autotitle columnhead\n')
        f.write(f"set xlabel '{xlabel}'\n")
        f.write(f"set ylabel '{ylabel}'\n")
        f.write(f"plot '{os.path.basename(data_path)}' using 1:2 with linespoints\n")


def _write_trace(args: argparse.Namespace, trace: SignalTrace, headers: List[str], xlabel: str, ylabel: str):
    with _output(args) as f:
        trace.write_csv(f, headers)
    if getattr(args, 'gnuplot', False):
        if not args.out or args.stdout:
            logger.warning('--gnuplot needs --out, no script written')
        else:
            _write_gnuplot(args.out + '.gp', args.out, xlabel, ylabel)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _require_config(args)
    program = program_from_config(cfg)
    system = _system(cfg)
    trace = run_program(
        program,
        system,
        cfg.field_setting,
        cfg.decoherence,
        CONSTANTS,
        cfg.readout,
        cfg.seed,
        cfg.p0_a,
        cfg.p0_b,
        cfg.frame,
        cfg.threads,
    )
    headers = _header_lines(cfg, ['program:'] + render_program(program).splitlines())
    _write_trace(args, trace, headers, program.sweep.variable if program.sweep else 'point', 'signal')
    return EXIT_OK


def _default_template() -> SpinPairSystem:
    axis = tuple(nv_axes()[0])
    return SpinPairSystem(NVCenter(axis), NVCenter(axis), (0.0, 0.0, 1e-8))


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else None
    template = cfg.system if cfg is not None else _default_template()
    dataset = DeerDataset.read_csv(args.dataset)
    estimate = fit_geometry(dataset, template, threads=cfg.threads if cfg else None)
    confidence = cfg.fit_confidence if cfg else 1.0
    basis = cfg.fit_basis if cfg else 0
    sites = enumerate_sites(estimate.displacement, estimate.covariance, confidence, basis)
    lines = estimate.report_lines()
    lines.append(f'sites = {len(sites)}')
    a, b = template.center_a, template.center_b
    if a.e > 0.0 and b.e > 0.0:
        lines.extend(strain_report(estimate.displacement, a.axis, estimate.axis_b, (a.e, b.e)).lines())
    with _output(args) as f:
        f.write('\n'.join(lines) + '\n')
    with _output(args, '.sites.csv') as f:
        f.write('n1,n2,n3,sublattice,x_m,y_m,z_m,mahalanobis\n')
        for s in sites:
            x, y, z = s.position
            f.write(f'{s.indices[0]},{s.indices[1]},{s.indices[2]},{s.sublattice},{x!r},{y!r},{z!r},{s.mahalanobis!r}\n')
    return EXIT_OK


def _parse_assignments(items: Sequence[str]) -> Dict[str, str]:
    params = {}
    for item in items:
        key, sep, value = item.partition('=')
        if not sep or not key.strip():
            raise ValueError(f'Expected KEY=VALUE: {item!r}')
        params[key.strip()] = value.strip()
    return params


def _flim_lifetimes(params: Dict[str, str]):
    return (
        parse_quantity(params.get('tau1', f'{DEFAULT_LIFETIMES_NS[0]}ns'), 'time', 'ns') * 1e9,
        parse_quantity(params.get('tau2', f'{DEFAULT_LIFETIMES_NS[1]}ns'), 'time', 'ns') * 1e9,
    )


def synthesize_from_params(params: Dict[str, str], seed: Optional[int]):
    known = {'d', 'angle', 'seed', 'photons', 'fwhm', 'tau1', 'tau2', 'pixels', 'pitch', 'bins', 'bin_width'}
    unknown = sorted(set(params) - known)
    if unknown:
        raise ValueError(f'Unknown --synthesize keys: {unknown}')
    distance = parse_quantity(params.get('d', '8nm'), 'length', 'nm') * 1e9
    angle = np.radians(float(params.get('angle', '0')))
    if seed is None and 'seed' in params:
        seed = int(params['seed'])
    emitters = symmetric_emitters((distance * np.cos(angle), distance * np.sin(angle)), _flim_lifetimes(params))
    return synthesize_flim(
        emitters,
        parse_quantity(params.get('fwhm', f'{DEFAULT_PSF_FWHM_NM}nm'), 'length', 'nm') * 1e9,
        float(params.get('photons', DEFAULT_PHOTONS)),
        seed,
        int(params.get('pixels', DEFAULT_PIXELS)),
        parse_quantity(params.get('pitch', f'{DEFAULT_PITCH_NM}nm'), 'length', 'nm') * 1e9,
        int(params.get('bins', DEFAULT_BINS)),
        parse_quantity(params.get('bin_width', f'{DEFAULT_BIN_WIDTH_NS}ns'), 'time', 'ns') * 1e9,
    )


def cmd_flim(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else None
    params = dict(cfg.flim) if cfg is not None else {}
    params.update(_parse_assignments(args.synthesize or []))
    if args.image:
        with open(args.image, encoding='utf-8') as f:
            image = read_flim(f)
    elif args.synthesize is not None or params:
        image = synthesize_from_params(params, args.seed)
    else:
        raise ConfigError('flim needs --image or --synthesize')
    a1, a2, estimate = analyze_flim(image, _flim_lifetimes(params))
    lines = [
        'displacement_nm = ' + ' '.join(f'{v:.4f}' for v in estimate.vector),
        'uncertainty_nm = ' + ' '.join(f'{v:.4f}' for v in estimate.uncertainty),
        f'distance_nm = {estimate.magnitude:.4f}',
        f'flat = {str(estimate.flat).lower()}',
        f'amplitude_totals = {a1.sum():.6g} {a2.sum():.6g}',
    ]
    with _output(args) as f:
        f.write('\n'.join(lines) + '\n')
    if args.out and not args.stdout:
        for suffix, matrix in (('.a1.csv', a1), ('.a2.csv', a2)):
            with open(args.out + suffix, 'w', encoding='utf-8', newline='\n') as f:
                write_matrix_csv(matrix, f)
    return EXIT_OK


def cmd_fidelity(args: argparse.Namespace) -> int:
    cfg = _require_config(args)
    system = _system(cfg)
    tau = cfg.fidelity_tau if cfg.fidelity_tau is not None else entangling_tau(system, cfg.field_setting)
    program = build_named('entangle_phi', {'tau': tau})
    target = bell_target('phi', conditional_phase_sign(system, cfg.field_setting))
    t2_values = sorted(set(cfg.fidelity_t2 or DEFAULT_FIDELITY_T2))
    values = []
    for t2 in t2_values:
        dec = DecoherenceParams(t2_a=t2, t2_b=t2)
        state = state_probe(program, len(program.events) - 1, system, cfg.field_setting, dec)
        values.append(fidelity(state, target))
        logger.info(f'T2 = {t2 * 1e6:.1f} us: fidelity {values[-1]:.6f}')
    trace = SignalTrace(t2_values, values, 'fidelity_vs_t2', {'tau': tau})
    headers = _header_lines(cfg, [f'tau = {tau!r} s'])
    _write_trace(args, trace, headers, 'T2 (s)', 'Bell fidelity')
    return EXIT_OK


def cmd_parse(args: argparse.Namespace) -> int:
    with open(args.program, encoding='utf-8') as f:
        program = parse_program(f.read(), os.path.basename(args.program))
    logger.info(f'{len(program.events)} events, sweep {program.sweep.variable if program.sweep else "none"}')
    with _output(args) as f:
        f.write(render_program(program))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='INI run configuration')
    common.add_argument('--out', help='output file; companion files use it as prefix')
    common.add_argument('--seed', type=int, help='overrides [run] seed')
    common.add_argument('--stdout', action='store_true', help='write data to stdout only')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true')
    verbosity.add_argument('-q', '--quiet', action='store_true')

    parser = argparse.ArgumentParser(prog='nvreg', description='Coupled NV-centre pair simulator')
    parser.add_argument('--version', action='version', version=f'nvreg {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('run', parents=[common], help='run a pulse sequence and write its signal trace')
    p.add_argument('--gnuplot', action='store_true')
    p.set_defaults(func=cmd_run)

    p = sub.add_parser('fit', parents=[common], help='fit the relative position from a DEER dataset')
    p.add_argument('dataset', help='CSV with columns bx_T,by_T,bz_T,observable,value_hz,sigma_hz')
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser('flim', parents=[common], help='displacement of two emitters from a FLIM image')
    p.add_argument('--image', help='FLIM text file')
    p.add_argument('--synthesize', nargs='*', metavar='KEY=VALUE', help='synthesize an image instead')
    p.set_defaults(func=cmd_flim)

    p = sub.add_parser('fidelity', parents=[common], help='Bell-state fidelity versus T2')
    p.add_argument('--gnuplot', action='store_true')
    p.set_defaults(func=cmd_fidelity)

    p = sub.add_parser('parse', parents=[common], help='check and normalize a pulse program')
    p.add_argument('program', help='pulse program file')
    p.set_defaults(func=cmd_parse)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except ConvergenceError as e:
        logger.error(str(e))
        return EXIT_CONVERGENCE
    except INPUT_ERRORS as e:
        logger.error(str(e))
        return EXIT_INPUT
    except NvregError as e:
        logger.error(str(e))
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
