#!/usr/bin/env python3
"""
Command line entry point for kronround
"""
import asyncio
import json
import logging
import sys
from typing import Any, Dict, Optional

import click
from pydantic import ValidationError

import settings
from experiment_config import ExperimentConfigLoader, validation_details
from quant_server import QuantServer

logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler(sys.stderr),
        logging.FileHandler(settings.log_file)
    ]
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VERIFY_FAILED = 2


def call(tool_name: str, **kwargs) -> Dict[str, Any]:
    async def main():
        server = QuantServer()
        try:
            return await server.call_tool(tool_name, **kwargs)
        finally:
            await server.close()

    return asyncio.run(main())


def emit(result: Dict[str, Any], failure_code: int = EXIT_ERROR):
    """JSON on stdout; the exit code reflects success"""
    click.echo(json.dumps(result, indent=2, default=str))
    if not result.get('success'):
        sys.exit(EXIT_ERROR if 'error' in result else failure_code)


def quantizer_from(config_path: Optional[str], bits: Optional[int]) -> Optional[Dict[str, Any]]:
    """Quantizer section of an experiment config, or None for the tool default"""
    if config_path is None:
        return None if bits is None else {'bits': bits, 'mode': 'nearest', 'scale': {'step': 1.0}}
    try:
        config = ExperimentConfigLoader(config_path).load_config()
    except ValidationError as e:
        emit({'success': False, 'error': 'invalid configuration', 'error_type': 'validation',
              'details': validation_details(e)})
    return config.quantizer.to_spec(bits).to_dict()


@click.group()
def cli():
    """kronround - Kronecker-sketch adaptive rounding at desk scale"""
    pass


@cli.command(name='round')
@click.option('--bundle', 'bundle_dir', required=True, type=click.Path(exists=True, file_okay=False),
              help='Problem bundle directory (weights.krnd, h_in.krnd, optional h_out.krnd)')
@click.option('--algorithm', default='yaqa', show_default=True,
              help='nearest, ldlq, yaqa, yaqa-wavefront or guidedquant(g)')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
              help='Experiment config whose quantizer section is used')
@click.option('--bits', type=int, help='Override the quantizer bit width')
@click.option('--seed', default=0, show_default=True, type=click.IntRange(min=0))
@click.option('--ip', type=click.Choice(['on', 'off']), default='off', show_default=True,
              help='Incoherence processing')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), help='Directory for codes and result.json')
def round_command(bundle_dir, algorithm, config_path, bits, seed, ip, out_dir):
    """Round a problem bundle"""
    result = call('round', bundle_dir=bundle_dir, algorithm=algorithm, quantizer=quantizer_from(config_path, bits),
                  seed=seed, ip=ip == 'on', ip_seeds=(seed, seed + 1), out_dir=out_dir)
    emit(result)


@cli.command()
@click.option('--bundle', 'bundle_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--bits', type=int)
@click.option('--seed', default=0, show_default=True, type=click.IntRange(min=0))
@click.option('--hessian', type=click.Choice(['auto', 'fisher', 'sketch']), default='auto', show_default=True,
              help='Dense Fisher or the bundle sketch H_O (x) H_I')
def oracle(bundle_dir, config_path, bits, seed, hessian):
    """Vectorized brute-force rounding of a small bundle"""
    emit(call('oracle', bundle_dir=bundle_dir, quantizer=quantizer_from(config_path, bits), seed=seed,
              hessian=hessian))


@cli.command()
@click.option('--config', 'config_path', default='experiment_config.json', show_default=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option('--method', type=click.Choice(['ldlq', 'a', 'b', 'powerfull', 'vanloan']),
              help='Sketch method (default: from the config)')
@click.option('--iters', type=click.IntRange(min=0), help='Power iterations for Sketch A / full power iteration')
@click.option('--seed', default=0, show_default=True, type=click.IntRange(min=0))
@click.option('--ip', type=click.Choice(['on', 'off']), default='off', show_default=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), help='Bundle directory to write')
def sketch(config_path, method, iters, seed, ip, out_dir):
    """Build a Kronecker Hessian sketch for one toy-model layer"""
    emit(call('sketch', config_file=config_path, method=method, iters=iters, seed=seed, ip=ip == 'on',
              out_dir=out_dir))


@cli.command(name='bound-check')
@click.option('--bundle', 'bundle_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--bits', type=int)
@click.option('--trials', default=50, show_default=True, type=click.IntRange(min=1))
@click.option('--algorithm', default='yaqa', show_default=True)
@click.option('--seed', default=0, show_default=True, type=click.IntRange(min=0))
@click.option('--out', 'out_csv', type=click.Path(dir_okay=False), help='CSV of per-trial bound reports')
def bound_check(bundle_dir, config_path, bits, trials, algorithm, seed, out_csv):
    """Compare measured errors with the proxy and end-to-end bounds"""
    emit(call('bound_check', bundle_dir=bundle_dir, quantizer=quantizer_from(config_path, bits), trials=trials,
              seed=seed, algorithm=algorithm, out_csv=out_csv))


@cli.command()
@click.option('--config', 'config_path', default='experiment_config.json', show_default=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), help='Output directory (default: from the config)')
@click.option('--seed', type=click.IntRange(min=0), help='Override the master seed')
@click.option('--threads', default=settings.default_threads, show_default=True, type=click.IntRange(min=1))
def run(config_path, out_dir, seed, threads):
    """Run an experiment config"""
    overrides = {'seed': seed} if seed is not None else None
    emit(call('run_experiment', config_file=config_path, overrides=overrides, out_dir=out_dir, threads=threads))


@cli.command()
@click.option('--suite', default='all', show_default=True,
              type=click.Choice(['snd', 'oracle', 'bounds', 'sketch', 'transform', 'model', 'e2e', 'all']))
@click.option('--seed', default=0, show_default=True, type=click.IntRange(min=0))
def verify(suite, seed):
    """Run property suites; exit code 2 when a check fails"""
    emit(call('verify', suite=suite, seed=seed), failure_code=EXIT_VERIFY_FAILED)


@cli.command(name='list-tools')
def list_tools():
    """List available tools"""
    async def main():
        server = QuantServer()
        try:
            return await server.list_tools()
        finally:
            await server.close()

    result = asyncio.run(main())
    click.echo("Available Tools:")
    for tool in result['tools']:
        click.echo(f"\n{tool['name']}: {tool['description']}")
        if tool['parameters']:
            click.echo("  Parameters:")
            for param, config in tool['parameters'].items():
                required = "(required)" if config.get('required', False) else "(optional)"
                click.echo(f"    {param}: {config['type']} {required}")


if __name__ == '__main__':
    cli()
