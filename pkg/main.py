import functools
import json
import logging
import sys

import click

from errors import NumericError, SketchError
from harness import (AnalysisGrid, ExperimentConfig, analyze_grid, estimate_sketch,
                     merge_sketches, read_stream, run_equivalence, run_experiment)
from serialization import SKETCH_TYPES, dumps, load, new_sketch

logger = logging.getLogger(__name__)

# ==============================================================================
# CONFIGURAÇÃO GLOBAL
# ==============================================================================
EXIT_DATA_ERROR = 3
EXIT_NUMERIC_ERROR = 4

default_sketch_params = {
    'm': 1024,
    'seed': 0,
    'q': 10.0 / 11.0,
    'p': 0.01,
    'alpha': 0.05,
    'k': 3,
}

default_experiment_params = {
    'c': 10 ** 4,
    'm': 512,
    'algos': ['max-exp', 'max-geom', 'hll', 'mincount', 'projection', 'median'],
    'replicates': 20,
    'seed': 0,
}


def handle_errors(command):
    """ Converte os erros do projeto nos códigos de saída da CLI (3 dados, 4 numérico). """
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except NumericError as error:
            click.echo(f"Erro numérico: {error}", err=True)
            sys.exit(EXIT_NUMERIC_ERROR)
        except (SketchError, OSError) as error:
            click.echo(f"Erro: {error}", err=True)
            sys.exit(EXIT_DATA_ERROR)
    return wrapper


def write_output(data, out):
    with click.open_file(out, 'wb') as file:
        file.write(data)


@click.group()
@click.option('-v', '--verbose', is_flag=True, help='Log em nível DEBUG.')
def cli(verbose):
    """ Estimação de cardinalidade com sketches de termo máximo e projeções estáveis. """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format='%(asctime)s %(name)s %(levelname)s: %(message)s',
        stream=sys.stderr,
    )


@cli.command()
@click.option('--type', 'kind', type=click.Choice(SKETCH_TYPES), required=True)
@click.option('--m', type=click.IntRange(min=1), default=default_sketch_params['m'], show_default=True)
@click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=default_sketch_params['seed'])
@click.option('--q', type=float, default=default_sketch_params['q'], show_default=True)
@click.option('--p', type=float, default=default_sketch_params['p'], show_default=True)
@click.option('--alpha', type=float, default=default_sketch_params['alpha'], show_default=True)
@click.option('--k', type=click.IntRange(min=1), default=default_sketch_params['k'], show_default=True)
@click.option('--in', 'source', type=click.File('rb'), default='-')
@click.option('--out', default='-', help='Arquivo de saída (padrão: stdout).')
@click.option('--binary', is_flag=True, help='Frame binário em vez de JSON.')
@handle_errors
def sketch(kind, m, seed, q, p, alpha, k, source, out, binary):
    """ Constrói um sketch a partir de um fluxo `<item>[TAB<d>]`. """
    stream = read_stream(source)
    result = new_sketch(kind, m, seed, q=q, p=p, alpha=alpha, k=k if kind == 'kth' else None)
    result.update_many([elem.item for elem in stream], [elem.d for elem in stream])
    logger.info("Sketch %s com %d elementos", kind, len(stream))
    write_output(dumps(result, binary), out)


@cli.command()
@click.argument('paths', nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option('--out', default='-', help='Arquivo de saída (padrão: stdout).')
@click.option('--binary', is_flag=True, help='Frame binário em vez de JSON.')
@handle_errors
def merge(paths, out, binary):
    """ Combina sketches compatíveis. """
    merged = merge_sketches([load(path) for path in paths])
    write_output(dumps(merged, binary), out)


@cli.command()
@click.argument('path', type=click.Path(dir_okay=False))
@click.option('--level', type=float, default=0.95, show_default=True)
@click.option('--median', is_flag=True, help='Estimador da mediana para sketches de projeção.')
@handle_errors
def estimate(path, level, median):
    """ Estima a cardinalidade de um sketch salvo (JSON na saída). """
    result = estimate_sketch(load(path), level, median=median)
    click.echo(json.dumps(result.to_dict(), sort_keys=True))


@cli.command()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='JSON com a configuração do experimento.')
@click.option('--csv', 'csv_path', type=click.Path(dir_okay=False), default=None,
              help='Salva uma linha por réplica em CSV.')
@click.option('--out', default='-', help='Relatório JSON (padrão: stdout).')
@click.option('--quiet', is_flag=True, help='Sem barra de progresso nem resumo.')
@handle_errors
def simulate(config_path, csv_path, out, quiet):
    """ Roda um experimento replicado e emite o relatório. """
    if config_path is None:
        cfg = ExperimentConfig(**default_experiment_params)
    else:
        cfg = ExperimentConfig.from_file(config_path)
    report = run_experiment(cfg, progress=not quiet)
    write_output(report.to_json().encode('utf-8'), out)
    if csv_path:
        report.write_csv(csv_path)
    if not quiet:
        for line in report.summary_lines():
            click.echo(line, err=True)


@cli.command()
@click.option('--grid', 'grid_path', type=click.Path(dir_okay=False), default=None,
              help='JSON com as grades de parâmetros.')
@handle_errors
def analyze(grid_path):
    """ Tabela de constantes de inferência. """
    grid = AnalysisGrid() if grid_path is None else AnalysisGrid.from_file(grid_path)
    click.echo(json.dumps(analyze_grid(grid), sort_keys=True, indent=2))


def parse_alphas(ctx, param, value):
    try:
        alphas = [float(part) for part in value.split(',') if part.strip()]
    except ValueError:
        raise click.BadParameter("use uma lista separada por vírgulas, ex. 0.2,0.1,0.05")
    if not alphas or not all(0.0 < alpha < 1.0 for alpha in alphas):
        raise click.BadParameter("cada alpha precisa estar em (0, 1)")
    return alphas


@cli.command()
@click.option('--c', type=click.IntRange(min=1), required=True)
@click.option('--m', type=click.IntRange(min=1), required=True)
@click.option('--alphas', callback=parse_alphas, default='0.2,0.1,0.05,0.02', show_default=True)
@click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=0)
@click.option('--replicates', type=click.IntRange(min=1), default=1, show_default=True)
@click.option('--track', is_flag=True, help='Checa o sanduíche a cada elemento.')
@handle_errors
def equivalence(c, m, alphas, seed, replicates, track):
    """ Compara os pivôs da projeção e do termo máximo com hashing estável. """
    report = run_equivalence(c, m, alphas, seed=seed, replicates=replicates, track=track)
    click.echo(report.to_json())


if __name__ == '__main__':
    cli()
