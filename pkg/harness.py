import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from scipy import stats
from tqdm import tqdm

from baselines import (RegisterSketch, hyperloglog_estimate, loglog_estimate, mincount_estimate,
                       next_power_of_two)
from baselines import merge as merge_registers
from errors import DomainError, FormatError, IntegrityError, SketchError
from inference import (are_bernoulli, chernoff_bounds, expected_error_band,
                       optimal_bernoulli_p, optimal_lambda, psi_infinity,
                       required_m, storage_bits)
from order_sketch import (Estimate, EstimatorId, estimate_bernoulli_sketch,
                          estimate_continuous, estimate_geometric, estimate_kth)
from order_sketch import merge as merge_max
from projection_sketch import (ProjectionSketch, coupled_residuals, maxterm_stable_estimate,
                               median_estimate, proj_estimate, proj_merge)
from seeded_hash import Distribution, HashConfig, StreamElement
from serialization import new_sketch, sketch_type

logger = logging.getLogger(__name__)

REPORT_VERSION = 1

ALGORITHMS = ('max-uniform', 'max-exp', 'max-geom', 'kth', 'bernoulli',
              'projection', 'median', 'loglog', 'hll', 'mincount')
REGISTER_ALGORITHMS = ('loglog', 'hll', 'mincount')
# Algoritmos cujo c * S tem distribuição Gamma(m, 1), exata ou aproximada
PIVOT_ALGORITHMS = ('max-uniform', 'max-exp', 'projection')

# Limite das repetições no modelo de cauda pesada
HEAVY_TAIL_CAP = 1000


def _check_open_unit(name, value):
    if value is not None and not 0.0 < value < 1.0:
        raise ValueError(f"{name}={value} precisa estar estritamente em (0, 1).")
    return value


def _load_json(path):
    try:
        with open(path, 'r', encoding='utf-8') as file:
            return json.load(file)
    except json.JSONDecodeError as error:
        raise FormatError(f"'{path}' não é um JSON válido: {error}") from error


class ExperimentConfig(BaseModel):
    """
    Configuração de um experimento replicado.

    Args:
        c (int): Cardinalidade exata dos fluxos simulados.
        m (int): Tamanho dos sketches (arredondado para potência de dois nos baselines).
        algos (list): Algoritmos comparados.
        repeats (int): Repetições R de cada item distinto.
        repeat_model (str): 'fixed' (R vezes) ou 'heavy_tailed' (Zipf limitado).
        d_model (str): 'unit', 'random_positive' ou 'insert_delete'.
        replicates (int): Número de fluxos independentes.
        seed (int): Semente de 64 bits de tudo que é aleatório.
        alpha, q, p (float): Parâmetros do hashing; p=None usa lambda_0 / c.
        k (int): Ordem da estatística do algoritmo 'kth'.
        level (float): Nível dos intervalos de confiança.
        include_timing (bool): Inclui tempos de relógio (o relatório deixa de ser reprodutível).
    """
    model_config = ConfigDict(extra='forbid')

    c: int = Field(ge=1)
    m: int = Field(ge=1)
    algos: list[str] = Field(default_factory=lambda: ['max-exp'], min_length=1)
    repeats: int = Field(default=1, ge=1)
    repeat_model: Literal['fixed', 'heavy_tailed'] = 'fixed'
    d_model: Literal['unit', 'random_positive', 'insert_delete'] = 'unit'
    replicates: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    alpha: float = 0.05
    q: float = 10.0 / 11.0
    p: Optional[float] = None
    k: int = Field(default=3, ge=1)
    level: float = 0.95
    include_timing: bool = False

    @field_validator('algos')
    @classmethod
    def known_algorithms(cls, algos):
        unknown = [algo for algo in algos if algo not in ALGORITHMS]
        if unknown:
            raise ValueError(f"Algoritmos desconhecidos: {unknown}; use {list(ALGORITHMS)}.")
        return algos

    @field_validator('alpha', 'q', 'p', 'level')
    @classmethod
    def open_unit(cls, value, info):
        return _check_open_unit(info.field_name, value)

    @classmethod
    def from_file(cls, path):
        try:
            return cls.model_validate(_load_json(path))
        except ValidationError as error:
            raise FormatError(f"Configuração inválida em '{path}':\n{error}") from error

    def bernoulli_p(self):
        return self.p if self.p is not None else optimal_bernoulli_p(self.c)

    def sketch_m(self, algo):
        return next_power_of_two(self.m) if algo in REGISTER_ALGORITHMS else self.m


class AnalysisGrid(BaseModel):
    """ Grades de parâmetros da tabela de constantes (comando `analyze`). """
    model_config = ConfigDict(extra='forbid')

    lambdas: list[float] = Field(default_factory=lambda: [0.3, 1.0, 1.594, 2.0, 4.3])
    qs: list[float] = Field(default_factory=lambda: [0.5, 10.0 / 11.0])
    epsilons: list[float] = Field(default_factory=lambda: [0.05, 0.1])
    ms: list[int] = Field(default_factory=lambda: [512, 1024, 2048, 8192, 16384])
    deltas: list[float] = Field(default_factory=lambda: [0.05])
    cardinalities: list[int] = Field(default_factory=lambda: [10 ** 4, 10 ** 6])
    storage_q: float = 0.5
    level: float = 0.95

    @classmethod
    def from_file(cls, path):
        try:
            return cls.model_validate(_load_json(path))
        except ValidationError as error:
            raise FormatError(f"Grade inválida em '{path}':\n{error}") from error


# ==============================================================================
# ============================= FLUXOS E ORÁCULO ===============================
# ==============================================================================

def generate_stream(cfg, replicate=0):
    """
    Gera um fluxo simulado com exatamente c itens distintos vivos.

    Args:
        cfg (ExperimentConfig): Configuração do experimento.
        replicate (int): Índice da réplica; cada réplica tem itens próprios.
    Returns:
        list: StreamElements em ordem embaralhada, determinística em (seed, réplica).
    """
    rng = np.random.default_rng([cfg.seed, replicate])
    prefix = f"{replicate}-{int(rng.integers(2 ** 62)):x}"
    items = [f"{prefix}-{i}".encode('utf-8') for i in range(cfg.c)]

    if cfg.repeat_model == 'fixed':
        counts = np.full(cfg.c, cfg.repeats)
    else:
        counts = cfg.repeats * np.minimum(rng.zipf(2.0, size=cfg.c), HEAVY_TAIL_CAP)

    live = [item for item, count in zip(items, counts) for _ in range(count)]
    if cfg.d_model == 'random_positive':
        ds = rng.integers(1, 10, size=len(live)).tolist()
    else:
        ds = [1] * len(live)
    elements = [StreamElement(item, int(d)) for item, d in zip(live, ds)]

    deletions = []
    if cfg.d_model == 'insert_delete':
        # Itens fantasmas: inseridos e depois removidos por completo
        ghosts = [f"{prefix}-ghost-{i}".encode('utf-8') for i in range(cfg.c)]
        amounts = rng.integers(1, 10, size=cfg.c)
        elements += [StreamElement(g, int(a)) for g, a in zip(ghosts, amounts)]
        deletions = [StreamElement(g, -int(a)) for g, a in zip(ghosts, amounts)]

    order = rng.permutation(len(elements))
    stream = [elements[i] for i in order]
    stream += [deletions[i] for i in rng.permutation(len(deletions))]
    return stream


def exact_count(stream):
    """
    Cardinalidade exata: número de itens com quantidade acumulada positiva.
    Returns:
        int: |{i : a_i > 0}|.
    """
    totals = defaultdict(int)
    for elem in stream:
        totals[elem.item] += elem.d
    negative = [item for item, total in totals.items() if total < 0]
    if negative:
        raise IntegrityError(f"{len(negative)} itens com quantidade acumulada negativa.")
    return sum(1 for total in totals.values() if total > 0)


def read_stream(source):
    """
    Lê um fluxo no formato `<item>[<TAB><d>]`, um elemento por linha.

    Args:
        source (str | iterable): Caminho do arquivo ou linhas já abertas (texto ou bytes UTF-8).
    Returns:
        list: StreamElements; d ausente vale 1.
    """
    if isinstance(source, str):
        with open(source, 'rb') as file:
            return read_stream(file.readlines())

    stream = []
    for number, line in enumerate(source, start=1):
        if isinstance(line, bytes):
            try:
                line = line.decode('utf-8')
            except UnicodeDecodeError as error:
                raise FormatError(f"Linha {number}: texto não é UTF-8 válido.") from error
        line = line.rstrip('\r\n')
        if not line.strip():
            continue
        item, _, amount = line.partition('\t')
        if not item:
            raise FormatError(f"Linha {number}: item vazio.")
        try:
            d = int(amount) if amount else 1
        except ValueError as error:
            raise FormatError(f"Linha {number}: quantidade '{amount}' não é inteira.") from error
        stream.append(StreamElement(item.encode('utf-8'), d))
    return stream


# ==============================================================================
# ============================ CONSTRUÇÃO E ESTIMAÇÃO ==========================
# ==============================================================================

def build_sketch(algo, cfg):
    """ Sketch vazio usado pelo algoritmo (a mediana usa o de projeção). """
    kind = 'projection' if algo == 'median' else algo
    return new_sketch(kind, cfg.sketch_m(algo), cfg.seed, q=cfg.q, p=cfg.bernoulli_p(),
                      alpha=cfg.alpha, k=cfg.k if kind == 'kth' else None)


def merge_sketches(sketches):
    """ Combina uma lista de sketches do mesmo tipo, da esquerda para a direita. """
    if not sketches:
        raise DomainError("Nenhum sketch para combinar.")
    merged = sketches[0]
    for other in sketches[1:]:
        if isinstance(merged, ProjectionSketch):
            merged = proj_merge(merged, other)
        elif isinstance(merged, RegisterSketch):
            merged = merge_registers(merged, other)
        else:
            merged = merge_max(merged, other)
    return merged


def median_as_estimate(sketch, level=0.95):
    """ Mediana em forma de Estimate; a variância assintótica é (log 2)^-2 vezes a da projeção. """
    c_tilde = median_estimate(sketch)
    m = sketch.cfg.m
    std_error = c_tilde / (math.log(2.0) * math.sqrt(m))
    z = stats.norm.ppf((1.0 + level) / 2.0)
    return Estimate(c_tilde, std_error, (max(c_tilde - z * std_error, 0.0), c_tilde + z * std_error),
                    level, EstimatorId.MEDIAN, m)


def estimate_sketch(sketch, level=0.95, median=False):
    """
    Estimador natural de cada tipo de sketch.
    Args:
        sketch: Qualquer sketch do projeto.
        level (float): Nível do intervalo.
        median (bool): Para projeção, usa o estimador da mediana.
    Returns:
        Estimate
    """
    kind = sketch_type(sketch)
    if kind in ('max-uniform', 'max-exp'):
        return estimate_continuous(sketch, level)
    if kind == 'max-geom':
        return estimate_geometric(sketch, level)
    if kind == 'kth':
        return estimate_kth(sketch, level)
    if kind == 'bernoulli':
        return estimate_bernoulli_sketch(sketch, level)
    if kind == 'projection':
        return median_as_estimate(sketch, level) if median else proj_estimate(sketch, level)
    if kind == 'loglog':
        return loglog_estimate(sketch, level)
    if kind == 'hll':
        return hyperloglog_estimate(sketch, level)
    return mincount_estimate(sketch, level)


# ==============================================================================
# ================================ EXPERIMENTO =================================
# ==============================================================================

def _clean(value):
    """ NaN e infinitos viram None no JSON. """
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _clean(item) for key, item in value.items()}
    if isinstance(value, list):
        return [_clean(item) for item in value]
    return value


@dataclass
class ExperimentReport:
    """
    Resultado de `run_experiment`.

    Args:
        config (dict): Configuração usada.
        records (list): Uma linha por (réplica, algoritmo).
        failures (dict): Réplicas abortadas por erro, por algoritmo.
        summary (dict): Estatísticas agregadas por algoritmo.
    """
    config: dict
    records: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def to_dict(self):
        return _clean({
            'version': REPORT_VERSION,
            'config': self.config,
            'failures': self.failures,
            'summary': self.summary,
            'records': self.records,
        })

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_frame(self):
        return pd.DataFrame.from_records(self.records)

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False)
        logger.info("CSV das réplicas salvo em %s", path)

    def summary_lines(self):
        """ Resumo legível, um bloco por algoritmo. """
        lines = [f"------------ c = {self.config['c']}, m = {self.config['m']}, "
                 f"{self.config['replicates']} réplicas -------------"]
        for algo, stats_ in self.summary.items():
            lines.append(f"Algoritmo: {algo}")
            lines.append(f"Estimativa média: {stats_['mean_c_hat']:.2f}")
            lines.append(f"Erro percentual médio: {stats_['mean_percent_error']:.3f} "
                         f"(DP {stats_['sd_percent_error']:.3f}, faixa esperada {stats_['expected_error_band']:.2f})")
            lines.append(f"Cobertura do IC: {100 * stats_['coverage']:.1f}%")
            lines.append(f"ARE empírica: {stats_['empirical_are']:.3f}")
            if 'ks_statistic' in stats_:
                lines.append(f"KS do pivô: {stats_['ks_statistic']:.4f} (p = {stats_['ks_pvalue']:.4f})")
            lines.append(f"Bits de estado: {stats_['state_bits']}")
            lines.append(f"Avaliações de hash: {stats_['hash_evaluations']}")
            lines.append(f"Falhas: {self.failures.get(algo, 0)}\n")
        return lines


def _summarize(cfg, records):
    summary = {}
    by_algo = defaultdict(list)
    for record in records:
        by_algo[record['algo']].append(record)

    for algo in cfg.algos:
        rows = by_algo.get(algo, [])
        if not rows:
            continue
        c_hats = np.array([row['c_hat'] for row in rows])
        errors = np.array([row['percent_error'] for row in rows])
        m = rows[0]['m']
        variance = float(np.var(c_hats, ddof=1)) if len(rows) > 1 else float('nan')
        entry = {
            'replicates': len(rows),
            'm': m,
            'mean_c_hat': float(np.mean(c_hats)),
            'mean_percent_error': float(np.mean(errors)),
            'sd_percent_error': float(np.std(errors, ddof=1)) if len(rows) > 1 else 0.0,
            'variance': variance,
            'empirical_are': cfg.c ** 2 / (m * variance) if variance > 0 else float('nan'),
            'coverage': float(np.mean([row['covered'] for row in rows])),
            'expected_error_band': expected_error_band(m, cfg.level),
            'state_bits': int(max(row['state_bits'] for row in rows)),
            'hash_evaluations': int(sum(row['hash_evaluations'] for row in rows)),
        }
        if algo in PIVOT_ALGORITHMS and len(rows) > 1:
            pivots = np.array([row['pivot'] for row in rows])
            ks = stats.kstest(pivots, 'gamma', args=(m,))
            entry['ks_statistic'] = float(ks.statistic)
            entry['ks_pvalue'] = float(ks.pvalue)
        if cfg.include_timing:
            seconds = sum(row['seconds'] for row in rows)
            entry['seconds'] = seconds
            entry['items_per_second'] = sum(row['stream_length'] for row in rows) / seconds if seconds else None
        summary[algo] = entry

    for algo, entry in summary.items():
        entry['variance_ratio'] = {
            other: entry['variance'] / summary[other]['variance']
            for other in summary if other != algo and summary[other]['variance'] > 0
        }
    return summary


def run_replicate(cfg, replicate):
    """
    Uma réplica: gera o fluxo, alimenta um sketch por algoritmo e estima.
    Returns:
        tuple: Linhas de resultado e algoritmos que falharam.
    """
    stream = generate_stream(cfg, replicate)
    items = [elem.item for elem in stream]
    ds = [elem.d for elem in stream]
    records, failed = [], []
    sketches = {}

    for algo in cfg.algos:
        start = time.perf_counter()
        kind = 'projection' if algo == 'median' else algo
        try:
            if kind not in sketches:
                sketches[kind] = build_sketch(algo, cfg).update_many(items, ds)
            sketch = sketches[kind]
            estimate = estimate_sketch(sketch, cfg.level, median=(algo == 'median'))
        except SketchError as error:
            logger.info("Réplica %d, %s: %s", replicate, algo, error)
            failed.append(algo)
            continue

        record = {
            'replicate': replicate,
            'algo': algo,
            'm': estimate.m,
            'c': cfg.c,
            'c_hat': estimate.c_hat,
            'percent_error': estimate.percent_error(cfg.c),
            'std_error': estimate.std_error,
            'ci_low': estimate.ci[0],
            'ci_high': estimate.ci[1],
            'covered': bool(estimate.covers(cfg.c)),
            'pivot': cfg.c * estimate.m / estimate.c_hat if estimate.c_hat > 0 else float('nan'),
            'state_bits': sketch.state_bits(),
            'hash_evaluations': getattr(getattr(sketch, 'hasher', None), 'evaluations', len(items)),
            'stream_length': len(stream),
        }
        if cfg.include_timing:
            record['seconds'] = time.perf_counter() - start
        records.append(record)
    return records, failed


def run_experiment(cfg, progress=True):
    """
    Executa as réplicas e agrega os resultados.

    Args:
        cfg (ExperimentConfig): Configuração do experimento.
        progress (bool): Mostra a barra de progresso do tqdm.
    Returns:
        ExperimentReport: Relatório determinístico em (configuração, semente).
    """
    logger.info("Experimento: c=%d, m=%d, %d réplicas, algoritmos %s",
                cfg.c, cfg.m, cfg.replicates, cfg.algos)
    report = ExperimentReport(config=cfg.model_dump())
    failures = defaultdict(int)

    for replicate in tqdm(range(cfg.replicates), desc='Réplicas', disable=not progress):
        records, failed = run_replicate(cfg, replicate)
        report.records.extend(records)
        for algo in failed:
            failures[algo] += 1

    report.failures = dict(failures)
    report.summary = _summarize(cfg, report.records)
    logger.info("Experimento concluído: %d linhas, %d falhas", len(report.records), sum(failures.values()))
    return report


# ==============================================================================
# ======================= EQUIVALÊNCIA PROJEÇÃO / MÁXIMO =======================
# ==============================================================================

@dataclass
class EquivalenceReport:
    c: int
    m: int
    seed: int
    rows: list = field(default_factory=list)

    def median_residuals(self):
        """ Mediana (sobre réplicas) da mediana dos resíduos absolutos, por alpha decrescente. """
        by_alpha = defaultdict(list)
        for row in self.rows:
            by_alpha[row['alpha']].append(row['median_abs_residual'])
        return {alpha: float(np.median(values)) for alpha, values in sorted(by_alpha.items(), reverse=True)}

    def residuals_decreasing(self):
        values = list(self.median_residuals().values())
        return all(later < earlier for earlier, later in zip(values, values[1:]))

    def sandwich_ok(self):
        return all(row['sandwich_ok'] for row in self.rows)

    def to_dict(self):
        return _clean({
            'version': REPORT_VERSION,
            'c': self.c,
            'm': self.m,
            'seed': self.seed,
            'median_abs_residual': {repr(alpha): value for alpha, value in self.median_residuals().items()},
            'residuals_decreasing': self.residuals_decreasing(),
            'sandwich_ok': self.sandwich_ok(),
            'rows': self.rows,
        })

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def run_equivalence(c, m, alphas, seed=0, replicates=1, track=False, progress=False):
    """
    Compara os pivôs da projeção e do termo máximo com os mesmos variados estáveis.

    Args:
        c (int): Cardinalidade dos fluxos.
        m (int): Número de fluxos de hash.
        alphas (list): Índices alpha testados.
        seed (int): Semente dos itens e do hashing.
        replicates (int): Fluxos por alpha.
        track (bool): Checa o sanduíche a cada elemento.
        progress (bool): Barra de progresso.
    Returns:
        EquivalenceReport
    """
    if c < 1 or m < 1 or replicates < 1:
        raise DomainError("c, m e replicates precisam ser >= 1.")
    report = EquivalenceReport(c=c, m=m, seed=seed)
    stream_cfg = ExperimentConfig(c=c, m=m, seed=seed)
    streams = [generate_stream(stream_cfg, r) for r in range(replicates)]

    for alpha in tqdm(sorted(alphas, reverse=True), desc='alpha', disable=not progress):
        cfg = HashConfig(m=m, global_salt=seed, distribution=Distribution.STABLE, alpha=alpha)
        for replicate, stream in enumerate(streams):
            result = coupled_residuals(stream, cfg, track=track)
            projection = m / math.fsum(np.exp(-alpha * result.log_v))
            report.rows.append({
                'alpha': alpha,
                'replicate': replicate,
                'median_abs_residual': result.median_abs_residual(),
                'max_abs_residual': result.max_abs_residual(),
                'sandwich_ok': result.sandwich_ok,
                'sandwich_checks': result.checks,
                'projection_c_hat': projection,
                'maxterm_c_hat': maxterm_stable_estimate(result).c_hat,
            })
        logger.info("alpha=%.4g: %d réplicas comparadas", alpha, replicates)
    return report


# ==============================================================================
# ============================ TABELA DE CONSTANTES ============================
# ==============================================================================

def analyze_grid(grid):
    """
    Constantes de inferência para as grades pedidas.
    Returns:
        dict: lambda_0, ARE(lambda), psi_inf(q), C1/C2, m necessário e bits de armazenamento.
    """
    table = {
        'lambda_0': optimal_lambda(),
        'are_max': are_bernoulli(optimal_lambda()),
        'are_bernoulli': [{'lambda': lam, 'are': are_bernoulli(lam)} for lam in grid.lambdas],
        'psi_infinity': [{'q': q, 'psi': psi_infinity(q)} for q in grid.qs],
        'chernoff': [chernoff_bounds(eps, m).to_dict() for eps in grid.epsilons for m in grid.ms],
        'error_band': [{'m': m, 'percent': expected_error_band(m, grid.level)} for m in grid.ms],
        'required_m': [],
    }
    for eps in grid.epsilons:
        for delta in grid.deltas:
            m = required_m(eps, delta)
            table['required_m'].append({
                'epsilon': eps,
                'delta': delta,
                'm': m,
                'storage_bits': {str(c): storage_bits(m, c, grid.storage_q) for c in grid.cardinalities},
            })
    return table
