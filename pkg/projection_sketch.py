import functools
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate, optimize, special
from scipy.special import logsumexp
from scipy.stats import qmc

from errors import (AccuracyWarning, DomainError, IncompatibleSketchError,
                    InvalidStateError, UnsupportedDeletionError)
from order_sketch import Estimate, EstimatorId, check_level, chunks, gamma_interval
from seeded_hash import Distribution, SeededHash, item_digests, stable_variate

logger = logging.getLogger(__name__)

# Acima disso o pivô Gamma(m, 1) deixa de ser uma boa aproximação
ALPHA_WARNING = 0.1

# Tolerância (escala log) da checagem do sanduíche V^alpha / M
SANDWICH_TOLERANCE = 1e-12

QMC_LOG2_POINTS = 23


def _add_signed(log_mag, signs, axis=0):
    """ Soma sinalizada em escala log; zero vira (sinal 0, -inf). """
    with np.errstate(divide='ignore', invalid='ignore'):
        total, sign = logsumexp(log_mag, b=signs, axis=axis, return_sign=True)
    zero = ~np.isfinite(total) | (sign == 0)
    total = np.where(zero, -np.inf, total)
    sign = np.where(zero, 0, sign).astype(np.int8)
    return total, sign


class ProjectionSketch:
    """
    Projeções aleatórias V_j = soma_t d_t h_j(i_t) com hashing estável positivo.

    Cada V_j fica guardado como (sinal, log |V_j|), já que para alpha pequeno
    os variados estáveis estão muito fora do alcance de um double. Aceita
    quantidades negativas (remoções).
    """
    def __init__(self, cfg):
        if cfg.distribution is not Distribution.STABLE:
            raise DomainError("O sketch de projeção exige hashing estável.")
        self.cfg = cfg
        self.hasher = SeededHash(cfg)
        self.stream_length = 0
        self.signs = np.zeros(cfg.m, dtype=np.int8)
        self.log_mag = np.full(cfg.m, -np.inf)

    @property
    def m(self):
        return self.cfg.m

    def update(self, elem):
        """ Soma d * h_j(item) em cada acumulador. """
        return self.update_many([elem.item], [elem.d])

    def update_many(self, items, ds=None):
        """
        Ingestão em lote de elementos com sinal.
        Args:
            items (list): Itens do fluxo.
            ds (list, optional): Quantidades inteiras; padrão 1 para todos.
        Returns:
            ProjectionSketch: O próprio sketch, atualizado.
        """
        if len(items) == 0:
            return self
        ds = np.ones(len(items)) if ds is None else np.asarray(ds, dtype=np.float64)
        # Soma exata das quantidades por item antes do hash: inserção e remoção
        # do mesmo item no lote se anulam sem erro de ponto flutuante
        digests, inverse = np.unique(item_digests(items, self.cfg.global_salt), return_inverse=True)
        amounts = np.zeros(len(digests))
        np.add.at(amounts, inverse, ds)
        live = amounts != 0.0
        digests, amounts = digests[live], amounts[live]

        for block in chunks(np.arange(len(digests)), self.cfg.m):
            log_x = self.hasher.variates(digests[block])
            d = amounts[block]
            with np.errstate(divide='ignore'):
                terms = log_x + np.log(np.abs(d))[:, None]
            term_signs = np.broadcast_to(np.sign(d)[:, None], terms.shape)
            self.log_mag, self.signs = _add_signed(
                np.vstack([self.log_mag[None, :], terms]),
                np.vstack([self.signs[None, :], term_signs]),
            )
            logger.debug("Bloco de %d elementos projetado (m=%d)", len(block), self.cfg.m)
        self.stream_length += len(items)
        return self

    def copy(self):
        clone = ProjectionSketch(self.cfg)
        clone.signs = self.signs.copy()
        clone.log_mag = self.log_mag.copy()
        clone.stream_length = self.stream_length
        return clone

    def compatible_with(self, other):
        return isinstance(other, ProjectionSketch) and self.cfg == other.cfg

    def is_empty(self):
        return not np.any(self.signs)

    def state_bits(self):
        # Um double e um bit de sinal por fluxo
        return 65 * self.cfg.m

    def values(self):
        """ V_j em escala linear; estoura para alpha pequeno. """
        with np.errstate(over='ignore'):
            return self.signs * np.exp(self.log_mag)

    def __eq__(self, other):
        return (self.compatible_with(other)
                and np.array_equal(self.signs, other.signs)
                and np.array_equal(self.log_mag, other.log_mag))


def proj_update(sketch, elem):
    return sketch.update(elem)


def proj_merge(a, b):
    """
    Soma duas projeções fluxo a fluxo (as projeções são lineares).
    Returns:
        ProjectionSketch: Sketch da concatenação dos dois fluxos.
    """
    if not a.compatible_with(b):
        raise IncompatibleSketchError("Sketches com configurações diferentes não podem ser combinados.")
    merged = a.copy()
    merged.log_mag, merged.signs = _add_signed(
        np.vstack([a.log_mag, b.log_mag]),
        np.vstack([a.signs, b.signs]),
    )
    merged.stream_length = a.stream_length + b.stream_length
    return merged


def _positive_log_values(sketch):
    if np.any(sketch.signs <= 0):
        raise InvalidStateError("Estimação exige todos os V_j positivos (quantidades a_i >= 0).")
    return sketch.log_mag


# ==============================================================================
# ================================ ESTIMADORES =================================
# ==============================================================================

def proj_estimate(sketch, level=0.95, debias=True):
    """
    Estimador c_hat = m / (Gamma(1 + alpha) soma V_j^(-alpha)).

    Para a lei estável positiva E[X^-alpha] = 1 / Gamma(1 + alpha), então o
    fator Gamma(1 + alpha) deixa o pivô c Gamma(1 + alpha) soma V_j^-alpha com
    média exatamente m; sem ele a média fica acima de m em cerca de
    0.58 alpha m.

    Args:
        sketch (ProjectionSketch): Sketch com todos os V_j positivos.
        level (float): Nível do intervalo (pivô aproximado ~ Gamma(m, 1)).
        debias (bool): Com False usa a forma sem correção, m / soma V_j^-alpha.
    Returns:
        Estimate: Estimativa com erro padrão c_hat / sqrt(m).
    """
    check_level(level)
    log_v = _positive_log_values(sketch)
    alpha, m = sketch.cfg.alpha, sketch.cfg.m
    if alpha > ALPHA_WARNING:
        warnings.warn(f"alpha={alpha} > {ALPHA_WARNING}: o pivô Gamma é pouco preciso.", AccuracyWarning)
    statistic = math.fsum(np.exp(-alpha * log_v))
    if debias:
        statistic *= math.exp(special.gammaln(1.0 + alpha))
    c_hat = m / statistic
    return Estimate(
        c_hat=c_hat,
        std_error=c_hat / math.sqrt(m),
        ci=gamma_interval(statistic, m, level),
        level=level,
        estimator_id=EstimatorId.PROJECTION,
        m=m,
    )


def median_estimate(sketch, method='quad'):
    """
    Estimador pela mediana amostral: c_tilde = (V_mediana / mu)^alpha,
    com mu a mediana de F_alpha.

    Args:
        sketch (ProjectionSketch): Sketch com todos os V_j positivos.
        method (str): Método de `stable_median`.
    Returns:
        float: c_tilde.
    """
    log_v = _positive_log_values(sketch)
    if sketch.cfg.m % 2 == 0:
        warnings.warn("m par: a mediana é a média geométrica dos dois V centrais.", AccuracyWarning)
    alpha = sketch.cfg.alpha
    return math.exp(alpha * (float(np.median(log_v)) - stable_median(alpha, method)))


def _log_kanter_weight(u, alpha):
    """ log A(u), com P(X <= x) = integral_0^1 exp(-A(u) x^(-alpha/(1-alpha))) du. """
    return (alpha / (1.0 - alpha) * np.log(np.sin(alpha * np.pi * u))
            + np.log(np.sin((1.0 - alpha) * np.pi * u))
            - np.log(np.sin(np.pi * np.minimum(u, 1.0 - u))) / (1.0 - alpha))


def _median_by_quadrature(alpha):
    beta = alpha / (1.0 - alpha)

    def excess(t):
        def integrand(u):
            with np.errstate(over='ignore'):
                return float(np.exp(-np.exp(_log_kanter_weight(u, alpha) - beta * t)))
        value, _ = integrate.quad(integrand, 0.0, 1.0, limit=200, epsabs=1e-12, epsrel=1e-10)
        return value - 0.5

    # Para alpha -> 0, alpha log mu -> -log log 2
    center = -math.log(math.log(2.0)) / alpha
    width = 4.0 / alpha
    low, high = center - width, center + width
    while excess(low) > 0.0:
        low -= width
    while excess(high) < 0.0:
        high += width
    return optimize.brentq(excess, low, high, xtol=1e-12, rtol=1e-14)


def _median_by_qmc(alpha):
    sampler = qmc.Sobol(d=2, scramble=True, seed=0)
    points = sampler.random_base2(QMC_LOG2_POINTS)
    points = np.clip(points, 2.0 ** -53, 1.0 - 2.0 ** -53)
    log_x = stable_variate(points[:, 0], -np.log1p(-points[:, 1]), alpha)
    return float(np.median(log_x))


@functools.lru_cache(maxsize=None)
def stable_median(alpha, method='quad'):
    """
    Mediana da lei estável positiva F_alpha, em escala log.

    Args:
        alpha (float): Índice em (0, 1).
        method (str): 'quad' resolve F(x) = 1/2 pela integral exata da
            representação de Kanter; 'qmc' usa o quantil de 2^23 pares de Sobol.
    Returns:
        float: log mu.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha={alpha} precisa estar estritamente em (0, 1).")
    if method == 'quad':
        log_mu = _median_by_quadrature(alpha)
    elif method == 'qmc':
        log_mu = _median_by_qmc(alpha)
    else:
        raise DomainError(f"Método '{method}' desconhecido (use 'quad' ou 'qmc').")
    logger.debug("Mediana de F_%.4g por %s: log mu = %.10g", alpha, method, log_mu)
    return log_mu


# ==============================================================================
# ====================== EQUIVALÊNCIA ENTRE OS DOIS SKETCHES ===================
# ==============================================================================

@dataclass
class CoupledResult:
    """
    Projeção e termo máximo construídos com os mesmos variados estáveis.

    Args:
        alpha (float): Índice da lei estável.
        log_v (np.ndarray): log V_j.
        log_max (np.ndarray): log M_j, com M_j = max X_i^alpha.
        residuals (np.ndarray): V_j^(-alpha) - 1 / M_j.
        log_ratio (np.ndarray): log(V_j^alpha / M_j).
        lower (float): Cota inferior de log(V^alpha / M).
        upper (float): Cota superior de log(V^alpha / M).
        violations (int): Quantas checagens do sanduíche falharam.
        checks (int): Quantas checagens foram feitas.
    """
    alpha: float
    log_v: np.ndarray
    log_max: np.ndarray
    residuals: np.ndarray
    log_ratio: np.ndarray
    lower: float
    upper: float
    violations: int = 0
    checks: int = 0

    @property
    def m(self):
        return len(self.log_v)

    @property
    def sandwich_ok(self):
        return self.violations == 0

    def median_abs_residual(self):
        return float(np.median(np.abs(self.residuals)))

    def max_abs_residual(self):
        return float(np.max(np.abs(self.residuals)))


def _sandwich_violations(log_ratio, lower, upper):
    return int(np.count_nonzero((log_ratio < lower - SANDWICH_TOLERANCE)
                                | (log_ratio > upper + SANDWICH_TOLERANCE)))


def coupled_residuals(stream, cfg, alpha=None, track=False):
    """
    Constrói projeção e termo máximo em uma passada, com os mesmos variados
    por (item, j), e mede o quanto os dois pivôs diferem.

    O resíduo usa o limite G_alpha(y) -> exp(-1/y) da função de distribuição
    do máximo: r_j = V_j^(-alpha) - 1 / M_j. Vale sempre
    a_min^alpha <= V^alpha / M <= (soma a_i)^alpha.

    Args:
        stream (iterable): StreamElements com d > 0.
        cfg (HashConfig): Configuração do hashing (m e sal).
        alpha (float, optional): Substitui cfg.alpha.
        track (bool): Checa o sanduíche depois de cada elemento.
    Returns:
        CoupledResult: Estados, resíduos e resultado das checagens.
    """
    alpha = cfg.alpha if alpha is None else alpha
    hasher = SeededHash(replace(cfg, distribution=Distribution.STABLE, alpha=alpha))
    elements = list(stream)
    if not elements:
        raise DomainError("Fluxo vazio: não há o que comparar.")
    if any(elem.d <= 0 for elem in elements):
        raise UnsupportedDeletionError("A comparação exige fluxo só com inserções (d > 0).")

    log_v = np.full(cfg.m, -np.inf)
    signs = np.zeros(cfg.m, dtype=np.int8)
    log_max = np.full(cfg.m, -np.inf)
    quantities = defaultdict(int)
    violations = checks = 0

    digests = item_digests([elem.item for elem in elements], cfg.global_salt)
    log_d = np.log([float(elem.d) for elem in elements])
    # Com track o bloco tem um elemento só, para checar depois de cada um
    blocks = ([np.array([t]) for t in range(len(elements))] if track
              else chunks(np.arange(len(elements)), cfg.m))
    for block in blocks:
        log_x = hasher.variates(digests[block])
        log_v, signs = _add_signed(
            np.vstack([log_v[None, :], log_x + log_d[block][:, None]]),
            np.vstack([signs[None, :], np.ones(log_x.shape, dtype=np.int8)]),
        )
        log_max = np.maximum(log_max, alpha * log_x.max(axis=0))
        for t in block:
            quantities[elements[t].item] += elements[t].d
        if track:
            lower, upper = _sandwich_bounds(quantities, alpha)
            violations += _sandwich_violations(alpha * log_v - log_max, lower, upper)
            checks += 1

    lower, upper = _sandwich_bounds(quantities, alpha)
    log_ratio = alpha * log_v - log_max
    violations += _sandwich_violations(log_ratio, lower, upper)
    checks += 1
    if violations:
        logger.warning("Sanduíche V^alpha/M violado %d vezes", violations)

    return CoupledResult(
        alpha=alpha,
        log_v=log_v,
        log_max=log_max,
        residuals=np.exp(-alpha * log_v) - np.exp(-log_max),
        log_ratio=log_ratio,
        lower=lower,
        upper=upper,
        violations=violations,
        checks=checks,
    )


def _sandwich_bounds(quantities, alpha):
    values = quantities.values()
    return alpha * math.log(min(values)), alpha * math.log(sum(values))


def maxterm_stable_estimate(result, level=0.95):
    """
    Estimador de termo máximo com hashing estável, pelo limite G_alpha(y) = exp(-1/y):
    c_hat = m / soma 1 / M_j, com c soma 1/M_j aproximadamente Gamma(m, 1).
    """
    check_level(level)
    statistic = math.fsum(np.exp(-result.log_max))
    c_hat = result.m / statistic
    return Estimate(
        c_hat=c_hat,
        std_error=c_hat / math.sqrt(result.m),
        ci=gamma_interval(statistic, result.m, level),
        level=level,
        estimator_id=EstimatorId.MAXTERM_STABLE,
        m=result.m,
    )
