import functools
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import optimize, stats

from errors import DomainError

# Corte relativo das somas infinitas
SERIES_TOLERANCE = 1e-16


@dataclass(frozen=True)
class TailBound:
    """ Cotas de Chernoff para as caudas do estimador contínuo. """
    epsilon: float
    m: int
    upper: float
    lower: float
    c1: float
    c2: float

    def to_dict(self):
        return asdict(self)


def _check_open_unit(name, value):
    if not 0.0 < value < 1.0:
        raise DomainError(f"{name}={value} precisa estar estritamente em (0, 1).")


# ==============================================================================
# ============================ HASHING DE BERNOULLI ============================
# ==============================================================================

def are_bernoulli(lam):
    """
    Eficiência relativa assintótica do hashing de Bernoulli com p = lambda / c.

    Args:
        lam (float | np.ndarray): lambda > 0.
    Returns:
        float | np.ndarray: lambda^2 / (e^lambda - 1).
    """
    lam = np.asarray(lam, dtype=np.float64)
    if not np.all(lam > 0.0):
        raise DomainError("lambda precisa ser positivo.")
    are = lam ** 2 / np.expm1(lam)
    return float(are) if are.ndim == 0 else are


@functools.lru_cache(maxsize=None)
def optimal_lambda():
    """ Raiz positiva de lambda = 2 (1 - e^-lambda), aproximadamente 1.594. """
    return optimize.brentq(lambda lam: lam + 2.0 * np.expm1(-lam), 0.5, 3.0, xtol=1e-15, rtol=1e-15)


def optimal_bernoulli_p(c0):
    """ Taxa p que maximiza a informação de Fisher para um palpite c0 da cardinalidade. """
    if c0 <= 0:
        raise DomainError(f"c0={c0} precisa ser positivo.")
    return -math.expm1(-optimal_lambda() / c0)


def bernoulli_are_range(low, high):
    """
    Menor ARE quando c / c0 varia em (low, high) e p = 1 / c0.

    Como a ARE é unimodal em lambda, o mínimo fica em um dos extremos.
    """
    if not 0.0 < low < high:
        raise DomainError(f"Intervalo ({low}, {high}) inválido.")
    return min(are_bernoulli(low), are_bernoulli(high))


def bernoulli_information(c, m, p):
    """ Informação de Fisher de m bits de Bernoulli: m q^c (log q)^2 / (1 - q^c). """
    _check_open_unit('p', p)
    if c <= 0:
        raise DomainError(f"c={c} precisa ser positivo.")
    log_q = math.log1p(-p)
    q_c = math.exp(c * log_q)
    return m * q_c * log_q ** 2 / -math.expm1(c * log_q)


# ==============================================================================
# ============================ HASHING GEOMÉTRICO ==============================
# ==============================================================================

@functools.lru_cache(maxsize=None)
def psi_infinity(q):
    """
    Limite de c^2 I(c) para o hashing geométrico com G(x) = 1 - q^x.

    Soma sobre todo k inteiro de q^(2k) (1/q - 1)^2 / [exp(q^(k-1)) - exp(q^k)].
    Para k alto os termos ficam abaixo de q^k, então a cauda truncada em
    q^K <= 1e-16 é desprezível; para k baixo exp(-q^(k-1)) zera o termo.

    Args:
        q (float): Parâmetro em (0, 1).
    Returns:
        float: psi_infinito(q), sempre menor que 1.
    """
    _check_open_unit('q', q)
    log_q = math.log(q)
    k_low = math.floor(math.log(800.0) / log_q)
    k_high = math.ceil(math.log(SERIES_TOLERANCE) / log_q)
    k = np.arange(k_low, k_high + 1, dtype=np.float64)

    a = np.exp((k - 1.0) * log_q)
    b = np.exp(k * log_q)
    # exp(a) - exp(b) = exp(a) (1 - exp(b - a))
    log_terms = 2.0 * k * log_q + 2.0 * math.log((1.0 - q) / q) - a - np.log(-np.expm1(b - a))
    return math.fsum(np.exp(log_terms))


def fisher_info_geometric(c, q):
    """
    Informação de Fisher por observação do máximo de c geométricas.

    Args:
        c (int): Cardinalidade, c >= 1.
        q (float): Parâmetro em (0, 1).
    Returns:
        float: I(c). Para c grande, c^2 I(c) se aproxima de psi_infinity(q).
    """
    _check_open_unit('q', q)
    if int(c) != c or c < 1:
        raise DomainError(f"c={c} precisa ser um inteiro >= 1.")
    log_q = math.log(q)
    y_high = math.ceil((math.log(SERIES_TOLERANCE) - math.log(c)) / log_q) + 1
    y = np.arange(1, y_high + 1, dtype=np.float64)

    log_a = np.log1p(-np.exp(y * log_q))
    with np.errstate(divide='ignore'):
        log_b = np.log1p(-np.exp((y - 1.0) * log_q))
    first = y == 1.0

    # Dividindo numerador e denominador por A^c: r = (B / A)^c
    diff = np.where(first, -np.inf, log_b - log_a)
    r = np.exp(c * diff)
    numerator = np.where(first, log_a, log_a - np.where(first, 0.0, log_b) * r)
    terms = np.exp(c * log_a) * numerator ** 2 / -np.expm1(c * diff)
    return math.fsum(terms)


# ==============================================================================
# ========================= COTAS DE CAUDA E TAMANHO ===========================
# ==============================================================================

def chernoff_bounds(epsilon, m):
    """
    Cotas de Chernoff para P(c_hat >= (1+eps)c) e P(c_hat <= (1-eps)c).

    Args:
        epsilon (float): Erro relativo em (0, 1).
        m (int): Tamanho do sketch.
    Returns:
        TailBound: Cotas superior e inferior e as constantes C1, C2.
    """
    _check_open_unit('epsilon', epsilon)
    if m < 1:
        raise DomainError(f"m={m} precisa ser >= 1.")
    eps = float(epsilon)
    g1 = -eps + (1.0 + eps) * math.log1p(eps)
    g2 = eps + (1.0 - eps) * math.log1p(-eps)
    c1 = eps ** 2 * (1.0 + eps) / g1
    c2 = eps ** 2 * (1.0 - eps) / g2
    return TailBound(
        epsilon=eps,
        m=int(m),
        upper=math.exp(-m * eps ** 2 / c1),
        lower=math.exp(-m * eps ** 2 / c2),
        c1=c1,
        c2=c2,
    )


def required_m(epsilon, delta):
    """
    Menor m que torna o estimador contínuo uma aproximação (epsilon, delta).

    Args:
        epsilon (float): Erro relativo em (0, 1).
        delta (float): Probabilidade de falha em (0, 1].
    Returns:
        int: Menor m com max(cota superior, cota inferior) <= delta.
    """
    _check_open_unit('epsilon', epsilon)
    if not 0.0 < delta <= 1.0:
        raise DomainError(f"delta={delta} precisa estar em (0, 1].")

    def worst(m):
        bound = chernoff_bounds(epsilon, m)
        return max(bound.upper, bound.lower)

    unit = chernoff_bounds(epsilon, 1)
    rate = min(epsilon ** 2 / unit.c1, epsilon ** 2 / unit.c2)
    m = max(1, math.ceil(math.log(1.0 / delta) / rate))
    # Ajuste fino contra arredondamento
    while worst(m) > delta:
        m += 1
    while m > 1 and worst(m - 1) <= delta:
        m -= 1
    return m


def storage_bits(m, c, q=0.5):
    """
    Bits para guardar m máximos geométricos de c itens.

    O máximo esperado é da ordem de log_{1/q} c, então cada registro precisa de
    cerca de log2(log c) bits.
    """
    _check_open_unit('q', q)
    if c < 1 or m < 1:
        raise DomainError("c e m precisam ser >= 1.")
    expected_max = math.log(c) / -math.log(q) + 1.0
    return int(m) * math.ceil(math.log2(expected_max + 1.0))


def expected_error_band(m, level=0.95):
    """ Erro percentual que c_hat não excede com a confiança dada: 100 z / sqrt(m). """
    _check_open_unit('level', level)
    return 100.0 * stats.norm.ppf(0.5 + level / 2.0) / math.sqrt(m)


def cdim_alpha(epsilon, bound):
    """ Índice alpha <= epsilon / log B exigido pelo estimador da mediana. """
    _check_open_unit('epsilon', epsilon)
    if bound <= 1:
        raise DomainError(f"B={bound} precisa ser maior que 1.")
    return epsilon / math.log(bound)
