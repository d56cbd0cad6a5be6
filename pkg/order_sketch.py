import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from errors import (DegenerateSketchError, DomainError, EmptySketchError,
                    IncompatibleSketchError, InsufficientDataError, NumericError,
                    SaturatedSketchError, UnsupportedDeletionError)
from inference import psi_infinity
from seeded_hash import Distribution, SeededHash, item_digests

logger = logging.getLogger(__name__)

# Células (itens x fluxos) processadas por bloco na ingestão em lote
CHUNK_CELLS = 1 << 22

NEWTON_TOLERANCE = 1e-9
NEWTON_MAX_ITER = 50


class EstimatorId(str, enum.Enum):
    CONTINUOUS = 'continuous'
    KTH = 'kth'
    BERNOULLI = 'bernoulli'
    GEOMETRIC = 'geometric'
    PROJECTION = 'projection'
    MEDIAN = 'median'
    MAXTERM_STABLE = 'maxterm_stable'
    LOGLOG = 'loglog'
    HLL = 'hll'
    MINCOUNT = 'mincount'


@dataclass(frozen=True)
class Estimate:
    """
    Estimativa da cardinalidade.

    Args:
        c_hat (float): Estimativa pontual (real, não arredondada).
        std_error (float): Erro padrão.
        ci (tuple): Intervalo de confiança (inferior, superior).
        level (float): Nível de confiança do intervalo.
        estimator_id (EstimatorId): Estimador que produziu o valor.
        m (int): Tamanho do sketch.
    """
    c_hat: float
    std_error: float
    ci: tuple
    level: float
    estimator_id: EstimatorId
    m: int

    def covers(self, c):
        return self.ci[0] <= c <= self.ci[1]

    def percent_error(self, c):
        return 100.0 * abs(self.c_hat - c) / c

    def to_dict(self):
        return {
            'c_hat': self.c_hat,
            'std_error': self.std_error,
            'ci': [self.ci[0], self.ci[1]],
            'level': self.level,
            'estimator_id': EstimatorId(self.estimator_id).value,
            'm': self.m,
        }


def check_level(level):
    if not 0.0 < level < 1.0:
        raise DomainError(f"Nível de confiança {level} precisa estar em (0, 1).")


def gamma_interval(statistic, shape, level):
    """ Intervalo exato a partir do pivô c * S ~ Gamma(shape, 1). """
    lower_q, upper_q = stats.gamma.ppf([(1.0 - level) / 2.0, (1.0 + level) / 2.0], shape)
    return float(lower_q / statistic), float(upper_q / statistic)


def chunks(array, m):
    """ Fatia um array de digests em blocos de no máximo CHUNK_CELLS células. """
    rows = max(1, CHUNK_CELLS // m)
    for start in range(0, len(array), rows):
        yield array[start:start + rows]


# ==============================================================================
# ============================== SKETCH DE MÁXIMOS =============================
# ==============================================================================

class MaxSketch:
    """
    Sketch de termo máximo sobre m fluxos de hash.

    Guarda, por fluxo, o máximo dos valores de hash vistos. O tipo do slot
    depende da distribuição do hashing:
    - uniforme: log Y_j (float, vazio = -inf)
    - exponencial: M_j (float, vazio = -inf)
    - geométrica: Y_j (uint32, vazio = 0)
    - Bernoulli: bit (uint8)
    - k-ésima estatística de ordem (k informado): os k maiores uniformes, em
      ordem decrescente (float, vazio = -inf)
    """
    def __init__(self, cfg, k=None):
        if cfg.distribution is Distribution.STABLE:
            raise DomainError("O sketch de máximos não aceita hashing estável; use coupled_residuals.")
        if k is not None:
            if int(k) != k or k < 1:
                raise DomainError(f"k={k} precisa ser um inteiro >= 1.")
            if cfg.distribution is not Distribution.UNIFORM:
                raise DomainError("A k-ésima estatística de ordem exige hashing uniforme.")
        self.cfg = cfg
        self.k = None if k is None else int(k)
        self.hasher = SeededHash(cfg)
        self.stream_length = 0
        self.state = self._empty_state()

    @property
    def kind(self):
        if self.k is not None:
            return 'topk'
        if self.cfg.distribution is Distribution.GEOMETRIC:
            return 'geometric'
        if self.cfg.distribution is Distribution.BERNOULLI:
            return 'bernoulli'
        return 'continuous'

    @property
    def m(self):
        return self.cfg.m

    def _empty_state(self):
        m = self.cfg.m
        if self.kind == 'topk':
            return np.full((m, self.k), -np.inf)
        if self.kind == 'geometric':
            return np.zeros(m, dtype=np.uint32)
        if self.kind == 'bernoulli':
            return np.zeros(m, dtype=np.uint8)
        return np.full(m, -np.inf)

    def _slot_values(self, digests):
        values = self.hasher.variates(digests)
        if self.kind == 'geometric':
            return values.astype(np.uint32)
        if self.kind == 'continuous' and self.cfg.distribution is Distribution.UNIFORM:
            return np.log(values)
        return values

    # --- INGESTÃO ---
    def update(self, elem):
        """
        Processa um elemento do fluxo (caso caixa registradora).
        Args:
            elem (StreamElement): Item e quantidade d > 0. O valor de d é ignorado.
        Returns:
            MaxSketch: O próprio sketch, atualizado.
        """
        if elem.d <= 0:
            raise UnsupportedDeletionError("Sketches de máximo não aceitam remoções (d <= 0).")
        self._ingest(item_digests([elem.item], self.cfg.global_salt))
        self.stream_length += 1
        return self

    def update_many(self, items, ds=None):
        """
        Ingestão em lote, equivalente a chamar `update` para cada item.
        Args:
            items (list): Itens do fluxo.
            ds (list, optional): Quantidades; todas precisam ser positivas.
        Returns:
            MaxSketch: O próprio sketch, atualizado.
        """
        if ds is not None and np.any(np.asarray(ds) <= 0):
            raise UnsupportedDeletionError("Sketches de máximo não aceitam remoções (d <= 0).")
        self._ingest(item_digests(items, self.cfg.global_salt))
        self.stream_length += len(items)
        return self

    def _ingest(self, digests):
        if len(digests) == 0:
            return
        # Repetições não mudam máximos; sem duplicatas no bloco o top-k fica mais simples
        digests = np.unique(digests)
        for block in chunks(digests, self.cfg.m):
            values = self._slot_values(block)
            if self.kind == 'topk':
                self.state = merge_top_k(self.state, values.T, self.k)
            else:
                self.state = np.maximum(self.state, values.max(axis=0))
            logger.debug("Bloco de %d itens processado (m=%d)", len(block), self.cfg.m)

    # --- ESTADO ---
    def is_empty(self):
        if self.kind in ('geometric', 'bernoulli'):
            return not np.any(self.state)
        return bool(np.all(np.isneginf(self.state)))

    def copy(self):
        clone = MaxSketch(self.cfg, self.k)
        clone.state = self.state.copy()
        clone.stream_length = self.stream_length
        return clone

    def compatible_with(self, other):
        return isinstance(other, MaxSketch) and self.cfg == other.cfg and self.k == other.k

    def state_bits(self):
        """ Bits de armazenamento compacto do estado (coluna Custo da comparação). """
        m = self.cfg.m
        if self.kind == 'topk':
            return 64 * self.k * m
        if self.kind == 'geometric':
            return m * max(1, int(self.state.max()).bit_length())
        if self.kind == 'bernoulli':
            return m
        return 64 * m

    def __eq__(self, other):
        return self.compatible_with(other) and np.array_equal(self.state, other.state)


def merge_top_k(state, candidates, k):
    """
    Junta os k maiores valores de cada fluxo com novos candidatos.

    Args:
        state (np.ndarray): Shape (m, k), decrescente, vazio = -inf.
        candidates (np.ndarray): Shape (m, n).
        k (int): Quantidade de valores mantidos.
    Returns:
        np.ndarray: Novo estado (m, k), sem valores repetidos.
    """
    n = candidates.shape[1]
    if n > k:
        candidates = np.partition(candidates, n - k, axis=1)[:, n - k:]
    pool = -np.sort(-np.concatenate([state, candidates], axis=1), axis=1)
    # Empates exatos só vêm do mesmo item: mantém uma cópia
    repeated = np.zeros(pool.shape, dtype=bool)
    repeated[:, 1:] = pool[:, 1:] == pool[:, :-1]
    pool = -np.sort(-np.where(repeated, -np.inf, pool), axis=1)
    return pool[:, :k].copy()


def merge(a, b):
    """
    Combina dois sketches de máximos: máximo slot a slot (ou top-k conjunto).
    Returns:
        MaxSketch: Sketch idêntico ao de uma passada sobre a união dos fluxos.
    """
    if not a.compatible_with(b):
        raise IncompatibleSketchError("Sketches com configurações diferentes não podem ser combinados.")
    merged = a.copy()
    if a.kind == 'topk':
        merged.state = merge_top_k(a.state, b.state, a.k)
    else:
        merged.state = np.maximum(a.state, b.state)
    merged.stream_length = a.stream_length + b.stream_length
    return merged


# ==============================================================================
# ========================== ESTIMADORES CONTÍNUOS =============================
# ==============================================================================

def _log_cdf_slots(sketch):
    if sketch.kind != 'continuous':
        raise DomainError("Estimador contínuo exige hashing uniforme ou exponencial.")
    if np.any(np.isneginf(sketch.state)):
        raise EmptySketchError("Há fluxos sem nenhum item; a estimação exige todos preenchidos.")
    if sketch.cfg.distribution is Distribution.UNIFORM:
        return sketch.state
    # F(M) = 1 - exp(-M) para a exponencial de média 1
    return np.log(-np.expm1(-sketch.state))


def continuous_statistic(sketch):
    """ S = -soma log F(M_j); c * S ~ Gamma(m, 1). """
    return -math.fsum(_log_cdf_slots(sketch))


def estimate_continuous(sketch, level=0.95):
    """
    MLE do termo máximo contínuo, c_hat = -m / soma log F(M_j).

    Args:
        sketch (MaxSketch): Sketch com hashing uniforme ou exponencial.
        level (float): Nível do intervalo de confiança exato.
    Returns:
        Estimate: Estimativa com erro padrão c_hat / sqrt(m) e intervalo pelo pivô Gamma(m, 1).
    """
    check_level(level)
    m = sketch.cfg.m
    statistic = continuous_statistic(sketch)
    if statistic <= 0.0:
        raise DegenerateSketchError("Todos os slots estão no supremo (S = 0).")
    c_hat = m / statistic
    return Estimate(
        c_hat=c_hat,
        std_error=c_hat / math.sqrt(m),
        ci=gamma_interval(statistic, m, level),
        level=level,
        estimator_id=EstimatorId.CONTINUOUS,
        m=m,
    )


# ==============================================================================
# ====================== K-ÉSIMA ESTATÍSTICA DE ORDEM ==========================
# ==============================================================================

def _solve_kth(log_product, m, k):
    """
    Raiz única de log(prod y_j) + soma_{i=1..k} m / (c - i + 1) = 0 em c > k - 1.
    """
    offsets = np.arange(k, dtype=np.float64)

    def score(c):
        return log_product + m * np.sum(1.0 / (c - offsets))

    def score_prime(c):
        return -m * np.sum(1.0 / (c - offsets) ** 2)

    # Aproximação para c grande como ponto de partida
    start = k / -math.expm1(log_product / m)
    try:
        root = optimize.newton(score, start, fprime=score_prime, tol=NEWTON_TOLERANCE * start,
                               maxiter=NEWTON_MAX_ITER)
        if root > k - 1 and math.isfinite(root):
            return float(root)
    except RuntimeError:
        logger.debug("Newton não convergiu a partir de %.6g; usando Brent", start)

    low = k - 1 + 1e-12 * max(1.0, start)
    high = max(start, k)
    while score(high) > 0.0:
        high *= 2.0
    return float(optimize.brentq(score, low, high, xtol=1e-12, rtol=4 * np.finfo(float).eps))


def estimate_kth(sketch, level=0.95):
    """
    MLE a partir da k-ésima maior estatística de ordem de cada fluxo.

    Args:
        sketch (MaxSketch): Sketch top-k com hashing uniforme.
        level (float): Nível do intervalo (pivô aproximado c * S ~ Gamma(km, 1)).
    Returns:
        Estimate: Raiz da equação de verossimilhança, erro padrão c_hat / sqrt(km).
    """
    check_level(level)
    if sketch.kind != 'topk':
        raise DomainError("estimate_kth exige um sketch top-k.")
    if np.any(np.isneginf(sketch.state)):
        raise InsufficientDataError(f"Algum fluxo tem menos de k={sketch.k} valores (c < k).")
    m, k = sketch.cfg.m, sketch.k
    log_product = math.fsum(np.log(sketch.state[:, k - 1]))
    c_hat = _solve_kth(log_product, m, k)
    return Estimate(
        c_hat=c_hat,
        std_error=c_hat / math.sqrt(k * m),
        ci=gamma_interval(-log_product, k * m, level),
        level=level,
        estimator_id=EstimatorId.KTH,
        m=m,
    )


def _check_kth_part(c, m, k):
    if m < 0 or int(m) != m:
        raise DomainError(f"m={m} precisa ser um inteiro >= 0.")
    if m > 0 and c <= k:
        raise DomainError(f"Estimativa {c} precisa ser maior que k={k}.")


def combine_kth(c1, m1, c2, m2, k):
    """
    Combinação aproximada (c grande) de duas estimativas top-k independentes.

    Returns:
        float: k / (1 - [(1 - k/c1)^m1 (1 - k/c2)^m2]^(1/(m1+m2))).
    """
    _check_kth_part(c1, m1, k)
    _check_kth_part(c2, m2, k)
    if m1 + m2 < 1:
        raise DomainError("m1 + m2 precisa ser >= 1.")
    log_terms = 0.0
    if m1:
        log_terms += m1 * math.log1p(-k / c1)
    if m2:
        log_terms += m2 * math.log1p(-k / c2)
    return k / -math.expm1(log_terms / (m1 + m2))


def combine_kth_exact(c1, m1, c2, m2, k):
    """
    Combinação exata: recupera log(prod y) de cada estimativa pela equação de
    verossimilhança e resolve de novo com m = m1 + m2.
    """
    _check_kth_part(c1, m1, k)
    _check_kth_part(c2, m2, k)
    if m1 + m2 < 1:
        raise DomainError("m1 + m2 precisa ser >= 1.")
    offsets = np.arange(k, dtype=np.float64)
    log_product = 0.0
    for c, m in ((c1, m1), (c2, m2)):
        if m:
            log_product -= m * float(np.sum(1.0 / (c - offsets)))
    return _solve_kth(log_product, m1 + m2, k)


# ==============================================================================
# =========================== HASHING DE BERNOULLI =============================
# ==============================================================================

def estimate_bernoulli(ones, m, p, level=0.95):
    """
    MLE com hashing de Bernoulli: c_hat = log(1 - ones/m) / log(1 - p).

    O intervalo é o de Clopper-Pearson para P = 1 - q^c levado a c pela
    transformação monótona c = log(1 - P) / log q.

    Args:
        ones (int): Bits ligados.
        m (int): Total de bits.
        p (float): Probabilidade de cada hash ligar o bit.
        level (float): Nível de confiança.
    Returns:
        Estimate: Estimativa com erro padrão pela informação de Fisher.
    """
    check_level(level)
    if not 0.0 < p < 1.0:
        raise DomainError(f"p={p} precisa estar estritamente em (0, 1).")
    if not 0 <= ones <= m or m < 1:
        raise DomainError(f"ones={ones} precisa estar em [0, m={m}].")
    log_q = math.log1p(-p)

    def to_c(prob):
        return math.log1p(-prob) / log_q

    if ones == m:
        lower = to_c(stats.beta.ppf(1.0 - level, ones, m - ones + 1))
        raise SaturatedSketchError(
            f"Todos os {m} bits ligados; só há limite inferior c >= {lower:.6g}.", lower_bound=lower)
    if ones == 0:
        upper = math.log1p(-level) / (m * log_q)
        return Estimate(0.0, 0.0, (0.0, upper), level, EstimatorId.BERNOULLI, m)

    fraction = ones / m
    c_hat = to_c(fraction)
    # I(c) = m q^c (log q)^2 / (1 - q^c) com q^c_hat = 1 - ones/m
    information = m * (1.0 - fraction) * log_q ** 2 / fraction
    tail = (1.0 - level) / 2.0
    prob_low = stats.beta.ppf(tail, ones, m - ones + 1)
    prob_high = stats.beta.ppf(1.0 - tail, ones + 1, m - ones)
    return Estimate(
        c_hat=c_hat,
        std_error=1.0 / math.sqrt(information),
        ci=(to_c(prob_low), to_c(prob_high)),
        level=level,
        estimator_id=EstimatorId.BERNOULLI,
        m=m,
    )


def estimate_bernoulli_sketch(sketch, level=0.95):
    """ Aplica `estimate_bernoulli` a um MaxSketch de Bernoulli. """
    if sketch.kind != 'bernoulli':
        raise DomainError("O sketch não usa hashing de Bernoulli.")
    return estimate_bernoulli(int(sketch.state.sum()), sketch.cfg.m, sketch.cfg.p, level)


# ==============================================================================
# =========================== HASHING GEOMÉTRICO ===============================
# ==============================================================================

def _geometric_slots(sketch):
    if sketch.kind != 'geometric':
        raise DomainError("O sketch não usa hashing geométrico.")
    if np.any(sketch.state == 0):
        raise EmptySketchError("Há fluxos sem nenhum item; a estimação exige todos preenchidos.")
    return sketch.state.astype(np.float64)


def estimate_geometric_recursive(sketch):
    """
    Estimador pela aproximação exponencial: c_hat = -m / log S_m,
    com S_m = prod (1 - q^Y_j). A estatística é recursiva e combina por soma.
    """
    y = _geometric_slots(sketch)
    log_s = math.fsum(np.log1p(-np.exp(y * math.log(sketch.cfg.q))))
    return -sketch.cfg.m / log_s


def geometric_initial_estimate(sketch):
    """
    Estimador consistente log(r/m) / log(1 - q^n), n = floor(log_q(1/2)),
    r = #{y_j <= n}. Com r = 0 (ou r = m) cai no estimador recursivo.
    """
    y = _geometric_slots(sketch)
    m, q = sketch.cfg.m, sketch.cfg.q
    n = math.floor(math.log(0.5) / math.log(q))
    r = int(np.count_nonzero(y <= n)) if n >= 1 else 0
    if 0 < r < m:
        return math.log(r / m) / math.log1p(-q ** n)
    return estimate_geometric_recursive(sketch)


def newton_raphson(f, df, initial_estimate, tolerance=NEWTON_TOLERANCE, max_iter=NEWTON_MAX_ITER):
    """
    Newton-Raphson para raízes positivas, parando em |delta c| / c < tolerance.
    Args:
        f (callable): Função escore.
        df (callable): Derivada do escore.
        initial_estimate (float): Ponto de partida positivo.
        tolerance (float): Tolerância relativa.
        max_iter (int): Número máximo de iterações.
    Returns:
        tuple: Raiz e número de iterações usadas.
    """
    c = initial_estimate
    for iteration in range(max_iter):
        slope = df(c)
        if slope == 0.0 or not math.isfinite(slope):
            break
        c_new = c - f(c) / slope
        if c_new <= 0.0:
            c_new = c / 2.0 # Mantém a iteração no domínio c > 0
        logger.debug("Newton iteração %d: c = %.10g", iteration + 1, c_new)
        if abs(c_new - c) / c_new < tolerance:
            return c_new, iteration + 1
        c = c_new
    raise NumericError(
        f"Newton-Raphson não convergiu em {max_iter} iterações (início {initial_estimate:.6g}).",
        initial_estimate=initial_estimate)


def geometric_score(sketch):
    """
    Escore da verossimilhança geométrica e sua derivada em c.

    Com A = 1 - q^y, B = 1 - q^(y-1) e r = (B/A)^c, cada termo do escore vale
    (log A - r log B) / (1 - r), sem calcular A^c nem B^c diretamente.
    """
    y = _geometric_slots(sketch)
    log_q = math.log(sketch.cfg.q)
    log_a = np.log1p(-np.exp(y * log_q))
    first = y == 1.0
    with np.errstate(divide='ignore'):
        log_b = np.where(first, 0.0, np.log1p(-np.exp((y - 1.0) * log_q)))
    diff = np.where(first, -np.inf, log_b - log_a)
    rest = ~first

    def score(c):
        r = np.exp(c * diff[rest])
        terms = (log_a[rest] - r * log_b[rest]) / -np.expm1(c * diff[rest])
        return math.fsum(log_a[first]) + math.fsum(terms)

    def score_prime(c):
        r = np.exp(c * diff[rest])
        return -math.fsum(diff[rest] ** 2 * r / np.expm1(c * diff[rest]) ** 2)

    return score, score_prime


def estimate_geometric(sketch, level=0.95):
    """
    MLE com hashing geométrico: raiz da equação de escore por Newton-Raphson.

    Args:
        sketch (MaxSketch): Sketch com hashing geométrico.
        level (float): Nível do intervalo assintótico.
    Returns:
        Estimate: Estimativa com erro padrão c_hat / sqrt(m psi_inf(q)).
    """
    check_level(level)
    m, q = sketch.cfg.m, sketch.cfg.q
    start = geometric_initial_estimate(sketch)
    if np.all(sketch.state == 1):
        # Escore sem raiz interior (derivada nula): fica o estimador inicial
        logger.info("Todos os slots valem 1; usando o estimador inicial %.6g", start)
        c_hat, iterations = start, 0
    else:
        score, score_prime = geometric_score(sketch)
        c_hat, iterations = newton_raphson(score, score_prime, start)
    logger.debug("Estimador geométrico: início %.6g, final %.6g em %d iterações", start, c_hat, iterations)

    std_error = c_hat / math.sqrt(m * psi_infinity(q))
    z = stats.norm.ppf((1.0 + level) / 2.0)
    lower = max(c_hat - z * std_error, np.finfo(float).tiny)
    return Estimate(
        c_hat=c_hat,
        std_error=std_error,
        ci=(lower, c_hat + z * std_error),
        level=level,
        estimator_id=EstimatorId.GEOMETRIC,
        m=m,
    )
