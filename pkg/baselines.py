"""
Estimadores de referência com média estocástica: LogLog, Hyper-LogLog e MinCount.

Os itens são repartidos em m baldes pelos primeiros log2(m) bits de um hash de
64 bits; os bits restantes dão o posto do primeiro bit 1 (LogLog e HLL) ou um
uniforme normalizado dentro do balde (MinCount).
"""
import enum
import logging
import math

import numpy as np
from scipy import special, stats

from errors import (DomainError, EmptySketchError, IncompatibleSketchError,
                    UnsupportedDeletionError)
from order_sketch import Estimate, EstimatorId, check_level, chunks
from seeded_hash import item_digests, raw_words

logger = logging.getLogger(__name__)

HASH_BITS = 64
MINCOUNT_ORDER = 3
MINCOUNT_SCALE = 2.0 ** -53

# Eficiência relativa assintótica de cada estimador (variância c^2 / (m * ARE));
# no MinCount da família inversa cada balde tem variância relativa 1 / (k - 2)
ASYMPTOTIC_EFFICIENCY = {
    'loglog': 0.592,
    'hll': 0.925,
    'mincount': float(MINCOUNT_ORDER - 2),
}


class BaselineAlgo(str, enum.Enum):
    LOGLOG = 'loglog'
    HLL = 'hll'
    MINCOUNT = 'mincount'


def next_power_of_two(m):
    return 1 << max(0, int(m) - 1).bit_length()


def split_hash(words, bucket_bits):
    """
    Separa cada palavra de 64 bits em (balde, restante alinhado à esquerda).
    Args:
        words (np.ndarray): Palavras uint64.
        bucket_bits (int): log2(m).
    Returns:
        tuple: Índices dos baldes e os bits restantes deslocados para o topo.
    """
    words = np.asarray(words, dtype=np.uint64)
    if bucket_bits == 0:
        return np.zeros(len(words), dtype=np.int64), words
    buckets = (words >> np.uint64(HASH_BITS - bucket_bits)).astype(np.int64)
    return buckets, words << np.uint64(bucket_bits)


def bit_length64(words):
    """ Número de bits significativos de cada uint64, sem laço em Python. """
    words = np.asarray(words, dtype=np.uint64)
    high = (words >> np.uint64(32)).astype(np.float64)
    low = (words & np.uint64(0xFFFFFFFF)).astype(np.float64)
    # Abaixo de 2^32 a conversão para double é exata e frexp devolve o número de bits
    return np.where(high > 0, 32 + np.frexp(high)[1], np.frexp(low)[1]).astype(np.int64)


def leading_rank(rest, bucket_bits):
    """ Posição do primeiro bit 1 nos 64 - log2(m) bits restantes (vazio = 64 - b + 1). """
    rank = HASH_BITS - bit_length64(rest) + 1
    return np.minimum(rank, HASH_BITS - bucket_bits + 1).astype(np.uint8)


def keep_smallest(buckets, values, m, order=MINCOUNT_ORDER):
    """
    Os `order` menores valores distintos de cada balde.
    Returns:
        np.ndarray: Shape (m, order), crescente, vazio = +inf.
    """
    finite = np.isfinite(values)
    buckets, values = buckets[finite], values[finite]
    sort = np.lexsort((values, buckets))
    buckets, values = buckets[sort], values[sort]
    fresh = np.ones(len(values), dtype=bool)
    fresh[1:] = (buckets[1:] != buckets[:-1]) | (values[1:] != values[:-1])
    buckets, values = buckets[fresh], values[fresh]
    position = np.arange(len(buckets)) - np.searchsorted(buckets, buckets, side='left')
    selected = position < order

    state = np.full((m, order), np.inf)
    state[buckets[selected], position[selected]] = values[selected]
    return state


# ==============================================================================
# ============================= SKETCH DE REGISTROS ============================
# ==============================================================================

class RegisterSketch:
    """
    Registros de média estocástica.

    Args:
        algo (BaselineAlgo): 'loglog', 'hll' ou 'mincount'.
        m (int): Número de baldes, potência de dois.
        global_salt (int): Sal do hash de 64 bits.
    """
    def __init__(self, algo, m, global_salt=0):
        self.algo = BaselineAlgo(algo)
        if int(m) != m or m < 1 or m & (m - 1):
            raise DomainError(f"m={m} precisa ser uma potência de dois.")
        self.m = int(m)
        self.global_salt = int(global_salt)
        self.bucket_bits = self.m.bit_length() - 1
        self.stream_length = 0
        if self.algo is BaselineAlgo.MINCOUNT:
            self.registers = np.full((self.m, MINCOUNT_ORDER), np.inf)
        else:
            self.registers = np.zeros(self.m, dtype=np.uint8)

    def update(self, elem):
        if elem.d <= 0:
            raise UnsupportedDeletionError("Sketches de registros não aceitam remoções (d <= 0).")
        return self.update_many([elem.item])

    def update_many(self, items, ds=None):
        """ Ingestão em lote; equivalente a `baseline_update` item a item. """
        if ds is not None and np.any(np.asarray(ds) <= 0):
            raise UnsupportedDeletionError("Sketches de registros não aceitam remoções (d <= 0).")
        digests = np.unique(item_digests(items, self.global_salt))
        for block in chunks(digests, 1):
            buckets, rest = split_hash(raw_words(block, [0])[:, 0], self.bucket_bits)
            if self.algo is BaselineAlgo.MINCOUNT:
                values = ((rest >> np.uint64(11)).astype(np.float64) + 0.5) * MINCOUNT_SCALE
                self.registers = keep_smallest(
                    np.concatenate([np.repeat(np.arange(self.m), MINCOUNT_ORDER), buckets]),
                    np.concatenate([self.registers.ravel(), values]),
                    self.m,
                )
            else:
                np.maximum.at(self.registers, buckets, leading_rank(rest, self.bucket_bits))
            logger.debug("%s: bloco de %d itens", self.algo.value, len(block))
        self.stream_length += len(items)
        return self

    def copy(self):
        clone = RegisterSketch(self.algo, self.m, self.global_salt)
        clone.registers = self.registers.copy()
        clone.stream_length = self.stream_length
        return clone

    def compatible_with(self, other):
        return (isinstance(other, RegisterSketch) and self.algo is other.algo
                and self.m == other.m and self.global_salt == other.global_salt)

    def is_empty(self):
        if self.algo is BaselineAlgo.MINCOUNT:
            return not np.any(np.isfinite(self.registers))
        return not np.any(self.registers)

    def state_bits(self):
        if self.algo is BaselineAlgo.MINCOUNT:
            return 64 * MINCOUNT_ORDER * self.m
        return self.m * max(1, int(self.registers.max()).bit_length())

    def __eq__(self, other):
        return self.compatible_with(other) and np.array_equal(self.registers, other.registers)


def baseline_update(sketch, item):
    return sketch.update_many([item])


def merge(a, b):
    """ Máximo registro a registro (ou os três menores conjuntos no MinCount). """
    if not a.compatible_with(b):
        raise IncompatibleSketchError("Sketches com configurações diferentes não podem ser combinados.")
    merged = a.copy()
    if a.algo is BaselineAlgo.MINCOUNT:
        buckets = np.repeat(np.arange(a.m), MINCOUNT_ORDER)
        merged.registers = keep_smallest(
            np.concatenate([buckets, buckets]),
            np.concatenate([a.registers.ravel(), b.registers.ravel()]),
            a.m,
        )
    else:
        merged.registers = np.maximum(a.registers, b.registers)
    merged.stream_length = a.stream_length + b.stream_length
    return merged


# ==============================================================================
# ================================ ESTIMADORES =================================
# ==============================================================================

def _normal_estimate(c_hat, m, algo, estimator_id, level):
    std_error = c_hat / math.sqrt(m * ASYMPTOTIC_EFFICIENCY[algo])
    z = stats.norm.ppf((1.0 + level) / 2.0)
    return Estimate(
        c_hat=c_hat,
        std_error=std_error,
        ci=(max(c_hat - z * std_error, 0.0), c_hat + z * std_error),
        level=level,
        estimator_id=estimator_id,
        m=m,
    )


def _check(sketch, algo):
    if sketch.algo is not algo:
        raise DomainError(f"Sketch '{sketch.algo.value}' usado no estimador '{algo.value}'.")
    if sketch.is_empty():
        raise EmptySketchError("Sketch vazio: nenhum item foi inserido.")


def loglog_alpha(m):
    """ Constante de correção do LogLog: (Gamma(-1/m) (1 - 2^(1/m)) / log 2)^(-m). """
    if m < 2:
        raise DomainError("O LogLog exige m >= 2.")
    return float((special.gamma(-1.0 / m) * -math.expm1(math.log(2.0) / m) / math.log(2.0)) ** -m)


def loglog_estimate(sketch, level=0.95):
    """
    LogLog: c_hat = alpha_m m 2^(média dos registros).
    Args:
        sketch (RegisterSketch): Sketch LogLog.
        level (float): Nível do intervalo normal.
    Returns:
        Estimate: Erro padrão c_hat / sqrt(0.592 m).
    """
    check_level(level)
    _check(sketch, BaselineAlgo.LOGLOG)
    m = sketch.m
    c_hat = loglog_alpha(m) * m * 2.0 ** float(np.mean(sketch.registers))
    return _normal_estimate(c_hat, m, 'loglog', EstimatorId.LOGLOG, level)


def hll_alpha(m):
    if m == 16:
        return 0.673
    if m == 32:
        return 0.697
    if m == 64:
        return 0.709
    return 0.7213 / (1.0 + 1.079 / m)


def hyperloglog_estimate(sketch, level=0.95):
    """
    Hyper-LogLog: média harmônica alpha_m m^2 / soma 2^(-M_j), com contagem
    linear na faixa pequena e correção para hashes de 64 bits na faixa grande.
    """
    check_level(level)
    _check(sketch, BaselineAlgo.HLL)
    m = sketch.m
    registers = sketch.registers.astype(np.float64)
    raw = hll_alpha(m) * m * m / math.fsum(np.exp2(-registers))
    zeros = int(np.count_nonzero(sketch.registers == 0))

    if raw <= 2.5 * m and zeros > 0:
        c_hat = m * math.log(m / zeros)
        logger.debug("HLL: contagem linear (%d registros zerados)", zeros)
    elif raw > 2.0 ** HASH_BITS / 30.0:
        c_hat = -(2.0 ** HASH_BITS) * math.log1p(-raw / 2.0 ** HASH_BITS)
    else:
        c_hat = raw
    return _normal_estimate(c_hat, m, 'hll', EstimatorId.HLL, level)


def mincount_estimate(sketch, level=0.95):
    """
    MinCount da família inversa: c_hat = soma_j (k - 1) / M_j, com M_j a k-ésima
    menor estatística (k = 3) do balde j normalizada para (0, 1).

    Com n itens no balde, M_j ~ Beta(k, n - k + 1) e E[(k - 1) / M_j] = n, logo
    cada parcela é não viesada; a variância é n^2 / (k - 2) - O(n), o que dá
    erro padrão c_hat / sqrt(m (k - 2)). Baldes com menos de k valores entram
    com a contagem exata.

    Args:
        sketch (RegisterSketch): Sketch MinCount.
        level (float): Nível do intervalo normal.
    Returns:
        Estimate: Estimativa com erro padrão c_hat / sqrt(m).
    """
    check_level(level)
    _check(sketch, BaselineAlgo.MINCOUNT)
    k = MINCOUNT_ORDER
    filled = np.isfinite(sketch.registers).sum(axis=1)
    full = filled == k
    exact = float(filled[~full].sum())
    estimated = math.fsum((k - 1) / sketch.registers[full, k - 1])
    logger.debug("MinCount: %d baldes cheios, %d itens contados exatamente", int(full.sum()), int(exact))
    return _normal_estimate(exact + estimated, sketch.m, 'mincount', EstimatorId.MINCOUNT, level)
