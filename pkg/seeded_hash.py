import enum
import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from errors import DomainError, StreamIndexError

# Constantes do splitmix64
GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
MIX_2 = np.uint64(0x94D049BB133111EB)

UNIFORM_SCALE = 2.0 ** -52
MAX_SALT = 2 ** 64


class Distribution(str, enum.Enum):
    """Distribuições marginais disponíveis para os fluxos de hash."""
    UNIFORM = 'uniform'
    EXPONENTIAL = 'exponential'
    GEOMETRIC = 'geometric'
    BERNOULLI = 'bernoulli'
    STABLE = 'stable'


@dataclass(frozen=True)
class StreamElement:
    """ Uma observação do fluxo: item e quantidade inteira com sinal. """
    item: bytes
    d: int = 1


def _check_open_unit(name, value):
    if not 0.0 < value < 1.0:
        raise DomainError(f"{name}={value} precisa estar estritamente em (0, 1).")


@dataclass(frozen=True)
class HashConfig:
    """
    Configuração do hashing por semente.

    Args:
        m (int): Número de fluxos de hash por item.
        global_salt (int): Sal de 64 bits que define a família de hash.
        distribution (Distribution): Distribuição marginal dos variados.
        q (float): Parâmetro da geométrica, G(x) = 1 - q^x.
        p (float): Probabilidade de sucesso do hashing de Bernoulli.
        alpha (float): Índice da lei estável positiva.
    """
    m: int
    global_salt: int = 0
    distribution: Distribution = Distribution.UNIFORM
    q: float = 0.5
    p: float = 0.01
    alpha: float = 0.05

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise DomainError(f"m={self.m} precisa ser um inteiro >= 1.")
        if not 0 <= self.global_salt < MAX_SALT:
            raise DomainError(f"global_salt={self.global_salt} precisa caber em 64 bits sem sinal.")
        _check_open_unit('q', self.q)
        _check_open_unit('p', self.p)
        _check_open_unit('alpha', self.alpha)
        object.__setattr__(self, 'distribution', Distribution(self.distribution))

    def params(self):
        """ Parâmetros como dicionário serializável. """
        data = asdict(self)
        data['distribution'] = self.distribution.value
        return data


# ==============================================================================
# ========================== GERADOR POR CONTADOR ==============================
# ==============================================================================

def splitmix64(z):
    """ Finalizador do splitmix64 aplicado elemento a elemento (uint64). """
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over='ignore'):
        z = (z ^ (z >> np.uint64(30))) * MIX_1
        z = (z ^ (z >> np.uint64(27))) * MIX_2
    return z ^ (z >> np.uint64(31))


def _as_bytes(item):
    if isinstance(item, bytes):
        return item
    if isinstance(item, str):
        return item.encode('utf-8')
    raise DomainError(f"Item precisa ser bytes ou str, recebido {type(item).__name__}.")


def item_digest(item, salt):
    """
    Resume um item em 64 bits com o BLAKE2b chaveado pelo sal.

    Args:
        item (bytes | str): Identificador do item.
        salt (int): Sal global de 64 bits.
    Returns:
        int: Digest de 64 bits, estado inicial do gerador daquele item.
    """
    key = int(salt).to_bytes(8, 'little')
    digest = hashlib.blake2b(_as_bytes(item), digest_size=8, key=key).digest()
    return int.from_bytes(digest, 'little')


def item_digests(items, salt):
    """ Versão em lote de `item_digest`; devolve um array uint64. """
    key = int(salt).to_bytes(8, 'little')
    joined = b''.join(
        hashlib.blake2b(_as_bytes(item), digest_size=8, key=key).digest() for item in items
    )
    if not joined:
        return np.empty(0, dtype=np.uint64)
    return np.frombuffer(joined, dtype='<u8').astype(np.uint64)


def raw_words(digests, streams, lane=0):
    """
    Palavras de 64 bits do gerador por contador.

    A saída número i do splitmix64 com estado s é mix(s + i * gamma); o fluxo j
    da faixa `lane` usa i = 2j + lane + 1.

    Args:
        digests (np.ndarray): Digests dos itens, shape (n,).
        streams (np.ndarray): Índices j dos fluxos pedidos.
        lane (int): 0 para o uniforme principal, 1 para o auxiliar.
    Returns:
        np.ndarray: Matriz uint64 de shape (n, len(streams)).
    """
    digests = np.asarray(digests, dtype=np.uint64).reshape(-1, 1)
    counters = (np.asarray(streams, dtype=np.uint64) * np.uint64(2) + np.uint64(lane + 1)).reshape(1, -1)
    with np.errstate(over='ignore'):
        state = digests + counters * GOLDEN_GAMMA
    return splitmix64(state)


def to_uniform(words):
    """ Converte palavras de 64 bits em uniformes no intervalo aberto (0, 1). """
    # u = (x >> 12 + 1/2) * 2^-52 nunca vale 0 nem 1
    return ((np.asarray(words, dtype=np.uint64) >> np.uint64(12)).astype(np.float64) + 0.5) * UNIFORM_SCALE


def uniform_block(digests, m, lane=0):
    """ Uniformes dos fluxos 0..m-1 para cada digest, shape (n, m). """
    return to_uniform(raw_words(digests, np.arange(m), lane))


def raw_hash64(items, salt):
    """ Primeira palavra bruta de 64 bits de cada item (fluxo 0, faixa 0). """
    return raw_words(item_digests(items, salt), [0])[:, 0]


def uniform_stream(item, j, cfg):
    """
    j-ésimo variado uniforme do item.

    Args:
        item (bytes | str): Identificador do item.
        j (int): Índice do fluxo, 0 <= j < cfg.m.
        cfg (HashConfig): Configuração do hashing.
    Returns:
        float: Valor em (0, 1), determinístico em (item, j, sal).
    """
    if not 0 <= j < cfg.m:
        raise StreamIndexError(f"Fluxo j={j} fora do intervalo [0, {cfg.m}).")
    digest = item_digests([item], cfg.global_salt)
    return float(to_uniform(raw_words(digest, [j]))[0, 0])


# ==============================================================================
# ======================== TRANSFORMAÇÕES DE QUANTIL ===========================
# ==============================================================================

def _unit_array(u, name='u'):
    u = np.asarray(u, dtype=np.float64)
    if not np.all((u > 0.0) & (u < 1.0)):
        raise DomainError(f"{name} precisa estar estritamente em (0, 1).")
    return u


def _result(value):
    return float(value) if np.ndim(value) == 0 else value


def exponential_variate(u):
    """ Quantil da exponencial de média 1: -log(1 - u). """
    u = _unit_array(u)
    return _result(-np.log1p(-u))


def geometric_variate(u, q):
    """
    Quantil da geométrica G(x) = 1 - q^x, x = 1, 2, ...

    Args:
        u (float | np.ndarray): Uniforme(s) em (0, 1).
        q (float): Parâmetro em (0, 1).
    Returns:
        int | np.ndarray: Menor inteiro x >= 1 com 1 - q^x >= u.
    """
    u = _unit_array(u)
    _check_open_unit('q', q)
    x = np.maximum(np.ceil(np.log1p(-u) / np.log(q)), 1.0).astype(np.int64)
    return int(x) if np.ndim(x) == 0 else x


def stable_variate(u, w, alpha):
    """
    Construção de Kanter da lei estável positiva F_alpha, em escala log.

    X = sin(alpha pi u) / sin(pi u)^(1/alpha) * (sin((1-alpha) pi u) / w)^((1-alpha)/alpha),
    com transformada de Laplace exp(-lambda^alpha).

    Args:
        u (float | np.ndarray): Uniforme(s) em (0, 1).
        w (float | np.ndarray): Exponencial(1) derivada do segundo uniforme.
        alpha (float): Índice de estabilidade em (0, 1).
    Returns:
        float | np.ndarray: log X. Para alpha pequeno X sai do alcance de um double.
    """
    u = _unit_array(u)
    w = np.asarray(w, dtype=np.float64)
    _check_open_unit('alpha', alpha)
    if not np.all(w > 0.0):
        raise DomainError("w precisa ser positivo.")
    # sin(pi u) = sin(pi (1 - u)); o menor argumento preserva precisão perto de u = 1
    log_sin_pi = np.log(np.sin(np.pi * np.minimum(u, 1.0 - u)))
    log_x = (np.log(np.sin(alpha * np.pi * u))
             - log_sin_pi / alpha
             + (1.0 - alpha) / alpha * (np.log(np.sin((1.0 - alpha) * np.pi * u)) - np.log(w)))
    return _result(log_x)


# ==============================================================================
# ============================ HASH COM CONTADORES =============================
# ==============================================================================

class SeededHash:
    """
    Família de funções de hash h_1..h_m pelo método da semente.

    Cada item vira a semente de um gerador; os m primeiros números da sequência
    são os valores de hash. Contabiliza quantos variados foram produzidos.
    """
    def __init__(self, cfg):
        self.cfg = cfg
        self.evaluations = 0
        self.items_hashed = 0

    def __call__(self, items):
        """
        Calcula os variados de todos os fluxos para um lote de itens.
        Args:
            items (list): Itens (bytes ou str).
        Returns:
            np.ndarray: Shape (n, m). Para a lei estável devolve log X.
        """
        return self.variates(item_digests(items, self.cfg.global_salt))

    def variates(self, digests):
        """ Mesmo que `__call__`, partindo de digests já calculados. """
        cfg = self.cfg
        u = uniform_block(digests, cfg.m)
        self.evaluations += u.size
        self.items_hashed += len(digests)

        if cfg.distribution is Distribution.UNIFORM:
            return u
        if cfg.distribution is Distribution.EXPONENTIAL:
            return exponential_variate(u)
        if cfg.distribution is Distribution.GEOMETRIC:
            return geometric_variate(u, cfg.q)
        if cfg.distribution is Distribution.BERNOULLI:
            return (u < cfg.p).astype(np.uint8)

        # Estável: o segundo uniforme do par vem da faixa 1
        w = exponential_variate(uniform_block(digests, cfg.m, lane=1))
        self.evaluations += u.size
        return stable_variate(u, w, cfg.alpha)

    def reset(self):
        """ Reseta os contadores. """
        self.evaluations = 0
        self.items_hashed = 0
