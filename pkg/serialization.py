"""
Persistência dos sketches.

Dois formatos com o mesmo conteúdo:
- envelope JSON {"type", "version", "m", "params", "salt", "stream_length", "state"},
  com reais escritos pelo repr (ida e volta bit a bit, "-inf" para vazio);
- frame binário: magic, versão, tag do tipo, cabeçalho e payload little-endian.
"""
import json
import logging
import struct

import numpy as np

from baselines import BaselineAlgo, RegisterSketch
from errors import DomainError, FormatError
from order_sketch import MaxSketch
from projection_sketch import ProjectionSketch
from seeded_hash import Distribution, HashConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b'CSKT'
# magic, versão, tag, m, sal, k, q, p, alpha, comprimento do fluxo
HEADER = struct.Struct('<4sBBIQIdddQ')

SKETCH_TYPES = ('max-uniform', 'max-exp', 'max-geom', 'kth', 'bernoulli',
                'projection', 'loglog', 'hll', 'mincount')
TYPE_TAGS = {name: tag for tag, name in enumerate(SKETCH_TYPES, start=1)}

MAX_DISTRIBUTIONS = {
    'max-uniform': Distribution.UNIFORM,
    'max-exp': Distribution.EXPONENTIAL,
    'max-geom': Distribution.GEOMETRIC,
    'kth': Distribution.UNIFORM,
    'bernoulli': Distribution.BERNOULLI,
    'projection': Distribution.STABLE,
}


def sketch_type(sketch):
    """ Nome do tipo do sketch no envelope. """
    if isinstance(sketch, RegisterSketch):
        return sketch.algo.value
    if isinstance(sketch, ProjectionSketch):
        return 'projection'
    if isinstance(sketch, MaxSketch):
        if sketch.kind == 'topk':
            return 'kth'
        return {
            Distribution.UNIFORM: 'max-uniform',
            Distribution.EXPONENTIAL: 'max-exp',
            Distribution.GEOMETRIC: 'max-geom',
            Distribution.BERNOULLI: 'bernoulli',
        }[sketch.cfg.distribution]
    raise FormatError(f"Objeto {type(sketch).__name__} não é um sketch conhecido.")


def new_sketch(kind, m, seed=0, q=0.5, p=0.01, alpha=0.05, k=None):
    """
    Cria um sketch vazio do tipo pedido.
    Args:
        kind (str): Um dos SKETCH_TYPES.
        m (int): Tamanho do sketch.
        seed (int): Sal global do hashing.
        q, p, alpha (float): Parâmetros das distribuições.
        k (int, optional): Ordem da estatística para 'kth'.
    Returns:
        MaxSketch | ProjectionSketch | RegisterSketch
    """
    if kind in ('loglog', 'hll', 'mincount'):
        return RegisterSketch(kind, m, seed)
    if kind not in MAX_DISTRIBUTIONS:
        raise FormatError(f"Tipo de sketch '{kind}' desconhecido.")
    cfg = HashConfig(m=m, global_salt=seed, distribution=MAX_DISTRIBUTIONS[kind], q=q, p=p, alpha=alpha)
    if kind == 'projection':
        return ProjectionSketch(cfg)
    if kind == 'kth':
        if k is None:
            raise DomainError("O sketch 'kth' exige k.")
        return MaxSketch(cfg, k)
    return MaxSketch(cfg)


def _params(sketch):
    if isinstance(sketch, RegisterSketch):
        return {}
    params = sketch.cfg.params()
    params.pop('m')
    params.pop('global_salt')
    if isinstance(sketch, MaxSketch) and sketch.k is not None:
        params['k'] = sketch.k
    return params


def _salt(sketch):
    return sketch.global_salt if isinstance(sketch, RegisterSketch) else sketch.cfg.global_salt


def _floats_out(values):
    return [repr(float(v)) for v in values]


def _floats_in(values):
    return np.array([float(v) for v in values], dtype=np.float64)


def _check_projection_state(signs, log_mag):
    """ Sinais em {-1, 0, 1}; sinal 0 só com magnitude nula. """
    if not np.all(np.isin(signs, (-1, 0, 1))):
        raise FormatError("Sinais da projeção precisam estar em {-1, 0, 1}.")
    if np.any((signs == 0) & np.isfinite(log_mag)) or np.any(np.isnan(log_mag)):
        raise FormatError("Acumulador de projeção inconsistente com o sinal.")


# ==============================================================================
# ==================================== JSON ====================================
# ==============================================================================

def to_envelope(sketch):
    """ Dicionário do envelope JSON. """
    kind = sketch_type(sketch)
    if kind == 'projection':
        state = [[int(s), repr(float(v))] for s, v in zip(sketch.signs, sketch.log_mag)]
    elif kind in ('max-uniform', 'max-exp'):
        state = _floats_out(sketch.state)
    elif kind in ('kth', 'mincount'):
        rows = sketch.state if kind == 'kth' else sketch.registers
        state = [_floats_out(row) for row in rows]
    elif kind in ('max-geom', 'bernoulli'):
        state = [int(v) for v in sketch.state]
    else:
        state = [int(v) for v in sketch.registers]
    return {
        'type': kind,
        'version': FORMAT_VERSION,
        'm': sketch.m,
        'params': _params(sketch),
        'salt': _salt(sketch),
        'stream_length': sketch.stream_length,
        'state': state,
    }


def from_envelope(envelope):
    """ Reconstrói um sketch a partir do envelope JSON. """
    try:
        kind = envelope['type']
        if envelope.get('version') != FORMAT_VERSION:
            raise FormatError(f"Versão {envelope.get('version')} não suportada.")
        params = dict(envelope.get('params', {}))
        params.pop('distribution', None)
        sketch = new_sketch(kind, envelope['m'], envelope['salt'], **params)
        state = envelope['state']
        if len(state) != sketch.m:
            raise FormatError(f"Estado com {len(state)} slots para m={sketch.m}.")

        if kind == 'projection':
            signs = np.array([int(s) for s, _ in state], dtype=np.int64)
            log_mag = _floats_in([v for _, v in state])
            _check_projection_state(signs, log_mag)
            sketch.signs, sketch.log_mag = signs.astype(np.int8), log_mag
        elif kind in ('max-uniform', 'max-exp'):
            sketch.state = _floats_in(state)
        elif kind == 'kth':
            sketch.state = np.array([_floats_in(row) for row in state]).reshape(sketch.m, sketch.k)
        elif kind == 'mincount':
            sketch.registers = np.array([_floats_in(row) for row in state]).reshape(sketch.m, -1)
        elif kind in ('max-geom', 'bernoulli'):
            sketch.state = np.array(state, dtype=sketch.state.dtype)
        else:
            sketch.registers = np.array(state, dtype=np.uint8)
        sketch.stream_length = int(envelope.get('stream_length', 0))
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, OverflowError) as error:
        raise FormatError(f"Envelope JSON malformado: {error}") from error
    return sketch


# ==============================================================================
# =============================== FRAME BINÁRIO ================================
# ==============================================================================

def _state_arrays(sketch):
    if isinstance(sketch, ProjectionSketch):
        return [sketch.signs.astype('<i1'), sketch.log_mag.astype('<f8')]
    if isinstance(sketch, RegisterSketch):
        dtype = '<f8' if sketch.algo is BaselineAlgo.MINCOUNT else '<u1'
        return [sketch.registers.astype(dtype)]
    dtype = {'uint32': '<u4', 'uint8': '<u1'}.get(sketch.state.dtype.name, '<f8')
    return [sketch.state.astype(dtype)]


def to_frame(sketch):
    """ Frame binário compacto, usado na combinação pela CLI. """
    kind = sketch_type(sketch)
    params = _params(sketch)
    try:
        header = HEADER.pack(
            MAGIC, FORMAT_VERSION, TYPE_TAGS[kind], sketch.m, _salt(sketch),
            params.get('k') or 0, params.get('q', 0.5), params.get('p', 0.01),
            params.get('alpha', 0.05), sketch.stream_length,
        )
    except struct.error as error:
        raise FormatError(f"Cabeçalho binário fora do alcance dos campos: {error}") from error
    return header + b''.join(array.tobytes() for array in _state_arrays(sketch))


def from_frame(data):
    """ Lê um frame binário produzido por `to_frame`. """
    if len(data) < HEADER.size:
        raise FormatError("Frame binário truncado no cabeçalho.")
    magic, version, tag, m, salt, k, q, p, alpha, stream_length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("Magic inválido: não é um frame de sketch.")
    if version != FORMAT_VERSION:
        raise FormatError(f"Versão {version} não suportada.")
    if not 1 <= tag <= len(SKETCH_TYPES):
        raise FormatError(f"Tag de tipo {tag} desconhecida.")

    kind = SKETCH_TYPES[tag - 1]
    sketch = new_sketch(kind, m, salt, q=q, p=p, alpha=alpha, k=k or None)
    sketch.stream_length = stream_length
    payload = data[HEADER.size:]
    arrays = _state_arrays(sketch)
    expected = sum(array.nbytes for array in arrays)
    if len(payload) != expected:
        raise FormatError(f"Payload com {len(payload)} bytes, esperado {expected}.")

    offset = 0
    loaded = []
    for template in arrays:
        chunk = np.frombuffer(payload, dtype=template.dtype, count=template.size, offset=offset)
        loaded.append(chunk.reshape(template.shape).astype(template.dtype.newbyteorder('=')))
        offset += template.nbytes

    if isinstance(sketch, ProjectionSketch):
        _check_projection_state(*loaded)
        sketch.signs, sketch.log_mag = loaded
    elif isinstance(sketch, RegisterSketch):
        sketch.registers = loaded[0]
    else:
        sketch.state = loaded[0]
    return sketch


# ==============================================================================
# =============================== ENTRADA E SAÍDA ==============================
# ==============================================================================

def dumps(sketch, binary=False):
    """
    Serializa um sketch.
    Returns:
        bytes: Frame binário ou o JSON codificado em UTF-8.
    """
    if binary:
        return to_frame(sketch)
    return json.dumps(to_envelope(sketch), sort_keys=True).encode('utf-8')


def loads(data):
    """ Lê qualquer um dos dois formatos, detectando pelo magic. """
    if isinstance(data, str):
        data = data.encode('utf-8')
    if data[:len(MAGIC)] == MAGIC:
        return from_frame(data)
    try:
        envelope = json.loads(data.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise FormatError(f"Conteúdo não é JSON nem frame binário: {error}") from error
    if not isinstance(envelope, dict):
        raise FormatError("O envelope JSON precisa ser um objeto.")
    return from_envelope(envelope)


def dump(sketch, path, binary=False):
    with open(path, 'wb') as file:
        file.write(dumps(sketch, binary))
    logger.info("Sketch %s salvo em %s", sketch_type(sketch), path)


def load(path):
    with open(path, 'rb') as file:
        return loads(file.read())
