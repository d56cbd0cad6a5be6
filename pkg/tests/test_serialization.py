"""
Testes da persistência: envelope JSON, frame binário e erros de formato.
"""
import json

import numpy as np
import pytest

from errors import DomainError, FormatError
from harness import estimate_sketch
from serialization import (HEADER, SKETCH_TYPES, dump, dumps, from_envelope, load, loads,
                           new_sketch, sketch_type, to_envelope)


def filled(kind, items, m=64):
    sketch = new_sketch(kind, m, seed=5, q=0.5, p=0.02, alpha=0.05, k=3 if kind == 'kth' else None)
    return sketch.update_many(items)


class TestRoundTrip:

    @pytest.mark.parametrize('kind', SKETCH_TYPES)
    @pytest.mark.parametrize('binary', [False, True])
    def test_state_survives(self, items, kind, binary):
        """ Salvar e ler devolve o mesmo estado, bit a bit, nos dois formatos. """
        sketch = filled(kind, items)
        restored = loads(dumps(sketch, binary))
        assert sketch_type(restored) == kind
        assert restored == sketch
        assert restored.stream_length == sketch.stream_length

    def test_restored_sketch_estimates_the_same(self, items):
        sketch = filled('max-exp', items)
        assert estimate_sketch(loads(dumps(sketch))) == estimate_sketch(sketch)

    def test_restored_sketch_keeps_accepting_items(self, items):
        sketch = filled('max-exp', items[:500])
        restored = loads(dumps(sketch, binary=True))
        assert restored.update_many(items[500:]) == filled('max-exp', items)

    def test_empty_slots_in_json(self):
        envelope = json.loads(dumps(new_sketch('max-uniform', 4)))
        assert envelope['state'] == ['-inf'] * 4
        assert envelope['version'] == 1
        assert from_envelope(envelope).is_empty()

    def test_envelope_fields(self, items):
        envelope = to_envelope(filled('kth', items))
        assert envelope['type'] == 'kth'
        assert envelope['params']['k'] == 3
        assert envelope['salt'] == 5
        assert len(envelope['state']) == envelope['m'] == 64

    def test_files(self, items, tmp_path):
        sketch = filled('hll', items)
        path = tmp_path / 'hll.sketch'
        dump(sketch, path, binary=True)
        assert load(path) == sketch


class TestMalformedInput:

    def test_wrong_magic(self, items):
        frame = bytearray(dumps(filled('max-geom', items), binary=True))
        frame[0:1] = b'X'
        with pytest.raises(FormatError):
            loads(bytes(frame))

    def test_truncated_frame(self, items):
        frame = dumps(filled('max-geom', items), binary=True)
        with pytest.raises(FormatError):
            loads(frame[:HEADER.size - 1])
        with pytest.raises(FormatError):
            loads(frame[:-1])

    def test_unknown_version(self, items):
        envelope = to_envelope(filled('bernoulli', items))
        envelope['version'] = 99
        with pytest.raises(FormatError):
            from_envelope(envelope)

    def test_unknown_type(self):
        with pytest.raises(FormatError):
            loads(json.dumps({'type': 'bloom', 'version': 1, 'm': 4, 'salt': 0, 'state': []}))

    def test_state_length_mismatch(self, items):
        envelope = to_envelope(filled('loglog', items))
        envelope['state'] = envelope['state'][:-1]
        with pytest.raises(FormatError):
            from_envelope(envelope)

    @pytest.mark.parametrize('payload', [b'\xff\xfe', b'not json', b'[1, 2]', b'{"type": "hll"}'])
    def test_garbage(self, payload):
        with pytest.raises(FormatError):
            loads(payload)

    def test_kth_requires_k(self):
        with pytest.raises(DomainError):
            new_sketch('kth', 16)

    def test_register_sketch_state_is_integer(self, items):
        envelope = to_envelope(filled('hll', items))
        assert all(isinstance(v, int) for v in envelope['state'])
        np.testing.assert_array_equal(from_envelope(envelope).registers, filled('hll', items).registers)

    def test_large_k_fits_the_frame(self):
        sketch = new_sketch('kth', 2, k=70_000).update_many([b'a', b'b'])
        restored = loads(dumps(sketch, binary=True))
        assert restored.k == 70_000
        assert restored == sketch

    def test_header_overflow(self, items):
        sketch = filled('max-exp', items)
        sketch.stream_length = 2 ** 64
        with pytest.raises(FormatError):
            dumps(sketch, binary=True)

    @pytest.mark.parametrize('sign', [2, -3, 127])
    def test_projection_sign_out_of_range(self, items, sign):
        envelope = to_envelope(filled('projection', items))
        envelope['state'][0][0] = sign
        with pytest.raises(FormatError):
            from_envelope(envelope)

        frame = bytearray(dumps(filled('projection', items), binary=True))
        frame[HEADER.size] = sign % 256
        with pytest.raises(FormatError):
            loads(bytes(frame))

    def test_projection_zero_sign_needs_empty_slot(self, items):
        envelope = to_envelope(filled('projection', items))
        envelope['state'][0][0] = 0
        with pytest.raises(FormatError):
            from_envelope(envelope)
