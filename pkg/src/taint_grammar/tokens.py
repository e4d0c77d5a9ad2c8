"""Token inference: generalize the observed bytes of a field over the unit alphabet.

Normative class table (ASCII):

=============== =========================================== ===========
**Class**       **Members**                                  **Size**
DIGIT           0-9                                          10
LOWER_HEX       a-f                                          6
UPPER_HEX       A-F                                          6
XDIGIT          0-9 a-f A-F                                  22
LOWER           a-z                                          26
UPPER           A-Z                                          26
ALPHA           a-z A-Z                                      52
ALNUM           a-z A-Z 0-9                                  62
WHITESPACE      space \\t \\n \\r \\v \\f                          6
PUNCTUATION     ASCII punctuation                            32
CONTROL         0x00-0x1F and 0x7F                           33
PRINTABLE       digits, letters, punctuation, whitespace     100
ALL             0x00-0xFF                                    256
=============== =========================================== ===========
"""
import string
from dataclasses import dataclass

import numpy as np


def _mask(byte_values):
    mask = np.zeros(256, dtype=bool)
    mask[list(byte_values)] = True
    return mask


def _chars(text):
    return [ord(c) for c in text]


CLASS_MASKS = {
    'DIGIT': _mask(_chars(string.digits)),
    'LOWER_HEX': _mask(_chars('abcdef')),
    'UPPER_HEX': _mask(_chars('ABCDEF')),
    'XDIGIT': _mask(_chars(string.hexdigits)),
    'LOWER': _mask(_chars(string.ascii_lowercase)),
    'UPPER': _mask(_chars(string.ascii_uppercase)),
    'ALPHA': _mask(_chars(string.ascii_letters)),
    'ALNUM': _mask(_chars(string.ascii_letters + string.digits)),
    'WHITESPACE': _mask(_chars(string.whitespace)),
    'PUNCTUATION': _mask(_chars(string.punctuation)),
    'CONTROL': _mask(list(range(0x20)) + [0x7F]),
    'PRINTABLE': _mask(_chars(string.printable)),
    'ALL': np.ones(256, dtype=bool),
}

# join candidates, least cardinality first; table order breaks ties
CLASS_ORDER = sorted(CLASS_MASKS, key=lambda name: (int(CLASS_MASKS[name].sum()), list(CLASS_MASKS).index(name)))

DIGIT_BYTES = frozenset(_chars(string.digits))


@dataclass(frozen=True)
class Unit:
    """A literal byte (int kind) or a named class (str kind)."""
    kind: object

    def __post_init__(self):
        if isinstance(self.kind, int):
            if not 0 <= self.kind <= 0xFF:
                raise ValueError(f'literal byte out of range: {self.kind}')
        elif self.kind not in CLASS_MASKS:
            raise ValueError(f'unknown unit class: {self.kind}')

    @property
    def is_literal(self):
        return isinstance(self.kind, int)

    @property
    def mask(self):
        if self.is_literal:
            return _mask([self.kind])
        return CLASS_MASKS[self.kind]

    def members(self):
        return np.flatnonzero(self.mask)

    def accepts(self, byte):
        return bool(self.mask[byte])

    @property
    def is_digit(self):
        return self.kind == 'DIGIT' or (self.is_literal and self.kind in DIGIT_BYTES)

    def __str__(self):
        if self.is_literal:
            return f'0x{self.kind:02X}'
        return self.kind


@dataclass(frozen=True)
class Token:
    units: tuple
    plus: bool = False

    def __post_init__(self):
        if not self.units:
            raise ValueError('a token needs at least one unit')

    @property
    def min_len(self):
        return len(self.units)

    @property
    def is_literal(self):
        return not self.plus and all(unit.is_literal for unit in self.units)

    def literal_bytes(self):
        if not self.is_literal:
            raise ValueError(f'{render_token(self)} is not a literal token')
        return bytes(unit.kind for unit in self.units)

    @property
    def is_digit_text(self):
        return all(unit.is_digit for unit in self.units)

    def unit_at(self, position):
        if position < len(self.units):
            return self.units[position]
        if self.plus:
            return self.units[-1]
        raise IndexError(position)

    def __str__(self):
        return render_token(self)


def join_bytes(byte_values):
    """Least unit covering all the given byte values."""
    observed = set(byte_values)
    if not observed:
        raise ValueError('cannot join an empty byte set')
    if len(observed) == 1:
        return Unit(observed.pop())
    seen = _mask(observed)
    for name in CLASS_ORDER:
        if not np.any(seen & ~CLASS_MASKS[name]):
            return Unit(name)
    return Unit('ALL')


def infer_token(byte_strings):
    """Positionwise join for equal lengths, a single plus class otherwise."""
    samples = [bytes(sample) for sample in byte_strings]
    if not samples:
        raise ValueError('infer_token needs at least one value')
    if any(len(sample) == 0 for sample in samples):
        raise ValueError('infer_token cannot generalize an empty value')
    lengths = {len(sample) for sample in samples}
    raw = np.frombuffer(b''.join(samples), dtype=np.uint8)
    if len(lengths) == 1:
        columns = raw.reshape(len(samples), lengths.pop())
        return Token(tuple(join_bytes(np.unique(columns[:, pos]).tolist()) for pos in range(columns.shape[1])))
    return Token((join_bytes(np.unique(raw).tolist()),), plus=True)


def token_matches(token, data):
    data = bytes(data)
    if not data:
        return False
    if token.plus:
        if len(data) < len(token.units):
            return False
    elif len(data) != len(token.units):
        return False
    return all(token.unit_at(pos).accepts(byte) for pos, byte in enumerate(data))


def all_token(length, plus=False):
    if plus:
        return Token((Unit('ALL'),), plus=True)
    return Token(tuple(Unit('ALL') for _ in range(length)))


def render_token(token):
    body = ' '.join(str(unit) for unit in token.units)
    return f'[{body} +]' if token.plus else f'[{body}]'


def parse_token(text):
    text = text.strip()
    if not (text.startswith('[') and text.endswith(']')):
        raise ValueError(f'not a token: {text!r}')
    parts = text[1:-1].split()
    plus = bool(parts) and parts[-1] == '+'
    if plus:
        parts = parts[:-1]
    units = []
    for part in parts:
        if part.lower().startswith('0x'):
            units.append(Unit(int(part, 16)))
        else:
            units.append(Unit(part))
    return Token(tuple(units), plus)
