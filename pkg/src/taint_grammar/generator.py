"""Random input generation from a constrained structure, and acceptance measurement."""
import math
import subprocess
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from taint_grammar import utils
from taint_grammar.semantics import (COUNT, MODULUS, OFFSET, PRODUCT, RECORD_TYPE, SIZE, TERMINATOR, INT_KINDS,
                                     BROADCAST, build_view, check_terminators, evaluate, int_value)
from taint_grammar.structure_builder import ARRAY, ATOMIC, OPTION, Instance, Matcher
from taint_grammar.tokens import Token, Unit, token_matches
from taint_grammar.utils import UnsatisfiableError, MatchBudgetError

logger = utils.set_logger(utils.get_module_name(__file__))

ACCEPTED = 'accepted'
REJECTED = 'rejected'
TRAPPED = 'trapped'

DIGIT_PLUS_MAX = 10 ** 9


@dataclass
class GenConfig:
    seed: int = 0
    max_array_count: int = 16
    max_varlen_size: int = 64
    samples: int = 1000
    max_relayout: int = 8
    attempts: int = 32
    reparse: bool = True
    match_budget: int = 200000

    def __post_init__(self):
        for name in ('max_array_count', 'max_varlen_size', 'max_relayout', 'attempts', 'match_budget'):
            if getattr(self, name) < 1:
                raise ValueError(f'GenConfig.{name} must be >= 1, got {getattr(self, name)}')
        if self.samples < 0:
            raise ValueError(f'GenConfig.samples must be >= 0, got {self.samples}')


@dataclass
class AcceptanceReport:
    generated: int = 0
    accepted: int = 0
    rejected: int = 0
    trapped: int = 0
    errors: int = 0

    @property
    def ratio(self):
        """Accepted percentage, None when nothing was generated."""
        if self.generated == 0:
            return None
        return 100. * self.accepted / self.generated

    @property
    def undefined(self):
        return self.generated == 0

    def __str__(self):
        ratio = 'undefined' if self.undefined else f'{self.ratio:.1f}%'
        return (f'generated={self.generated} accepted={self.accepted} rejected={self.rejected} '
                f'trapped={self.trapped} errors={self.errors} ratio={ratio}')


def widen(token):
    """Token admitting any value of its encoding: digit text stays digits, binary becomes ALL."""
    unit = Unit('DIGIT') if token.is_digit_text else Unit('ALL')
    return Token(tuple(unit for _ in token.units), token.plus)


def int_sources(doc):
    return {src for rel in doc.relations() if rel.kind in INT_KINDS for src in rel.sources}


def effective_tokens(doc):
    tokens = dict(doc.field_tokens)
    for src in int_sources(doc):
        if src in tokens:
            tokens[src] = widen(tokens[src])
    return tokens


def max_value(token):
    if token.is_digit_text:
        return DIGIT_PLUS_MAX if token.plus else 10 ** len(token.units) - 1
    return 256 ** (8 if token.plus else len(token.units)) - 1


def encode(value, token):
    """Bytes of ``value`` in the source encoding; None if it does not fit."""
    if value < 0 or value > max_value(token):
        return None
    if token.is_digit_text:
        return str(value).encode('ascii') if token.plus else f'{value:0{len(token.units)}d}'.encode('ascii')
    width = len(token.units)
    if token.plus:
        width = max(width, (value.bit_length() + 7) // 8 or 1)
    return value.to_bytes(width, 'little')


@dataclass(eq=False)
class _Slot:
    node: object
    index: int
    children: list = field(default_factory=list)
    count: int = None
    variant: int = None
    size: int = None
    forced: bytes = None
    data: bytes = b''
    start: int = 0
    end: int = 0

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


def _factorizations(value, slots):
    """Tuples of ``len(slots)`` factors multiplying to ``value``; a slot is an int (fixed) or a max bound."""
    if not slots:
        return [()] if value == 1 else []
    head, rest = slots[0], slots[1:]
    result = []
    if isinstance(head, tuple):
        fixed = head[0]
        if fixed >= 1 and value % fixed == 0:
            result.extend((fixed,) + tail for tail in _factorizations(value // fixed, rest))
        return result
    for factor in range(1, min(value, head) + 1):
        if value % factor == 0:
            result.extend((factor,) + tail for tail in _factorizations(value // factor, rest))
    return result


class _Builder:
    """One generation attempt: skeleton, byte fill, layout and back-fill."""

    def __init__(self, doc, cfg, rng):
        self.doc = doc
        self.cfg = cfg
        self.rng = rng
        self.tokens = effective_tokens(doc)
        self.rels = dict()
        for rel in doc.relations():
            self.rels.setdefault(rel.target, []).append(rel)
        self.option_tags = dict()
        for rel in doc.relations():
            if rel.kind == RECORD_TYPE and rel.tags:
                for node in doc.nodes_by_id(rel.target):
                    if node.kind == ARRAY and node.body.kind == OPTION:
                        self.option_tags[node.body] = (rel.source, rel.tags)
        self.excluded = dict()
        for rel in doc.relations():
            if rel.kind == TERMINATOR:
                token = doc.field_tokens.get(rel.source)
                if token is not None and token.is_literal:
                    self.excluded.setdefault(rel.target, set()).add(token.literal_bytes()[0])
        self.bound = dict()
        self.occurrences = Counter()
        self.slots = dict()

    def _rels(self, node_id, *kinds):
        return [rel for rel in self.rels.get(node_id, ()) if rel.kind in kinds]

    @staticmethod
    def _key(rel, position, target_index):
        return rel.sources[position], 0 if rel.align[position] == BROADCAST else target_index

    def _limit(self, fid):
        return max_value(self.tokens[fid])

    def _bind(self, key, value):
        if value < 0 or value > self._limit(key[0]):
            raise UnsatisfiableError(f'{key[0]} cannot encode {value}')
        if key in self.bound and self.bound[key] != value:
            raise UnsatisfiableError(f'{key[0]}#{key[1]} is bound to {self.bound[key]} and {value}')
        self.bound[key] = value

    def _uniform(self, choices):
        choices = list(choices)
        if not choices:
            raise UnsatisfiableError('no admissible value')
        return choices[int(self.rng.integers(len(choices)))]

    def build(self):
        root = self._slot(self.doc.root)
        for slot in root.walk():
            if slot.node.kind == ATOMIC:
                slot.data = self._fill(slot)
        self._layout(root)
        return root

    def _slot(self, node):
        index = self.occurrences[node.id]
        self.occurrences[node.id] += 1
        slot = _Slot(node, index)
        if node.kind == ATOMIC:
            slot.size = self._atomic_size(node, index)
            self.slots[(node.id, index)] = slot
        elif node.kind == ARRAY:
            slot.count = self._array_count(node, index)
            slot.children = [self._slot(node.body) for _ in range(slot.count)]
        elif node.kind == OPTION:
            slot.variant = int(self.rng.integers(len(node.children)))
            slot.children = [self._slot(node.children[slot.variant])]
            if node in self.option_tags:
                tag_field, tags = self.option_tags[node]
                for sub in slot.children[0].walk():
                    if sub.node.kind == ATOMIC and sub.node.id == tag_field:
                        sub.forced = tags[slot.variant]
                        break
        else:
            slot.children = [self._slot(child) for child in node.children]
        return slot

    def _atomic_size(self, node, index):
        token = self.tokens.get(node.id) or node.token
        if not token.plus:
            return len(token.units)
        for rel in self._rels(node.id, SIZE):
            key = self._key(rel, 0, index)
            if key in self.bound:
                size = self.bound[key] + rel.adjust
                if size < token.min_len:
                    raise UnsatisfiableError(f'{node.id} cannot have size {size}')
                return size
        low = token.min_len
        sizes = range(low, max(low, self.cfg.max_varlen_size) + 1)
        rels = self._rels(node.id, SIZE)
        sizes = [size for size in sizes if all(0 <= size - rel.adjust <= self._limit(rel.source) for rel in rels)]
        size = self._uniform(sizes)
        for rel in rels:
            self._bind(self._key(rel, 0, index), size - rel.adjust)
        return size

    def _array_count(self, node, index):
        counts = self._rels(node.id, COUNT)
        products = self._rels(node.id, PRODUCT)
        moduli = self._rels(node.id, MODULUS)
        count = None

        def settle(value):
            if count is not None and count != value:
                raise UnsatisfiableError(f'{node.id} count {count} conflicts with {value}')
            return value

        for rel in counts:
            key = self._key(rel, 0, index)
            if key in self.bound:
                count = settle(self.bound[key] + rel.adjust)
        for rel in products:
            keys = [self._key(rel, pos, index) for pos in range(len(rel.sources))]
            if all(key in self.bound for key in keys):
                count = settle(math.prod(self.bound[key] for key in keys))
        if count is None and products:
            count = self._choose_product(products[0], index, counts, moduli)
        if count is None:
            candidates = range(1, self.cfg.max_array_count + 1)
            for rel in counts:
                candidates = [c for c in candidates if 0 <= c - rel.adjust <= self._limit(rel.source)]
            for rel in moduli:
                key = self._key(rel, 0, index)
                if key in self.bound:
                    candidates = [c for c in candidates if self.bound[key] >= 1 and c % self.bound[key] == 0]
                else:
                    candidates = [c for c in candidates if self._divisors(c, rel.source)]
            count = self._uniform(candidates)
        if count < 1:
            raise UnsatisfiableError(f'{node.id} would have {count} elements')
        for rel in counts:
            self._bind(self._key(rel, 0, index), count - rel.adjust)
        for rel in products:
            keys = [self._key(rel, pos, index) for pos in range(len(rel.sources))]
            if not all(key in self.bound for key in keys):
                self._bind_factors(rel, keys, count)
        for rel in moduli:
            key = self._key(rel, 0, index)
            if key in self.bound:
                if self.bound[key] < 1 or count % self.bound[key]:
                    raise UnsatisfiableError(f'{node.id} count {count} is not a multiple of {self.bound[key]}')
            else:
                self._bind(key, self._uniform(self._divisors(count, rel.source) or [1]))
        return count

    def _divisors(self, count, source):
        return [d for d in range(2, count + 1) if count % d == 0 and d <= self._limit(source)]

    def _product_slots(self, rel, keys):
        return [(self.bound[key],) if key in self.bound else min(self._limit(rel.sources[pos]),
                                                                    self.cfg.max_array_count)
                for pos, key in enumerate(keys)]

    def _choose_product(self, rel, index, counts, moduli):
        keys = [self._key(rel, pos, index) for pos in range(len(rel.sources))]
        slots = self._product_slots(rel, keys)
        achievable = [c for c in range(1, self.cfg.max_array_count + 1) if _factorizations(c, slots)
                      and all(0 <= c - other.adjust <= self._limit(other.source) for other in counts)]
        if not achievable:
            raise UnsatisfiableError(f'no count of {rel.target} up to {self.cfg.max_array_count} '
                                     f'factors over {", ".join(rel.sources)}')
        return self._uniform(achievable)

    def _bind_factors(self, rel, keys, count):
        options = _factorizations(count, self._product_slots(rel, keys))
        factors = self._uniform(options)
        for key, factor in zip(keys, factors):
            self._bind(key, factor)

    def _random_bytes(self, fid, token, size):
        excluded = self.excluded.get(fid, set())
        out = bytearray()
        for position in range(size):
            unit = token.unit_at(position)
            members = [int(b) for b in unit.members() if int(b) not in excluded] or [int(b) for b in unit.members()]
            out.append(members[int(self.rng.integers(len(members)))])
        return bytes(out)

    def _fill(self, slot):
        fid = slot.node.id
        token = self.tokens.get(fid) or slot.node.token
        if slot.forced is not None:
            return slot.forced
        if (fid, slot.index) in self.bound:
            data = encode(self.bound[(fid, slot.index)], token)
            if data is None:
                raise UnsatisfiableError(f'{fid} cannot encode {self.bound[(fid, slot.index)]}')
            return data
        original = self.doc.field_tokens.get(fid, token)
        if original.is_literal:
            return original.literal_bytes()
        return self._random_bytes(fid, token, slot.size)

    @staticmethod
    def _place(root):
        cursor = 0
        for slot in root.walk():
            slot.start = cursor
            if slot.node.kind == ATOMIC:
                cursor += len(slot.data)
                slot.end = cursor
        for slot in _post_order(root):
            if slot.node.kind != ATOMIC:
                slot.end = slot.children[-1].end if slot.children else slot.start

    def _layout(self, root):
        backfill = [rel for rels in self.rels.values() for rel in rels
                    if rel.kind == OFFSET or (rel.kind == SIZE and self._is_composite(rel.target))]
        for _ in range(self.cfg.max_relayout):
            self._place(root)
            changed = False
            for rel in backfill:
                for slot in root.walk():
                    if slot.node.id != rel.target:
                        continue
                    measured = slot.start if rel.kind == OFFSET else slot.end - slot.start
                    key = self._key(rel, 0, slot.index)
                    value = measured - rel.adjust
                    source = self.slots.get(key)
                    if source is None:
                        continue
                    if value < 0:
                        raise UnsatisfiableError(f'{rel.render()} needs a negative source')
                    data = encode(value, self.tokens[key[0]])
                    if data is None:
                        raise UnsatisfiableError(f'{key[0]} cannot encode {value}')
                    if data != source.data:
                        source.data = data
                        changed = True
            if not changed:
                return
        raise UnsatisfiableError('layout did not settle')

    def _is_composite(self, node_id):
        return any(node.kind != ATOMIC for node in self.doc.nodes_by_id(node_id))


def _post_order(slot):
    for child in slot.children:
        yield from _post_order(child)
    yield slot


def _instance(slot):
    return Instance(slot.node, slot.start, slot.end, [_instance(child) for child in slot.children], slot.variant)


def _consistent(doc, tokens, root, data):
    for slot in root.walk():
        if slot.node.kind == ATOMIC and not token_matches(tokens.get(slot.node.id) or slot.node.token, slot.data):
            return False
    view = build_view(doc, _instance(root), data)
    relations = doc.relations()
    return all(evaluate(rel, view) for rel in relations if rel.kind != TERMINATOR) and \
        check_terminators(view, relations)


def generate(doc, cfg, rng=None):
    """One input satisfying every token and relation of ``doc``."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    failure = None
    for attempt in range(cfg.attempts):
        builder = _Builder(doc, cfg, rng)
        try:
            root = builder.build()
        except UnsatisfiableError as e:
            failure = e
            continue
        data = b''.join(slot.data for slot in root.walk() if slot.node.kind == ATOMIC)
        if not _consistent(doc, builder.tokens, root, data):
            failure = UnsatisfiableError('generated input violates its own constraints')
            continue
        if cfg.reparse and not self_check(doc, data, cfg.match_budget):
            failure = UnsatisfiableError('generated input does not re-parse')
            continue
        if attempt:
            logger.debug(f'generated after {attempt + 1} attempts')
        return data
    raise UnsatisfiableError(f'no input after {cfg.attempts} attempts: {failure}')


def generate_many(doc, cfg):
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.samples):
        yield generate(doc, cfg, rng)


class ByteHooks:
    """Matcher hooks over raw bytes guided by tokens and relations."""

    def __init__(self, doc, data):
        self.doc = doc
        self.data = bytes(data)
        self.tokens = effective_tokens(doc)
        self.rels = dict()
        for rel in doc.relations():
            self.rels.setdefault(rel.target, []).append(rel)
        self.terms = dict()
        for rel in doc.relations():
            if rel.kind == TERMINATOR:
                token = doc.field_tokens.get(rel.source)
                if token is not None and token.is_literal:
                    self.terms.setdefault(rel.target, []).append(token.literal_bytes())
        self.option_tags = {node.body: rel.tags for rel in doc.relations() if rel.kind == RECORD_TYPE and rel.tags
                            for node in doc.nodes_by_id(rel.target) if node.kind == ARRAY and node.body.kind == OPTION}

    def _value(self, rel, position, node_id, state):
        occs = state.get(rel.sources[position], ())
        index = 0 if rel.align[position] == BROADCAST else len(state.get(node_id, ()))
        if index >= len(occs):
            return None
        start, end = occs[index]
        try:
            return int_value(self.data[start:end], self.tokens.get(rel.sources[position]))
        except ValueError:
            return None

    def _rels(self, node_id, kind):
        return [rel for rel in self.rels.get(node_id, ()) if rel.kind == kind]

    def leaf(self, node, pos, state):
        token = self.tokens.get(node.id) or node.token
        if not token.plus:
            end = pos + len(token.units)
            if token_matches(token, self.data[pos:end]):
                yield end, state
            return
        for rel in self._rels(node.id, SIZE):
            value = self._value(rel, 0, node.id, state)
            if value is not None:
                end = pos + value + rel.adjust
                if end <= len(self.data) and token_matches(token, self.data[pos:end]):
                    yield end, state
                return
        if node.id in self.terms:
            ends = sorted({self.data.find(term, pos + token.min_len) for term in self.terms[node.id]} - {-1})
            for end in ends:
                if token_matches(token, self.data[pos:end]):
                    yield end, state
            return
        run = pos
        while run < len(self.data) and token.unit_at(run - pos).accepts(self.data[run]):
            run += 1
        for end in range(run, pos + token.min_len - 1, -1):
            yield end, state

    def admit(self, node, pos, state):
        for rel in self._rels(node.id, OFFSET):
            value = self._value(rel, 0, node.id, state)
            if value is not None and value + rel.adjust != pos:
                return False
        return True

    def array_count(self, node, state):
        for rel in self._rels(node.id, COUNT):
            value = self._value(rel, 0, node.id, state)
            if value is not None:
                return value + rel.adjust
        for rel in self._rels(node.id, PRODUCT):
            values = [self._value(rel, pos, node.id, state) for pos in range(len(rel.sources))]
            if None not in values:
                return math.prod(values)
        return None

    def variants(self, node, pos, state):
        tags = self.option_tags.get(node)
        if not tags:
            return range(len(node.children))
        return [index for index, tag in enumerate(tags) if self.data[pos:pos + len(tag)] == tag]

    def bind(self, inst, state):
        state = dict(state)
        state[inst.node.id] = state.get(inst.node.id, ()) + ((inst.start, inst.end),)
        return state


def self_check(doc, data, budget=200000):
    """True if ``data`` parses under ``doc`` with every relation holding."""
    hooks = ByteHooks(doc, data)
    matcher = Matcher(hooks, budget)
    relations = doc.relations()
    try:
        for inst in matcher.matches(doc.root, len(data), dict()):
            view = build_view(doc, inst, data)
            if all(evaluate(rel, view) for rel in relations if rel.kind != TERMINATOR) and \
                    check_terminators(view, relations):
                return True
    except MatchBudgetError as e:
        logger.warning(f'self check gave up: {e}')
    return False


def command_runner(argv):
    """Runner for an external subject: the input file path is appended to ``argv``; exit 0 accepts."""

    def run(data):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp).joinpath('input.bin')
            path.write_bytes(data)
            completed = subprocess.run(list(argv) + [str(path)], capture_output=True)
        return ACCEPTED if completed.returncode == 0 else REJECTED

    return run


def acceptance(doc, program, cfg):
    """Feed ``cfg.samples`` generated inputs to ``program`` (a callable returning a run status)."""
    report = AcceptanceReport()
    for data in generate_many(doc, cfg):
        report.generated += 1
        try:
            status = program(data)
        except Exception as e:
            logger.error(f'harness error on sample {report.generated}: {e} {utils.getLineInfo()}')
            report.errors += 1
            continue
        if status == ACCEPTED:
            report.accepted += 1
        elif status == TRAPPED:
            report.trapped += 1
        else:
            report.rejected += 1
    logger.info(str(report))
    return report
