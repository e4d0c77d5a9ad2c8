"""Structure recovery: fold a frontier's field sequence into records, arrays and options.

Grammar text, one definition per line, fields first then composites bottom-up::

    atomic F0 = [0x34]
    atomic F2 = [DIGIT] WHERE F2.terminator = F3.bytes OR F2.terminator = F4.bytes
    record S1 { F2 F3 }
    array A0 { S1 } WHERE A0.count = int(F0.bytes) - 1
    record S0 { F0 F1 A0 F2 F4 }
"""
import re
from dataclasses import dataclass, field

from taint_grammar import utils
from taint_grammar.tokens import infer_token, render_token, parse_token
from taint_grammar.utils import MatchBudgetError

logger = utils.set_logger(utils.get_module_name(__file__))

ATOMIC = 'atomic'
RECORD = 'record'
ARRAY = 'array'
OPTION = 'option'
COMPOSITE_PREFIX = {RECORD: 'S', ARRAY: 'A', OPTION: 'O'}

DEFAULT_MAX_PERIOD = 64


@dataclass(eq=False)
class StructureNode:
    id: str
    kind: str
    children: list = field(default_factory=list)
    token: object = None
    constraints: list = field(default_factory=list)
    tag_field: str = None
    variant_tags: list = None

    @property
    def body(self):
        if self.kind != ARRAY:
            raise AttributeError(f'{self.id} is not an array')
        return self.children[0]

    @property
    def source_fields(self):
        if self.kind == ATOMIC:
            return [self.id]
        fields = []
        for child in self.children:
            fields.extend(fid for fid in child.source_fields if fid not in fields)
        return fields

    def walk(self):
        """Pre-order traversal."""
        yield self
        for child in self.children:
            yield from child.walk()

    def post_order(self):
        for child in self.children:
            yield from child.post_order()
        yield self

    def shape(self):
        if self.kind == ATOMIC:
            return ATOMIC, self.id, render_token(self.token) if self.token else None
        return self.kind, self.id, tuple(child.shape() for child in self.children)

    def __repr__(self):
        return f'StructureNode({self.kind} {self.id})'


@dataclass
class StructureDoc:
    """Recovered structure plus the witness bookkeeping needed by later stages.

    ``sequence``/``spans`` hold the witness frontier (field id and byte interval per
    position); they are None for documents parsed from text.
    """
    root: StructureNode
    field_tokens: dict
    field_si: dict = field(default_factory=dict)
    sequence: list = None
    spans: list = None
    witness: bytes = None
    spills: list = field(default_factory=list)
    renames: dict = field(default_factory=dict)

    def nodes(self):
        return list(self.root.walk())

    def nodes_by_id(self, node_id):
        return [node for node in self.root.walk() if node.id == node_id]

    def node(self, node_id):
        for node in self.root.walk():
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    def ids(self):
        seen = []
        for node in self.root.walk():
            if node.id not in seen:
                seen.append(node.id)
        return seen

    def parent_map(self):
        return {child: node for node in self.root.walk() for child in node.children}

    def ancestors(self, node_id):
        """Ids of composites enclosing any node with ``node_id``, innermost first."""
        parent_of = self.parent_map()
        result = []
        for node in self.nodes_by_id(node_id):
            current = parent_of.get(node)
            while current is not None:
                if current.id not in result:
                    result.append(current.id)
                current = parent_of.get(current)
        return result

    def relations(self):
        seen = []
        for node in self.root.walk():
            for rel in node.constraints:
                if rel not in seen:
                    seen.append(rel)
        return seen

    def is_gap(self, fid):
        return fid in self.field_si and self.field_si[fid] is None


class _Shapes:
    """Interned structure shapes; sequences are folded as lists of shape ids."""

    def __init__(self):
        self.table = dict()
        self.shapes = []
        self.option_tags = dict()

    def intern(self, shape):
        if shape not in self.table:
            self.table[shape] = len(self.shapes)
            self.shapes.append(shape)
        return self.table[shape]

    def atom(self, fid):
        return self.intern((ATOMIC, fid))

    def record(self, parts):
        return self.intern((RECORD, tuple(parts)))

    def array(self, block):
        body = block[0] if len(block) == 1 else self.record(block)
        return self.intern((ARRAY, body))


def _has_repeat(window, start, period):
    return start >= 0 and start + 2 * period <= len(window) and \
        window[start:start + period] == window[start + period:start + 2 * period]


def _creates_earlier_repeat(out, new, seq, tail, period):
    """After a fold: a repeat of smaller period, or of this period starting at or before the fold."""
    left = out[len(out) - (2 * period - 1):] if len(out) > 2 * period - 1 else list(out)
    window = left + [new] + seq[tail:tail + 2 * period - 1]
    at = len(left)
    for q in range(1, period + 1):
        for start in range(at - 2 * q + 1, at + 1):
            if _has_repeat(window, start, q):
                return True
    return False


def _fold_pass(seq, period, shapes):
    out = []
    changed = False
    j = 0
    n = len(seq)
    while j < n:
        if j + 2 * period <= n and seq[j:j + period] == seq[j + period:j + 2 * period]:
            block = seq[j:j + period]
            copies = 2
            while seq[j + copies * period:j + (copies + 1) * period] == block:
                copies += 1
            new = shapes.array(block)
            tail = j + copies * period
            if _creates_earlier_repeat(out, new, seq, tail, period):
                return out + [new] + seq[tail:], True, True
            out.append(new)
            changed = True
            j = tail
        else:
            out.append(seq[j])
            j += 1
    return out, changed, False


def fold_repeats(seq, shapes, max_period=DEFAULT_MAX_PERIOD):
    """Fold the leftmost smallest-period tandem repeat into an array until none remain."""
    seq = list(seq)
    period = 1
    while period <= min(max_period, len(seq) // 2):
        seq, _, aborted = _fold_pass(seq, period, shapes)
        period = 1 if aborted else period + 1
    return seq


def _is_tag_candidate(tag, positions, tag_values, sequence):
    """Fixed-length values, at least two distinct and one recurring, each leading a repeat unit."""
    distinct = set(tag_values)
    if len(distinct) < 2 or len(distinct) == len(tag_values) or len({len(v) for v in distinct}) != 1:
        return False
    first = positions[0]
    if first > 0 and sequence[first - 1] in set(sequence[first:]):
        # the field before the first tag recurs inside the repeats: the tag is not their first field
        return False
    segments = {tuple(sequence[a:b]) for a, b in zip(positions, positions[1:])}
    return len(distinct) <= len(segments) + 1


def _detect_variants(syms, sequence, values, field_tokens, shapes, max_period):
    folds = dict()

    def fold(part):
        key = tuple(part)
        if key not in folds:
            folds[key] = tuple(fold_repeats(part, shapes, max_period))
        return folds[key]

    for tag in dict.fromkeys(sequence):
        token = field_tokens.get(tag)
        if token is not None and token.plus:
            continue
        positions = [index for index, fid in enumerate(sequence) if fid == tag]
        tag_values = [bytes(values[index]) for index in positions]
        if not _is_tag_candidate(tag, positions, tag_values, sequence):
            continue
        bounds = list(zip(positions, positions[1:] + [len(syms)]))
        folded = [fold(syms[a:b]) for a, b in bounds[:-1]]
        last = syms[bounds[-1][0]:]
        trailing = []
        for cut in range(len(last) - 1, 0, -1):
            if fold(last[:cut]) in folded:
                last, trailing = last[:cut], last[cut:]
                break
        folded.append(fold(last))
        variant_of = [shapes.record(parts) for parts in folded]
        by_value, by_shape = dict(), dict()
        consistent = True
        for value, variant in zip(tag_values, variant_of):
            if by_value.setdefault(value, variant) != variant or by_shape.setdefault(variant, value) != value:
                consistent = False
                break
        if not consistent or len(by_shape) < 2:
            continue
        variants = list(dict.fromkeys(variant_of))
        option = shapes.intern((OPTION, tuple(variants)))
        shapes.option_tags[option] = (tag, [by_shape[variant] for variant in variants])
        logger.info(f'{tag} discriminates {len(variants)} variants')
        return syms[:positions[0]] + [shapes.intern((ARRAY, option))] + trailing
    return syms


def _to_node(sym, shapes, field_tokens):
    kind, arg = shapes.shapes[sym]
    if kind == ATOMIC:
        return StructureNode(arg, ATOMIC, token=field_tokens.get(arg))
    if kind == ARRAY:
        return StructureNode(None, ARRAY, [_to_node(arg, shapes, field_tokens)])
    node = StructureNode(None, kind, [_to_node(part, shapes, field_tokens) for part in arg])
    if kind == OPTION and sym in shapes.option_tags:
        node.tag_field, node.variant_tags = shapes.option_tags[sym][0], list(shapes.option_tags[sym][1])
    return node


def assign_ids(root):
    counters = {kind: 0 for kind in COMPOSITE_PREFIX}
    for node in root.walk():
        if node.kind != ATOMIC:
            node.id = f'{COMPOSITE_PREFIX[node.kind]}{counters[node.kind]}'
            counters[node.kind] += 1
    return root


def sequence_to_structure(seq, values=None, field_tokens=None, max_period=DEFAULT_MAX_PERIOD):
    """Fold a field id sequence into a structure tree.

    ``values`` (bytes per position) enables variant detection on tag fields.
    """
    if not seq:
        raise ValueError('cannot build a structure from an empty sequence')
    field_tokens = field_tokens or dict()
    shapes = _Shapes()
    atoms = {fid: shapes.atom(fid) for fid in dict.fromkeys(seq)}
    syms = [atoms[fid] for fid in seq]
    if values is not None:
        syms = _detect_variants(syms, list(seq), values, field_tokens, shapes, max_period)
    syms = fold_repeats(syms, shapes, max_period)
    if len(syms) == 1:
        root = _to_node(syms[0], shapes, field_tokens)
    else:
        root = StructureNode(None, RECORD, [_to_node(sym, shapes, field_tokens) for sym in syms])
    return assign_ids(root)


def _first_atom(node):
    while node.kind != ATOMIC:
        if node.kind == OPTION:
            return None
        node = node.children[0]
    return node.id


def find_spills(root):
    """(array id, field id) where an atomic right after an array repeats the body's first field."""
    spills = []
    for node in root.walk():
        for left, right in zip(node.children, node.children[1:]):
            if left.kind == ARRAY and right.kind == ATOMIC and _first_atom(left.body) == right.id:
                spills.append((left.id, right.id))
    return spills


def build_doc(sequence, spans, fields, field_tokens, witness, max_period=DEFAULT_MAX_PERIOD):
    """StructureDoc for a frontier sequence; ``fields`` are the frontier fields (id, si)."""
    values = [witness[itv.start:itv.end] for itv in spans]
    root = sequence_to_structure(sequence, values, field_tokens, max_period)
    doc = StructureDoc(root, dict(field_tokens), {fld.id: fld.si for fld in fields},
                       list(sequence), list(spans), witness)
    doc.spills = find_spills(root)
    for array_id, fid in doc.spills:
        logger.info(f'{fid} spills after {array_id}')
    return doc


def _body_atoms(array):
    body = array.body
    if body.kind == ATOMIC:
        return [body]
    if body.kind == RECORD and all(child.kind == ATOMIC for child in body.children):
        return list(body.children)
    return None


def _absorbable(doc, atoms, neighbors, new_si):
    if len(neighbors) != len(atoms) or any(node.kind != ATOMIC for node in neighbors):
        return False
    if all(body.id == other.id for body, other in zip(atoms, neighbors)):
        return False
    for body, other in zip(atoms, neighbors):
        if body.id == other.id:
            continue
        si_body, si_other = doc.field_si.get(body.id), doc.field_si.get(other.id)
        if si_body is None or si_other is None:
            return False
        if new_si.get(body.id) != new_si.get(other.id) or not si_body.issubset(si_other):
            return False
    return True


def _find_absorption(doc, new_si):
    for node in doc.root.walk():
        if node.kind != RECORD:
            continue
        for index, child in enumerate(node.children):
            if child.kind != ARRAY:
                continue
            atoms = _body_atoms(child)
            if atoms is None:
                continue
            width = len(atoms)
            after = node.children[index + 1:index + 1 + width]
            if _absorbable(doc, atoms, after, new_si):
                return {other.id: body.id for body, other in zip(atoms, after) if other.id != body.id}
            if index >= width:
                before = node.children[index - width:index]
                if _absorbable(doc, atoms, before, new_si):
                    return {other.id: body.id for body, other in zip(atoms, before) if other.id != body.id}
    return None


def repair_array_boundaries(doc, new_si, max_period=DEFAULT_MAX_PERIOD):
    """Merge fields next to an array into the body fields when they are mostly the same, then refold.

    A neighbor qualifies per position when its New_SI equals the body field's and its
    SI contains the body field's SI.
    """
    if doc.sequence is None or not any(node.kind == ARRAY for node in doc.root.walk()):
        return doc
    while True:
        renames = _find_absorption(doc, new_si)
        if not renames:
            return doc
        logger.info(f'array boundary repair merges {renames}')
        sequence = [renames.get(fid, fid) for fid in doc.sequence]
        field_si = dict(doc.field_si)
        for old, new in renames.items():
            field_si[new] = field_si[new].union(field_si.pop(old))
        tokens = {fid: tok for fid, tok in doc.field_tokens.items() if fid not in renames}
        for new in set(renames.values()):
            tokens[new] = infer_token([doc.witness[itv.start:itv.end]
                                       for fid, itv in zip(sequence, doc.spans) if fid == new])
        all_renames = {old: renames.get(new, new) for old, new in doc.renames.items()}
        all_renames.update(renames)
        new_si = {renames.get(fid, fid): si for fid, si in new_si.items()}
        rebuilt = build_doc(sequence, doc.spans, [], tokens, doc.witness, max_period)
        rebuilt.field_si = field_si
        rebuilt.renames = all_renames
        doc = rebuilt


@dataclass(eq=False)
class Instance:
    node: StructureNode
    start: int
    end: int
    children: list = field(default_factory=list)
    variant: int = None

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


class SymbolHooks:
    """Matcher hooks over a field id sequence: each atomic leaf consumes one equal id."""

    def __init__(self, sequence):
        self.sequence = sequence

    def leaf(self, node, pos, state):
        if pos < len(self.sequence) and self.sequence[pos] == node.id:
            yield pos + 1, state

    def admit(self, node, pos, state):
        return True

    def array_count(self, node, state):
        return None

    def variants(self, node, pos, state):
        return range(len(node.children))

    def bind(self, inst, state):
        return state


class Matcher:
    """Backtracking matcher of a structure tree; hooks decide leaves, counts and variants.

    Arrays and records are matched iteratively, greedy longest first.
    """

    def __init__(self, hooks, budget=None):
        self.hooks = hooks
        self.budget = budget
        self.steps = 0

    def matches(self, root, length, state=None):
        """Every instance tree of ``root`` spanning exactly ``length``, in search order."""
        for inst, end, _ in self._match(root, 0, state):
            if end == length:
                yield inst

    def match(self, root, length, state=None):
        return next(self.matches(root, length, state), None)

    def _tick(self):
        self.steps += 1
        if self.budget is not None and self.steps > self.budget:
            raise MatchBudgetError(f'matching exceeded {self.budget} steps')

    def _match(self, node, pos, state):
        self._tick()
        if not self.hooks.admit(node, pos, state):
            return
        if node.kind == ATOMIC:
            for end, new_state in self.hooks.leaf(node, pos, state):
                inst = Instance(node, pos, end)
                yield inst, end, self.hooks.bind(inst, new_state)
        elif node.kind == OPTION:
            for variant in self.hooks.variants(node, pos, state):
                for child, end, new_state in self._match(node.children[variant], pos, state):
                    inst = Instance(node, pos, end, [child], variant)
                    yield inst, end, self.hooks.bind(inst, new_state)
        elif node.kind == RECORD:
            yield from self._match_parts(node, pos, state, lambda index: node.children[index], len(node.children))
        else:
            count = self.hooks.array_count(node, state)
            if count is not None and count < 1:
                return
            yield from self._match_parts(node, pos, state, lambda index: node.body, count)

    def _match_parts(self, node, pos, state, part_at, exact):
        """Match consecutive parts; yields when ``exact`` parts matched, or any number >= 1 if None."""
        gens = [self._match(part_at(0), pos, state)]
        elems = []
        while gens:
            try:
                inst, end, new_state = next(gens[-1])
            except StopIteration:
                gens.pop()
                if elems:
                    if exact is None:
                        yield from self._complete(node, pos, elems)
                    elems.pop()
                continue
            if exact is None and end == inst.start:
                continue
            elems.append((inst, end, new_state))
            if exact is not None and len(elems) == exact:
                yield from self._complete(node, pos, elems)
                elems.pop()
                continue
            gens.append(self._match(part_at(len(elems)), end, new_state))

    def _complete(self, node, pos, elems):
        last_end, last_state = elems[-1][1], elems[-1][2]
        inst = Instance(node, pos, last_end, [elem[0] for elem in elems])
        yield inst, last_end, self.hooks.bind(inst, last_state)


class _GreedyParser:
    """Single-path parse of a field id sequence: arrays take every element they can, options their first fit."""

    def __init__(self, sequence):
        self.sequence = sequence
        self.length = len(sequence)

    def parse(self, node, pos):
        kind = node.kind
        if kind == ATOMIC:
            if pos < self.length and self.sequence[pos] == node.id:
                return Instance(node, pos, pos + 1)
            return None
        if kind == OPTION:
            for variant, child in enumerate(node.children):
                inst = self.parse(child, pos)
                if inst is not None:
                    return Instance(node, pos, inst.end, [inst], variant)
            return None
        parts = []
        end = pos
        if kind == RECORD:
            for child in node.children:
                inst = self.parse(child, end)
                if inst is None:
                    return None
                parts.append(inst)
                end = inst.end
        else:
            body = node.body
            while True:
                inst = self.parse(body, end)
                if inst is None or inst.end == end:
                    break
                parts.append(inst)
                end = inst.end
            if not parts:
                return None
        return Instance(node, pos, end, parts)


def match_sequence(doc, sequence=None):
    """Instance tree of the witness sequence (positions are sequence indices).

    The greedy parse covers folded witnesses; the backtracking matcher handles the rest.
    """
    sequence = doc.sequence if sequence is None else sequence
    inst = _GreedyParser(sequence).parse(doc.root, 0)
    if inst is not None and inst.end == len(sequence):
        return inst
    return Matcher(SymbolHooks(sequence)).match(doc.root, len(sequence))


def expand(root, counts):
    """Flatten the structure, arrays expanded by the per-occurrence ``counts`` iterator."""
    counts = iter(counts)

    def flat(node):
        if node.kind == ATOMIC:
            return [node.id]
        if node.kind == ARRAY:
            return [fid for _ in range(next(counts)) for fid in flat(node.body)]
        if node.kind == OPTION:
            return flat(node.children[next(counts)])
        return [fid for child in node.children for fid in flat(child)]

    return flat(root)


def instance_choices(inst):
    """Array counts and option variants of an instance tree, in pre-order."""
    choices = []
    for sub in inst.walk():
        if sub.node.kind == ARRAY:
            choices.append(len(sub.children))
        elif sub.node.kind == OPTION:
            choices.append(sub.variant)
    return choices


def _where(node):
    groups = dict()
    for rel in node.constraints:
        groups.setdefault(rel.property_key(), []).append(rel.render())
    if not groups:
        return ''
    return ' WHERE ' + ' AND '.join(' OR '.join(group) for group in groups.values())


def _field_order(fid):
    digits = re.sub(r'\D', '', fid)
    return int(digits) if digits else 0, fid


def render(doc):
    """C-like grammar text."""
    lines = []
    atoms = dict()
    for node in doc.root.walk():
        if node.kind == ATOMIC and node.id not in atoms:
            atoms[node.id] = node
    for fid in sorted(atoms, key=_field_order):
        node = atoms[fid]
        token = node.token or doc.field_tokens.get(fid)
        lines.append(f'atomic {fid} = {render_token(token)}{_where(node)}')
    seen = set()
    for node in doc.root.post_order():
        if node.kind == ATOMIC or node.id in seen:
            continue
        seen.add(node.id)
        body = ' '.join(child.id for child in node.children)
        lines.append(f'{node.kind} {node.id} {{ {body} }}{_where(node)}')
    return '\n'.join(lines) + '\n'


_DEF_RE = re.compile(r'^(atomic|record|array|option)\s+(\w+)\s*(?:=\s*(\[[^\]]*\])|\{([^}]*)\})\s*(?:WHERE\s+(.*))?$')


def parse_grammar(text):
    """Parse rendered grammar text back into a StructureDoc (record_type tags are not in the text)."""
    from taint_grammar.semantics import parse_constraints, attach, realign

    defs = dict()
    order = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        matched = _DEF_RE.match(line)
        if matched is None:
            raise ValueError(f'line {lineno}: not a grammar definition: {line!r}')
        kind, node_id, token_text, body, where = matched.groups()
        defs[node_id] = (kind, parse_token(token_text) if kind == ATOMIC else body.split(), where)
        order.append(node_id)
    if not order:
        raise ValueError('empty grammar')
    composites = [node_id for node_id in order if defs[node_id][0] != ATOMIC]
    root_id = composites[-1] if composites else order[-1]
    tokens = {node_id: definition[1] for node_id, definition in defs.items() if definition[0] == ATOMIC}

    def build(node_id):
        kind, arg, _ = defs[node_id]
        if kind == ATOMIC:
            return StructureNode(node_id, ATOMIC, token=arg)
        return StructureNode(node_id, kind, [build(child) for child in arg])

    doc = StructureDoc(build(root_id), tokens)
    relations = [rel for node_id in order if defs[node_id][2] for rel in parse_constraints(defs[node_id][2])]
    return attach(doc, realign(doc, relations))


def node_to_json(node):
    doc = dict(id=node.id, kind=node.kind)
    if node.kind == ATOMIC:
        doc['token'] = render_token(node.token) if node.token else None
    else:
        doc['children'] = [node_to_json(child) for child in node.children]
    if node.tag_field is not None:
        doc['tag_field'] = node.tag_field
        doc['variant_tags'] = [tag.hex() for tag in node.variant_tags]
    return doc


def node_from_json(doc):
    if doc['kind'] == ATOMIC:
        return StructureNode(doc['id'], ATOMIC, token=parse_token(doc['token']) if doc.get('token') else None)
    node = StructureNode(doc['id'], doc['kind'], [node_from_json(child) for child in doc['children']])
    if 'tag_field' in doc:
        node.tag_field = doc['tag_field']
        node.variant_tags = [bytes.fromhex(tag) for tag in doc['variant_tags']]
    return node


def doc_to_json(doc):
    return dict(root=node_to_json(doc.root),
                tokens={fid: render_token(tok) for fid, tok in doc.field_tokens.items()},
                relations=[rel.to_dict() for rel in doc.relations()],
                spills=[list(spill) for spill in doc.spills])


def doc_from_json(data):
    from taint_grammar.semantics import Relation, attach

    doc = StructureDoc(node_from_json(data['root']),
                       {fid: parse_token(tok) for fid, tok in data['tokens'].items()},
                       spills=[tuple(spill) for spill in data.get('spills', [])])
    for node in doc.root.walk():
        if node.kind == ATOMIC and node.token is None:
            node.token = doc.field_tokens.get(node.id)
    return attach(doc, [Relation.from_dict(rel) for rel in data.get('relations', [])])
