"""Semantic dependences between fields and the relations mined from them.

Relation kinds and their rendering::

    size         F4.size = int(F3.bytes)
    count        A0.count = int(F0.bytes) - 1
    offset       A0.offset = int(F3.bytes)
    modulus      A0.count % int(F5.bytes) = 0
    product      A0.count = int(F5.bytes) * int(F6.bytes)
    terminator   F2.terminator = F3.bytes
    record_type  A0.record_type = F1.bytes IN (0x01, 0x02)
"""
import copy
import dataclasses
import itertools
import math
import re
from dataclasses import dataclass, field

from taint_grammar import utils
from taint_grammar.structure_builder import ATOMIC, ARRAY, RECORD, OPTION
from taint_grammar.utils import DanglingPathError

logger = utils.set_logger(utils.get_module_name(__file__))

SIZE = 'size'
TERMINATOR = 'terminator'
COUNT = 'count'
OFFSET = 'offset'
RECORD_TYPE = 'record_type'
MODULUS = 'modulus'
PRODUCT = 'product'
KINDS = (SIZE, TERMINATOR, COUNT, OFFSET, RECORD_TYPE, MODULUS, PRODUCT)
INT_KINDS = (SIZE, COUNT, OFFSET, MODULUS, PRODUCT)

BROADCAST = 'broadcast'
ZIP = 'zip'
ADJUSTS = (0, -1, 1)


@dataclass(frozen=True)
class SemanticDependence:
    source: str
    target: str


@dataclass(frozen=True)
class Relation:
    """``target`` property determined by ``sources``.

    ``align`` tells, per source, whether its single occurrence serves every target
    occurrence (broadcast) or occurrences pair up in order (zip).
    """
    kind: str
    target: str
    sources: tuple
    adjust: int = 0
    align: tuple = ()
    tags: tuple = ()
    exhaustive: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f'unknown relation kind {self.kind}')
        if not self.sources or (self.kind != PRODUCT and len(self.sources) != 1):
            raise ValueError(f'{self.kind} relation on {self.target} has sources {self.sources}')
        if self.adjust not in ADJUSTS:
            raise ValueError(f'adjust must be one of {ADJUSTS}')
        if not self.align:
            object.__setattr__(self, 'align', tuple(BROADCAST for _ in self.sources))

    @property
    def source(self):
        return self.sources[0]

    def property_key(self):
        """Relations sharing a key are alternatives (OR), others conjoin."""
        if self.kind == TERMINATOR:
            return self.target, TERMINATOR
        return self.kind, self.target, self.sources, self.adjust

    def render(self):
        adj = {0: '', -1: ' - 1', 1: ' + 1'}[self.adjust]
        if self.kind == MODULUS:
            return f'{self.target}.count % int({self.source}.bytes){adj} = 0'
        if self.kind == PRODUCT:
            return f'{self.target}.count = ' + ' * '.join(f'int({src}.bytes)' for src in self.sources) + adj
        if self.kind == RECORD_TYPE and self.tags:
            tags = ', '.join('0x' + tag.hex().upper() for tag in self.tags)
            return f'{self.target}.record_type = {self.source}.bytes IN ({tags})'
        if self.kind in (TERMINATOR, RECORD_TYPE):
            return f'{self.target}.{self.kind} = {self.source}.bytes'
        return f'{self.target}.{self.kind} = int({self.source}.bytes){adj}'

    def to_dict(self):
        return dict(kind=self.kind, target=self.target, sources=list(self.sources), adjust=self.adjust,
                    align=list(self.align), tags=[tag.hex() for tag in self.tags], exhaustive=self.exhaustive)

    @classmethod
    def from_dict(cls, doc):
        return cls(doc['kind'], doc['target'], tuple(doc['sources']), int(doc.get('adjust', 0)),
                   tuple(doc.get('align', ())), tuple(bytes.fromhex(tag) for tag in doc.get('tags', ())),
                   bool(doc.get('exhaustive', False)))


_ADJ = r'(?:\s*([-+])\s*1)?'
_PATTERNS = [
    (MODULUS, re.compile(r'^(\w+)\.count\s*%\s*int\((\w+)\.bytes\)' + _ADJ + r'\s*=\s*0$')),
    (PRODUCT, re.compile(r'^(\w+)\.count\s*=\s*(int\(\w+\.bytes\)(?:\s*\*\s*int\(\w+\.bytes\))+)' + _ADJ + '$')),
    ('int', re.compile(r'^(\w+)\.(size|count|offset)\s*=\s*int\((\w+)\.bytes\)' + _ADJ + '$')),
    (RECORD_TYPE, re.compile(r'^(\w+)\.record_type\s*=\s*(\w+)\.bytes\s+IN\s*\(([^)]*)\)$')),
    ('bytes', re.compile(r'^(\w+)\.(terminator|record_type)\s*=\s*(\w+)\.bytes$')),
]


def parse_relation(text):
    text = text.strip()
    for kind, pattern in _PATTERNS:
        matched = pattern.match(text)
        if matched is None:
            continue
        groups = matched.groups()
        if kind == MODULUS:
            return Relation(MODULUS, groups[0], (groups[1],), _adjust(groups[2]))
        if kind == PRODUCT:
            return Relation(PRODUCT, groups[0], tuple(re.findall(r'int\((\w+)\.bytes\)', groups[1])),
                            _adjust(groups[2]))
        if kind == RECORD_TYPE:
            tags = tuple(bytes.fromhex(tag.strip()[2:]) for tag in groups[2].split(',') if tag.strip())
            return Relation(RECORD_TYPE, groups[0], (groups[1],), tags=tags)
        if kind == 'int':
            return Relation(groups[1], groups[0], (groups[2],), _adjust(groups[3]))
        return Relation(groups[1], groups[0], (groups[2],))
    raise ValueError(f'not a constraint: {text!r}')


def _adjust(sign):
    return {None: 0, '-': -1, '+': 1}[sign]


def parse_constraints(where):
    return [parse_relation(alternative) for clause in re.split(r'\s+AND\s+', where.strip())
            for alternative in re.split(r'\s+OR\s+', clause)]


def semantic_dependences(pg, doc):
    """Field pairs across projected edges, lifted to the composites enclosing the target.

    The root and composites that also contain the source are not lift targets.
    """
    known = set(doc.ids())
    deps = []
    for guard, dependent in sorted(pg.graph.edges):
        for source in sorted(pg.annotations.get(guard, ())):
            for target in sorted(pg.annotations.get(dependent, ())):
                if source == target or source not in known or target not in known:
                    continue
                deps.append(SemanticDependence(source, target))
    lifted = []
    for dep in deps:
        for ancestor in doc.ancestors(dep.target):
            if ancestor == doc.root.id or dep.source in doc.node(ancestor).source_fields:
                continue
            lifted.append(SemanticDependence(dep.source, ancestor))
    return list(dict.fromkeys(deps + lifted))


def int_value(data, token):
    """Decimal for digit-text tokens, little-endian unsigned otherwise."""
    data = bytes(data)
    if not data:
        raise ValueError('cannot take the integer value of empty bytes')
    if token is not None and token.is_digit_text:
        if not data.isdigit():
            raise ValueError(f'non-digit byte in digit value {data!r}')
        return int(data.decode('ascii'))
    return int.from_bytes(data, 'little')


@dataclass
class Occurrence:
    start: int
    end: int
    count: int = None
    variant: int = None

    @property
    def size(self):
        return self.end - self.start


@dataclass
class FieldView:
    """Concrete properties of every structure node on one input."""
    data: bytes
    occurrences: dict
    tokens: dict
    bodies: dict = field(default_factory=dict)

    def occ(self, node_id):
        return self.occurrences.get(node_id, [])

    def bytes_of(self, occ):
        return self.data[occ.start:occ.end]

    def int_of(self, fid, occ):
        try:
            return int_value(self.bytes_of(occ), self.tokens.get(fid))
        except ValueError:
            return None


def build_view(doc, inst, data, spans=None):
    """FieldView from an instance tree; with ``spans`` its positions are frontier indices mapped to bytes."""
    occurrences = dict()
    todo = [inst]
    while todo:
        sub = todo.pop()
        node = sub.node
        if spans is None:
            occ = Occurrence(sub.start, sub.end)
        elif sub.end > sub.start:
            occ = Occurrence(spans[sub.start].start, spans[sub.end - 1].end)
        else:
            # empty match: zero-width at the next span
            offset = spans[sub.start].start if sub.start < len(spans) else spans[-1].end
            occ = Occurrence(offset, offset)
        if node.kind == ARRAY:
            occ.count = len(sub.children)
        elif node.kind == OPTION:
            occ.variant = sub.variant
        occs = occurrences.get(node.id)
        if occs is None:
            occurrences[node.id] = [occ]
        else:
            occs.append(occ)
        todo.extend(reversed(sub.children))
    bodies = {node.id: node.body.id for node in doc.root.walk() if node.kind == ARRAY}
    return FieldView(bytes(data), occurrences, dict(doc.field_tokens), bodies)


def _alignment(n_sources, n_targets):
    if n_sources == 1:
        return BROADCAST
    if n_sources == n_targets:
        return ZIP
    return None


def source_values(view, source, align, n_targets):
    """Integer source value per target occurrence, or None if they do not line up."""
    occs = view.occ(source)
    if align == BROADCAST:
        if len(occs) != 1:
            return None
        value = view.int_of(source, occs[0])
        return None if value is None else [value] * n_targets
    if len(occs) != n_targets:
        return None
    values = [view.int_of(source, occ) for occ in occs]
    return None if None in values else values


def _target_property(kind, occ):
    if kind == SIZE:
        return occ.size
    if kind == OFFSET:
        return occ.start
    return occ.count


def evaluate(rel, view):
    """True when the relation holds on the view."""
    targets = view.occ(rel.target)
    if not targets:
        return False
    if rel.kind == TERMINATOR:
        sources = view.occ(rel.source)
        if not sources:
            return False
        term = view.bytes_of(sources[0])
        ends = {occ.start for occ in sources}
        return any(occ.end in ends for occ in targets) and all(term not in view.bytes_of(occ) for occ in targets)
    if rel.kind == RECORD_TYPE:
        options = view.occ(view.bodies.get(rel.target))
        tags = {occ.start: view.bytes_of(occ) for occ in view.occ(rel.source)}
        return bool(options) and all(occ.variant is not None and occ.variant < len(rel.tags)
                                     and tags.get(occ.start) == rel.tags[occ.variant] for occ in options)
    per_source = [source_values(view, src, align, len(targets)) for src, align in zip(rel.sources, rel.align)]
    if any(values is None for values in per_source):
        return False
    for index, occ in enumerate(targets):
        observed = _target_property(rel.kind, occ)
        if observed is None:
            return False
        if rel.kind == PRODUCT:
            expected = math.prod(values[index] for values in per_source) + rel.adjust
        else:
            expected = per_source[0][index] + rel.adjust
        if rel.kind == MODULUS:
            if expected < 1 or observed % expected != 0:
                return False
        elif observed != expected:
            return False
    return True


def check_terminators(view, relations):
    """Every target occurrence not at the end of the input is followed by one of its terminators."""
    groups = dict()
    for rel in relations:
        if rel.kind == TERMINATOR:
            groups.setdefault(rel.target, []).append(rel)
    for target, rels in groups.items():
        terms = []
        for rel in rels:
            sources = view.occ(rel.source)
            if sources:
                terms.append(view.bytes_of(sources[0]))
            else:
                token = view.tokens.get(rel.source)
                if token is not None and token.is_literal:
                    terms.append(token.literal_bytes())
        for occ in view.occ(target):
            if occ.end == len(view.data):
                continue
            if not any(view.data[occ.end:occ.end + len(term)] == term for term in terms):
                return False
            if any(term in view.bytes_of(occ) for term in terms):
                return False
    return True


def is_variable(node):
    if node.kind == ATOMIC:
        return node.token is not None and node.token.plus
    if node.kind in (ARRAY, OPTION):
        return True
    return any(is_variable(child) for child in node.children)


def _int_sources(doc, view):
    """Atomic fields whose every occurrence reads as an integer; only digit text can fail."""
    sources = []
    for fid in doc.ids():
        node = doc.node(fid)
        occs = view.occ(fid)
        if node.kind != ATOMIC or doc.is_gap(fid) or not occs:
            continue
        if any(occ.end <= occ.start for occ in occs):
            continue
        token = view.tokens.get(fid)
        if token is not None and token.is_digit_text and \
                not all(view.data[occ.start:occ.end].isdigit() for occ in occs):
            continue
        sources.append(fid)
    return sources


def _kinds_for(node):
    kinds = []
    if node.kind == ARRAY:
        kinds.append(COUNT)
    if is_variable(node) and node.kind in (ATOMIC, RECORD):
        kinds.append(SIZE)
    if is_variable(node):
        kinds.append(OFFSET)
    return kinds


def _relations_for(target, node, sources, view, exhaustive):
    found = []
    n_targets = len(view.occ(target))
    aligns = dict()
    for source in sources:
        align = _alignment(len(view.occ(source)), n_targets)
        if align is not None:
            aligns[source] = align
    for kind in _kinds_for(node):
        for source, align in aligns.items():
            for adjust in ADJUSTS:
                rel = Relation(kind, target, (source,), adjust, (align,), exhaustive=exhaustive)
                if evaluate(rel, view):
                    found.append(rel)
                    break
    if node.kind != ARRAY:
        return found
    counted = {rel.source for rel in found if rel.kind == COUNT}
    moduli = []
    for source, align in aligns.items():
        if source in counted:
            continue
        values = source_values(view, source, align, n_targets)
        if values is None or min(values) < 2:
            continue
        rel = Relation(MODULUS, target, (source,), 0, (align,), exhaustive=exhaustive)
        if evaluate(rel, view):
            moduli.append(rel)
    for size in range(2, len(moduli) + 1):
        product = None
        for combo in itertools.combinations(moduli, size):
            rel = Relation(PRODUCT, target, tuple(m.source for m in combo), 0, tuple(m.align[0] for m in combo),
                           exhaustive=exhaustive)
            if evaluate(rel, view):
                product = rel
                break
        if product is not None:
            moduli = [m for m in moduli if m.source not in product.sources]
            found.append(product)
            break
    return found + moduli


def _drop_ancestor_targets(relations, doc):
    kept = []
    for rel in relations:
        shadowed = any(other is not rel and other.kind == rel.kind and other.sources == rel.sources
                       and rel.target in doc.ancestors(other.target) for other in relations)
        if shadowed:
            logger.debug(f'dropped {rel.render()}: a descendant target carries the same relation')
        else:
            kept.append(rel)
    return kept


def _terminators(doc, view, int_sources):
    if doc.sequence is None:
        return []
    relations = []
    following = dict()
    for fid, after in zip(doc.sequence, doc.sequence[1:]):
        following.setdefault(fid, dict())[after] = None
    for fid in doc.ids():
        node = doc.node(fid)
        if node.kind != ATOMIC or doc.is_gap(fid) or node.token is None or node.token.is_literal:
            continue
        followers = list(following.get(fid, ()))
        if not followers:
            continue
        usable = all(not doc.is_gap(other) and doc.field_tokens[other].is_literal and other not in int_sources
                     for other in followers)
        if not usable:
            continue
        candidates = [Relation(TERMINATOR, fid, (other,)) for other in followers]
        if all(evaluate(rel, view) for rel in candidates):
            relations.extend(candidates)
    return relations


def _record_types(doc, deps, exhaustive, int_sources=()):
    relations = []
    for node in doc.root.walk():
        if node.kind != ARRAY or node.body.kind != OPTION or node.body.tag_field is None:
            continue
        if node.body.tag_field in int_sources:
            logger.info(f'{node.body.tag_field} sizes, counts or locates a node; no record type on {node.id}')
            continue
        option = node.body
        inside = set(option.source_fields) - {option.tag_field}
        justified = any(dep.source == option.tag_field and dep.target in inside for dep in deps)
        unguarded = not any(dep.target == node.id for dep in deps)
        if justified or (exhaustive and unguarded):
            relations.append(Relation(RECORD_TYPE, node.id, (option.tag_field,), tags=tuple(option.variant_tags),
                                      exhaustive=not justified))
    return relations


def mine_relations(deps, view, doc, exhaustive=True):
    """Relations that hold on the witness view; int relations need a dependence unless none targets the node."""
    int_sources = _int_sources(doc, view)
    by_target = dict()
    for dep in deps:
        by_target.setdefault(dep.target, []).append(dep.source)
    relations = []
    for node_id in doc.ids():
        if node_id == doc.root.id:
            continue
        node = doc.node(node_id)
        if not _kinds_for(node):
            continue
        if node_id in by_target:
            sources = [src for src in dict.fromkeys(by_target[node_id]) if src in int_sources]
            relations.extend(_relations_for(node_id, node, sources, view, exhaustive=False))
        elif exhaustive:
            inside = set(node.source_fields)
            sources = [src for src in int_sources if src not in inside]
            relations.extend(_relations_for(node_id, node, sources, view, exhaustive=True))
    relations = _drop_ancestor_targets(relations, doc)
    used = {src for rel in relations if rel.kind in INT_KINDS for src in rel.sources}
    relations.extend(_terminators(doc, view, used))
    relations.extend(_record_types(doc, deps, exhaustive, used))
    for rel in relations:
        logger.info(f'mined {rel.render()}' + (' (exhaustive)' if rel.exhaustive else ''))
    return relations


def attach(doc, relations):
    """Store relations on their target nodes; every referenced node must exist."""
    ids = set(doc.ids())
    for rel in relations:
        for node_id in (rel.target,) + tuple(rel.sources):
            if node_id not in ids:
                raise DanglingPathError(f'{rel.render()} references unknown node {node_id}')
        for node in doc.nodes_by_id(rel.target):
            if rel not in node.constraints:
                node.constraints.append(rel)
            if rel.kind == RECORD_TYPE and node.kind == ARRAY and node.body.kind == OPTION and rel.tags:
                node.body.tag_field = rel.source
                node.body.variant_tags = list(rel.tags)
    return doc


def realign(doc, relations):
    """Relations with source alignment inferred from the structure (text grammars do not carry it)."""
    return [dataclasses.replace(rel, align=tuple(infer_align(doc, src) for src in rel.sources)) for rel in relations]


def strip_relations(doc):
    """Copy of the document with every constraint removed."""
    stripped = copy.deepcopy(doc)
    for node in stripped.root.walk():
        node.constraints = []
    return stripped


def infer_align(doc, source):
    """Broadcast when the source is a single node outside any array, zip otherwise."""
    nodes = doc.nodes_by_id(source)
    parent_of = doc.parent_map()
    if len(nodes) != 1:
        return ZIP
    current = parent_of.get(nodes[0])
    while current is not None:
        if current.kind == ARRAY:
            return ZIP
        current = parent_of.get(current)
    return BROADCAST
