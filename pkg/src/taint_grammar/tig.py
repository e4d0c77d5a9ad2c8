"""Taint interval graph: containment tree over taint intervals and its frontiers."""
from dataclasses import dataclass, field

import networkx as nx
from networkx.drawing import nx_pydot

from taint_grammar import utils
from taint_grammar.field_partition import Field, SourceIndex, compute_new_si
from taint_grammar.tokens import infer_token, all_token
from taint_grammar.trace_model import ByteInterval

logger = utils.set_logger(utils.get_module_name(__file__))

GAP = 'GAP'
ROOT = 'ROOT'


@dataclass(eq=False)
class TigNode:
    interval: ByteInterval
    uses: frozenset = None
    children: list = field(default_factory=list)
    field: str = None

    @property
    def is_gap(self):
        return self.field == GAP

    @property
    def is_root(self):
        return self.field == ROOT

    @property
    def si(self):
        return SourceIndex(self.uses) if self.uses else None

    def walk(self):
        """Pre-order traversal."""
        todo = [self]
        while todo:
            node = todo.pop()
            yield node
            todo.extend(reversed(node.children))

    def __repr__(self):
        return f'TigNode({self.field} {self.interval}, {len(self.children)} children)'


@dataclass(frozen=True)
class Frontier:
    nodes: tuple
    depth: int

    def intervals(self):
        return [node.interval for node in self.nodes]


@dataclass
class FrontierMap:
    entries: dict
    cuts: list
    root_key: object


@dataclass(frozen=True)
class FrontierField:
    """A field of the selected frontier; gap fields have no source index."""
    id: str
    key: object
    values: tuple
    si: SourceIndex = None

    @property
    def is_gap(self):
        return self.si is None

    def intervals(self):
        return [node.interval for node in self.values]

    def value_bytes(self, data):
        return [data[itv.start:itv.end] for itv in self.intervals()]


def _order(itv):
    return itv.start, -itv.end


def _find_overlaps(ordered):
    found = []
    stack = []
    for itv in ordered:
        while stack and stack[-1].end <= itv.start:
            stack.pop()
        if stack and itv.end > stack[-1].end:
            found.append((stack[-1], itv))
            continue
        stack.append(itv)
    return found


def _split(uses):
    """Split ``uses`` in place; returns its intervals in (start, -length) order."""
    rounds = 0
    while True:
        ordered = sorted(uses, key=_order)
        overlaps = _find_overlaps(ordered)
        if not overlaps:
            break
        rounds += 1
        for left, right in overlaps:
            if left not in uses or right not in uses:
                continue
            left_uses, right_uses = uses.pop(left), uses.pop(right)
            pieces = [(ByteInterval(left.start, right.start), left_uses),
                      (ByteInterval(right.start, left.end), left_uses | right_uses),
                      (ByteInterval(left.end, right.end), right_uses)]
            for itv, pairs in pieces:
                uses[itv] = uses[itv] | pairs if itv in uses else pairs
    if rounds:
        logger.info(f'overlapping intervals split in {rounds} rounds')
    return ordered


def split_overlaps(uses):
    """Split partially overlapping intervals at their mutual boundaries until none remain.

    ``uses`` maps interval to a set of use pairs; fragments inherit the pairs of the
    interval they were cut from, the shared middle gets both.
    """
    uses = {itv: frozenset(pairs) for itv, pairs in uses.items()}
    _split(uses)
    return uses


def _fill_gaps(node):
    if not node.children:
        return
    filled = []
    cursor = node.interval.start
    for child in node.children:
        if child.interval.start > cursor:
            filled.append(TigNode(ByteInterval(cursor, child.interval.start), field=GAP))
        filled.append(child)
        cursor = child.interval.end
        _fill_gaps(child)
    if cursor < node.interval.end:
        filled.append(TigNode(ByteInterval(cursor, node.interval.end), field=GAP))
    node.children = filled


def build_tig(values, input_length):
    """Containment tree of the value intervals under a whole-input root, gaps filled."""
    uses = dict()
    for value in values:
        pairs = uses.get(value.interval)
        uses[value.interval] = frozenset(value.uses) if pairs is None else pairs | value.uses
    ordered = _split(uses)
    whole = ByteInterval(0, input_length)
    root = TigNode(whole, field=ROOT)
    if whole in uses:
        root.uses = uses[whole]
        ordered.remove(whole)

    # stack over (start, -length) order yields the transitive reduction of containment;
    # field ids follow the first node of each use set in that order
    stack = [root]
    field_ids = dict()
    count = 0
    for itv in ordered:
        pairs = uses[itv]
        fid = field_ids.get(pairs)
        if fid is None:
            fid = field_ids[pairs] = f'F{len(field_ids)}'
        node = TigNode(itv, pairs, field=fid)
        top = stack[-1].interval
        while not (top.start <= itv.start and itv.end <= top.end):
            stack.pop()
            top = stack[-1].interval
        stack[-1].children.append(node)
        stack.append(node)
        count += 1
    _fill_gaps(root)
    logger.debug(f'tig built: {count} interval nodes in {len(field_ids)} fields over {input_length} bytes')
    return root


def parents(root):
    return {child: node for node in root.walk() for child in node.children}


def _keys(root, value_key):
    keys = {root: root.si if root.uses else ROOT}
    for node in root.walk():
        previous = None
        for child in node.children:
            if child.is_gap:
                keys[child] = (GAP, previous, keys[node])
            else:
                keys[child] = value_key(child)
            previous = keys[child]
    return keys


def si_keys(root):
    """Node to SI key; gap nodes are keyed by their preceding sibling and parent."""
    by_uses = dict()

    def key(node):
        si = by_uses.get(node.uses)
        if si is None:
            si = by_uses[node.uses] = SourceIndex(node.uses)
        return si

    return _keys(root, key)


def new_si_keys(root):
    """Node to New_SI key, co-occurrence closed over the distinct use sets of the tree."""
    distinct = dict.fromkeys(node.uses for node in root.walk() if node.uses and not node.is_root)
    groups = [Field(f'U{index}', SourceIndex(uses), ()) for index, uses in enumerate(distinct)]
    new_si = compute_new_si(groups)
    by_uses = {group.si.pairs: new_si[group.id] for group in groups}
    return _keys(root, lambda node: by_uses[node.uses])


def cuts(root):
    """Frontiers by depth: cut 1 is the root's children, each next cut expands internal nodes."""
    current = list(root.children) or [root]
    result = [Frontier(tuple(current), 1)]
    while any(node.children for node in current):
        current = [child for node in current for child in (node.children or [node])]
        result.append(Frontier(tuple(current), len(result) + 1))
    return result


def _repeating_keys(frontier, parent_of, key_of):
    seen = dict()
    repeating = []
    for node in frontier.nodes:
        slot = (id(parent_of.get(node)), key_of(node))
        seen[slot] = seen.get(slot, 0) + 1
        if seen[slot] == 2 and slot[1] not in repeating:
            repeating.append(slot[1])
    return repeating


def frontiers(root, si_of, parent_of=None, all_cuts=None):
    """FrontierMap: root key to the top cut, each sibling-repeating key to the cuts where it repeats.

    ``parent_of`` and ``all_cuts`` only depend on the tree and can be shared between key functions.
    """
    parent_of = parents(root) if parent_of is None else parent_of
    all_cuts = cuts(root) if all_cuts is None else all_cuts
    root_key = si_of(root)
    entries = {root_key: [all_cuts[0]]}
    for frontier in all_cuts:
        for key in _repeating_keys(frontier, parent_of, si_of):
            listed = entries.setdefault(key, [])
            if not any(other.depth == frontier.depth for other in listed):
                listed.append(frontier)
    return FrontierMap(entries, all_cuts, root_key)


def select_frontier(frontier_map):
    """Shallowest cut exposing sibling repetition, else the root's children."""
    repeating = [frontier for key, frontiers_ in frontier_map.entries.items() if key != frontier_map.root_key
                 for frontier in frontiers_]
    if repeating:
        return min(repeating, key=lambda frontier: frontier.depth)
    return frontier_map.entries[frontier_map.root_key][0]


def frontier_fields(frontier, key_of, prefix='F'):
    """Renumber the fields of a frontier F0... by first occurrence, gap fields included."""
    groups = dict()
    for node in frontier.nodes:
        groups.setdefault(key_of(node), []).append(node)
    fields = []
    for index, (key, nodes) in enumerate(groups.items()):
        fields.append(FrontierField(f'{prefix}{index}', key, tuple(nodes), None if nodes[0].is_gap else nodes[0].si))
    return fields


def frontier_sequence(frontier, fields):
    field_of = {node: fld.id for fld in fields for node in fld.values}
    return [field_of[node] for node in frontier.nodes]


def field_tokens(fields, data):
    """Token per frontier field; gap fields get ALL units (ALL+ when their lengths vary)."""
    tokens = dict()
    for fld in fields:
        samples = fld.value_bytes(data)
        if fld.is_gap:
            lengths = {len(sample) for sample in samples}
            tokens[fld.id] = all_token(lengths.pop(), plus=False) if len(lengths) == 1 else all_token(0, plus=True)
        else:
            tokens[fld.id] = infer_token(samples)
    return tokens


def containment_edges(root):
    """(parent interval, child interval) pairs between non-gap nodes."""
    return {(node.interval, child.interval) for node in root.walk() for child in node.children if not child.is_gap}


def to_graph(root):
    graph = nx.DiGraph()
    names = {node: f'n{index}' for index, node in enumerate(root.walk())}
    for node, name in names.items():
        graph.add_node(name, label=f'"{node.field} {node.interval}"')
    for node in root.walk():
        for child in node.children:
            graph.add_edge(names[node], names[child])
    return graph


def to_dot(root):
    return nx_pydot.to_pydot(to_graph(root)).to_string()


def frontier_map_to_json(frontier_map):
    return {str(key): [[[itv.start, itv.end] for itv in frontier.intervals()] for frontier in frontiers_]
            for key, frontiers_ in frontier_map.entries.items()}
