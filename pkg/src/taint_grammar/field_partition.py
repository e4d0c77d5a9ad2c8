"""Values, fields and source indices computed from a taint trace."""
from dataclasses import dataclass

from easydict import EasyDict as edict
from networkx.utils import UnionFind

from taint_grammar import utils
from taint_grammar.utils import CoverageError

logger = utils.set_logger(utils.get_module_name(__file__))


@dataclass(frozen=True)
class SourceIndex:
    """The set of (instruction, context) pairs that identifies a field."""
    pairs: frozenset

    def __post_init__(self):
        if not self.pairs:
            raise ValueError('a source index cannot be empty')

    def instructions(self):
        return {addr for addr, _ in self.pairs}

    def intersects(self, other):
        return not self.pairs.isdisjoint(other.pairs)

    def union(self, other):
        return SourceIndex(self.pairs | other.pairs)

    def issubset(self, other):
        return self.pairs <= other.pairs

    def __len__(self):
        return len(self.pairs)

    def __str__(self):
        return '{' + ', '.join(f'({addr},{ctx})' for addr, ctx in sorted(self.pairs, key=_pair_key)) + '}'


def _pair_key(pair):
    addr, ctx = pair
    return addr, str(ctx)


@dataclass(frozen=True)
class Value:
    interval: object
    uses: frozenset

    def __post_init__(self):
        if not self.uses:
            raise ValueError(f'value {self.interval} has no use')

    @property
    def si(self):
        return SourceIndex(self.uses)


@dataclass(frozen=True)
class Field:
    id: str
    si: SourceIndex
    values: tuple

    def intervals(self):
        return [value.interval for value in self.values]

    def value_bytes(self, data):
        return [data[value.interval.start:value.interval.end] for value in self.values]


@dataclass(frozen=True)
class FieldTrace:
    tuples: tuple


@dataclass(frozen=True)
class Partition:
    values: tuple
    fields: tuple

    def field_by_id(self, fid):
        for fld in self.fields:
            if fld.id == fid:
                return fld
        raise KeyError(fid)

    def field_of_interval(self):
        return {value.interval: fld.id for fld in self.fields for value in fld.values}


def extract_values(trace):
    """One Value per distinct taint interval, carrying every pair that used it."""
    uses = dict()
    for tup in trace.tuples:
        for itv in tup.taints:
            uses.setdefault(itv, set()).add(tup.use)
    return [Value(itv, frozenset(pairs)) for itv, pairs in sorted(uses.items(), key=lambda item: item[0].sort_key())]


def group_fields(values, prefix='F'):
    """Group values by their exact use set; ids follow the first value's (start, -length)."""
    groups = dict()
    for value in sorted(values, key=lambda v: v.interval.sort_key()):
        groups.setdefault(value.uses, []).append(value)
    ordered = sorted(groups.items(), key=lambda item: item[1][0].interval.sort_key())
    starts = [group[0].interval.start for _, group in ordered]
    if len(set(starts)) != len(starts):
        logger.warning('several fields first occur at the same offset; ordered by (start, -length)')
    return [Field(f'{prefix}{index}', SourceIndex(uses), tuple(group))
            for index, (uses, group) in enumerate(ordered)]


def field_sequence(fields, input_length):
    """Field ids of the tiling intervals in input order."""
    placed = sorted(((value.interval, fld.id) for fld in fields for value in fld.values),
                    key=lambda item: item[0].sort_key())
    cursor = 0
    sequence = []
    for itv, fid in placed:
        if itv.start > cursor:
            raise CoverageError(f'bytes [{cursor},{itv.start}) are not covered by any field')
        if itv.start < cursor:
            raise CoverageError(f'interval {itv} of {fid} overlaps the preceding field')
        sequence.append(fid)
        cursor = itv.end
    if cursor != input_length:
        raise CoverageError(f'bytes [{cursor},{input_length}) are not covered by any field')
    return sequence


def compute_new_si(fields):
    """Map field id to the union of the SIs of its transitively co-occurring fields."""
    uf = UnionFind([fld.id for fld in fields])
    owner = dict()
    for fld in fields:
        for pair in fld.si.pairs:
            if pair in owner:
                uf.union(owner[pair], fld.id)
            else:
                owner[pair] = fld.id
    by_id = {fld.id: fld for fld in fields}
    new_si = dict()
    for group in uf.to_sets():
        merged = frozenset().union(*(by_id[fid].si.pairs for fid in group))
        for fid in group:
            new_si[fid] = SourceIndex(merged)
    return new_si


def field_trace(trace, fields):
    field_of = {value.interval: fld.id for fld in fields for value in fld.values}
    return FieldTrace(tuple((tup.addr, tup.ctx, field_of[itv])
                            for tup in trace.tuples for itv in sorted(tup.taints, key=lambda i: i.sort_key())))


def partition(trace):
    values = extract_values(trace)
    fields = group_fields(values)
    logger.info(f'{len(values)} values grouped into {len(fields)} fields')
    return Partition(tuple(values), tuple(fields))


def fields_table(fields, input_bytes, preview_len=16):
    """Rows for the ``fields`` debug dump."""
    rows = []
    for fld in fields:
        first = fld.values[0].interval
        raw = input_bytes[first.start:first.end]
        rows.append(edict(id=fld.id, preview=raw[:preview_len].decode('latin-1').encode('unicode_escape').decode(),
                          n_values=len(fld.values), si_size=len(fld.si),
                          intervals=[str(itv) for itv in fld.intervals()]))
    return rows


def modules_report(fields):
    """Instructions handling each field."""
    return {fld.id: sorted(fld.si.instructions()) for fld in fields}
