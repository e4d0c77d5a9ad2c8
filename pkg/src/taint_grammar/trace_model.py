"""Taint trace and CFG package types, with their JSON loaders and dumpers.

Trace document::

    {"input_len": 10, "input_b64": "...",
     "tuples": [{"i": "I2", "c": ["main.3"], "t": [[0, 1]]}, ...]}

CFG document::

    {"functions": [{"id": "main", "entry": "main.b0"}],
     "blocks": [{"id": "main.b0", "insns": ["main.0", "I2"]}],
     "edges": [["main.b0", "main.b1"]],
     "calls": [{"site": "main.7", "callee": "helper"}],
     "exits": {"main": ["main.b9"]}}
"""
import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx

from taint_grammar import utils
from taint_grammar.utils import TraceFormatError, TraceValidationError, CfgError

logger = utils.set_logger(utils.get_module_name(__file__))


@dataclass(frozen=True, order=True)
class ByteInterval:
    """Half open byte range [start, end) of the input."""
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise TraceValidationError(f'invalid interval [{self.start}, {self.end})')

    @property
    def length(self):
        return self.end - self.start

    def contains(self, other):
        return self.start <= other.start and other.end <= self.end

    def overlaps(self, other):
        return self.start < other.end and other.start < self.end

    def sort_key(self):
        """Start ascending, then longest first."""
        return self.start, -self.length

    def __str__(self):
        return f'[{self.start},{self.end})'


@dataclass(frozen=True)
class CallingContext:
    """Call-site identifiers, outermost first, truncated at recursion."""
    frames: tuple = ()

    def __post_init__(self):
        if len(set(self.frames)) != len(self.frames):
            raise TraceValidationError(f'calling context repeats a call site: {list(self.frames)}')

    def __str__(self):
        return '/'.join(self.frames) if self.frames else '-'


@dataclass(frozen=True)
class TraceTuple:
    addr: str
    ctx: CallingContext
    taints: frozenset

    @property
    def use(self):
        return self.addr, self.ctx


@dataclass(frozen=True)
class TaintTrace:
    input_length: int
    input_bytes: bytes
    tuples: tuple

    def to_dict(self):
        return dict(input_len=self.input_length,
                    input_b64=base64.b64encode(self.input_bytes).decode('ascii'),
                    tuples=[dict(i=tup.addr, c=list(tup.ctx.frames),
                                 t=[[itv.start, itv.end] for itv in sorted(tup.taints)])
                            for tup in self.tuples])

    @classmethod
    def from_dict(cls, doc):
        try:
            input_bytes = base64.b64decode(doc['input_b64'], validate=True)
            tuples = tuple(TraceTuple(str(tup['i']), CallingContext(tuple(str(frame) for frame in tup['c'])),
                                      frozenset(ByteInterval(int(start), int(end)) for start, end in tup['t']))
                           for tup in doc['tuples'])
            return cls(int(doc['input_len']), input_bytes, tuples)
        except TraceValidationError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise TraceFormatError(f'malformed trace document: {e!r}') from e

    def instructions(self):
        return {tup.addr for tup in self.tuples}


def validate_trace(trace):
    """Raise TraceValidationError unless every tuple is non-empty and within bounds."""
    if trace.input_length != len(trace.input_bytes):
        raise TraceValidationError(f'input_len {trace.input_length} does not match '
                                   f'{len(trace.input_bytes)} embedded bytes')
    if not trace.tuples:
        raise TraceValidationError('trace has no tuples')
    for index, tup in enumerate(trace.tuples):
        if not tup.taints:
            raise TraceValidationError(f'tuple {index} ({tup.addr}) has no taint interval')
        for itv in tup.taints:
            if itv.end > trace.input_length:
                raise TraceValidationError(f'tuple {index} ({tup.addr}): interval {itv} exceeds '
                                           f'input length {trace.input_length}')
    return trace


def _read_json(path):
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise TraceFormatError(f'{path}: {e}') from e


def load_trace(path):
    trace = TaintTrace.from_dict(_read_json(path))
    validate_trace(trace)
    logger.debug(f'loaded trace {path}: {trace.input_length} bytes, {len(trace.tuples)} tuples')
    return trace


def dump_trace(trace, path):
    with open(path, 'w') as f:
        json.dump(trace.to_dict(), f, indent=1)
    return Path(path)


@dataclass(frozen=True)
class CfgPackage:
    """Per-function CFGs of a program plus its call edges.

    ``blocks`` maps block id to its ordered instruction ids. Block to function
    membership is derived by reachability from each function entry.
    """
    functions: tuple
    blocks: dict
    intra_edges: tuple
    call_edges: tuple
    exits: dict
    insn_block: dict = field(init=False, repr=False, compare=False)
    block_function: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        insn_block = dict()
        for block, insns in self.blocks.items():
            for insn in insns:
                if insn in insn_block:
                    raise CfgError(f'instruction {insn} belongs to blocks {insn_block[insn]} and {block}')
                insn_block[insn] = block
        for src, dst in self.intra_edges:
            for block in (src, dst):
                if block not in self.blocks:
                    raise CfgError(f'edge {src}->{dst} names unknown block {block}')
        fn_ids = {fn for fn, _ in self.functions}
        for fn, entry in self.functions:
            if entry is None or entry not in self.blocks:
                raise CfgError(f'function {fn} has no entry block')
        for site, callee in self.call_edges:
            if site not in insn_block:
                raise CfgError(f'call site {site} is not an instruction of any block')
            if callee not in fn_ids:
                raise CfgError(f'call site {site} targets unknown function {callee}')
        for fn, blocks in self.exits.items():
            if fn not in fn_ids:
                raise CfgError(f'exits given for unknown function {fn}')
            for block in blocks:
                if block not in self.blocks:
                    raise CfgError(f'exit block {block} of {fn} is unknown')

        graph = self.graph()
        block_function = dict()
        for fn, entry in self.functions:
            for block in {entry} | nx.descendants(graph, entry):
                if block in block_function and block_function[block] != fn:
                    raise CfgError(f'block {block} is reachable from both {block_function[block]} and {fn}')
                block_function[block] = fn
        for block in self.blocks:
            if block not in block_function:
                logger.debug(f'block {block} is unreachable from every function entry')
        object.__setattr__(self, 'insn_block', insn_block)
        object.__setattr__(self, 'block_function', block_function)

    def graph(self):
        graph = nx.DiGraph()
        graph.add_nodes_from(self.blocks)
        graph.add_edges_from(self.intra_edges)
        return graph

    def entry_of(self, fn):
        return dict(self.functions)[fn]

    def function_of(self, block):
        return self.block_function.get(block)

    def block_of(self, insn):
        return self.insn_block.get(insn)

    def blocks_of(self, fn):
        return [block for block in self.blocks if self.block_function.get(block) == fn]

    def successors(self, block):
        return [dst for src, dst in self.intra_edges if src == block]

    def to_dict(self):
        return dict(functions=[dict(id=fn, entry=entry) for fn, entry in self.functions],
                    blocks=[dict(id=block, insns=list(insns)) for block, insns in self.blocks.items()],
                    edges=[[src, dst] for src, dst in self.intra_edges],
                    calls=[dict(site=site, callee=callee) for site, callee in self.call_edges],
                    exits={fn: list(blocks) for fn, blocks in self.exits.items()})

    @classmethod
    def from_dict(cls, doc):
        try:
            functions = tuple((str(fn['id']), fn.get('entry')) for fn in doc['functions'])
            blocks = {str(block['id']): tuple(str(insn) for insn in block['insns']) for block in doc['blocks']}
            edges = tuple((str(src), str(dst)) for src, dst in doc.get('edges', []))
            calls = tuple((str(call['site']), str(call['callee'])) for call in doc.get('calls', []))
            exits = {str(fn): tuple(str(block) for block in blocks_)
                     for fn, blocks_ in doc.get('exits', {}).items()}
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise TraceFormatError(f'malformed cfg document: {e!r}') from e
        return cls(functions, blocks, edges, calls, exits)


def load_cfg(path):
    cfg = CfgPackage.from_dict(_read_json(path))
    logger.debug(f'loaded cfg {path}: {len(cfg.functions)} functions, {len(cfg.blocks)} blocks')
    return cfg


def dump_cfg(cfg, path):
    with open(path, 'w') as f:
        json.dump(cfg.to_dict(), f, indent=1)
    return Path(path)
