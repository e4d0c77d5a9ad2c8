"""Interprocedural control dependence over basic blocks, field annotation and projection."""
from dataclasses import dataclass, field

import networkx as nx
from networkx.drawing import nx_pydot

from taint_grammar import utils
from taint_grammar.utils import CfgError

logger = utils.set_logger(utils.get_module_name(__file__))

VIRTUAL_EXIT = '__exit__'


@dataclass
class Icdg:
    graph: nx.DiGraph
    annotations: dict = field(default_factory=dict)
    field_insns: dict = field(default_factory=dict)

    @property
    def nodes(self):
        return list(self.graph.nodes)

    @property
    def edges(self):
        return list(self.graph.edges)

    def guards(self, block):
        return set(self.graph.predecessors(block))


@dataclass
class ProjectedGraph:
    graph: nx.DiGraph
    annotations: dict

    @property
    def nodes(self):
        return list(self.graph.nodes)

    @property
    def edges(self):
        return list(self.graph.edges)


@dataclass(frozen=True)
class DependenceChain:
    blocks: tuple


def function_cfg(cfg, fn):
    """The function's CFG with a virtual exit joined from every exit block."""
    blocks = cfg.blocks_of(fn)
    graph = cfg.graph().subgraph(blocks).copy()
    exits = cfg.exits.get(fn, ())
    if not exits:
        raise CfgError(f'function {fn} has no exit block')
    graph.add_node(VIRTUAL_EXIT)
    graph.add_edges_from((block, VIRTUAL_EXIT) for block in exits if block in graph)
    return graph


def intraprocedural_cd(graph):
    """Control dependence edges (guard, dependent) from post-dominance frontiers."""
    reverse = graph.reverse(copy=True)
    stuck = set(graph.nodes) - nx.ancestors(graph, VIRTUAL_EXIT) - {VIRTUAL_EXIT}
    for block in sorted(stuck):
        logger.warning(f'block {block} cannot reach an exit; it gets no control dependence')
    frontiers = nx.dominance_frontiers(reverse, VIRTUAL_EXIT)
    return {(guard, block) for block, guards in frontiers.items() if block != VIRTUAL_EXIT
            for guard in guards if guard != VIRTUAL_EXIT}


def compute_icdg(cfg):
    """Block-level control dependence; a callee block with no guard of its own inherits its call sites' guards."""
    graph = nx.DiGraph()
    graph.add_nodes_from(cfg.blocks)
    intra = set()
    for fn, _ in cfg.functions:
        edges = intraprocedural_cd(function_cfg(cfg, fn))
        intra |= edges
        graph.add_edges_from(edges)
    unguarded = {block for block in cfg.blocks if not any(dep == block for _, dep in intra)}

    changed = True
    while changed:
        changed = False
        for site, callee in cfg.call_edges:
            site_guards = set(graph.predecessors(cfg.block_of(site)))
            for block in cfg.blocks_of(callee):
                if block not in unguarded:
                    continue
                missing = site_guards - set(graph.predecessors(block))
                if missing:
                    graph.add_edges_from((guard, block) for guard in missing)
                    changed = True
    logger.debug(f'icdg: {graph.number_of_nodes()} blocks, {graph.number_of_edges()} edges')
    return Icdg(graph)


def annotate(icdg, fields, cfg):
    """Attach to each block the fields whose SI instructions lie in it (contexts ignored)."""
    annotations = {block: set() for block in icdg.graph.nodes}
    field_insns = dict()
    for fld in fields:
        if fld.si is None:
            continue
        field_insns[fld.id] = fld.si.instructions()
        blocks = set()
        for insn in fld.si.instructions():
            block = cfg.block_of(insn)
            if block is None:
                logger.warning(f'instruction {insn} of {fld.id} is not in the cfg')
                continue
            blocks.add(block)
        if not blocks:
            logger.warning(f'field {fld.id} annotates no block')
        for block in blocks:
            annotations[block].add(fld.id)
    return Icdg(icdg.graph, {block: fids for block, fids in annotations.items() if fids}, field_insns)


def project_graph(icdg):
    """Edges between annotated blocks connected by a direct or transitive dependence path."""
    projected = nx.DiGraph()
    annotated = set(icdg.annotations)
    projected.add_nodes_from(sorted(annotated))
    for node in sorted(annotated):
        visited = {node}
        stack = [node]
        while stack:
            current = stack.pop()
            for succ in icdg.graph.successors(current):
                if succ in visited:
                    continue
                visited.add(succ)
                stack.append(succ)
                if succ in annotated and succ != node:
                    projected.add_edge(node, succ)
    return ProjectedGraph(projected, dict(icdg.annotations))


def dependence_chains(pg, block):
    """Maximal chains from ``block`` back through its guards."""
    chains = []

    def walk(path):
        guards = [guard for guard in sorted(pg.graph.predecessors(path[-1])) if guard not in path]
        if not guards:
            if len(path) > 1:
                chains.append(DependenceChain(tuple(path)))
            return
        for guard in guards:
            walk(path + [guard])

    walk([block])
    return chains


def control_data(icdg, cfg):
    """Fields used by the branching instruction of every block with two or more successors."""
    report = dict()
    for block, insns in cfg.blocks.items():
        if len(cfg.successors(block)) < 2 or not insns:
            continue
        fids = sorted(fid for fid in icdg.annotations.get(block, ()) if insns[-1] in icdg.field_insns.get(fid, ()))
        if fids:
            report[block] = fids
    return report


def to_dot(graph, annotations=None):
    annotations = annotations or dict()
    labelled = nx.DiGraph()
    for node in graph.nodes:
        fids = ' '.join(sorted(annotations.get(node, ())))
        labelled.add_node(f'"{node}"', label=f'"{node} {{{fids}}}"' if fids else f'"{node}"')
    labelled.add_edges_from((f'"{src}"', f'"{dst}"') for src, dst in graph.edges)
    return nx_pydot.to_pydot(labelled).to_string()
