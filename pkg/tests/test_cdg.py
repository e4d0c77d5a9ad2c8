import networkx as nx
import pytest

from taint_grammar import cdg
from taint_grammar.cdg import VIRTUAL_EXIT
from taint_grammar.trace_model import CfgPackage
from taint_grammar.utils import CfgError


def postdominates(graph, y, x):
    """True if every path from ``x`` to the exit passes through ``y``."""
    if x == y:
        return True
    pruned = graph.copy()
    pruned.remove_node(y)
    return not nx.has_path(pruned, x, VIRTUAL_EXIT)


def brute_force_cd(graph):
    blocks = [node for node in graph.nodes if node != VIRTUAL_EXIT]
    edges = set()
    for x in blocks:
        for y in blocks:
            strictly = y != x and postdominates(graph, y, x)
            if not strictly and any(postdominates(graph, y, succ) for succ in graph.successors(x)
                                    if succ != VIRTUAL_EXIT):
                edges.add((x, y))
    return edges


def random_cfg(prng):
    size = prng.randint(2, 12)
    graph = nx.DiGraph()
    graph.add_edges_from((f'b{index}', f'b{index + 1}') for index in range(size - 1))
    graph.add_edge(f'b{size - 1}', VIRTUAL_EXIT)
    for _ in range(prng.randint(0, 2 * size)):
        src, dst = prng.randrange(size), prng.randrange(size)
        if src != dst:
            graph.add_edge(f'b{src}', f'b{dst}')
    if prng.random() < .3:
        graph.add_edge(f'b{prng.randrange(size)}', VIRTUAL_EXIT)
    return graph


def test_intraprocedural_matches_postdominance(prng):
    for _ in range(200):
        graph = random_cfg(prng)
        assert cdg.intraprocedural_cd(graph) == brute_force_cd(graph)


def test_two_block_cycle():
    graph = nx.DiGraph([('a', 'b'), ('b', 'a'), ('b', VIRTUAL_EXIT)])
    assert cdg.intraprocedural_cd(graph) == {('b', 'a'), ('b', 'b')}


def test_sum_csv_icdg(witness_runs, sum_csv):
    cfg = witness_runs['sum_csv'].cfg
    icdg = sum_csv.icdg
    block = cfg.block_of
    line_guard = set(icdg.graph.successors(block('I2')))
    assert {block('I3'), block('I4'), block('I6'), block('I8'), block('I10'), 'main.next_line'} <= line_guard
    assert block('I4') == block('I5')
    assert block('I7') not in line_guard and block('I9') not in line_guard
    assert set(icdg.graph.successors(block('I6'))) == {block('I6'), block('I7'), 'main.elem', 'main.eend'}
    assert set(icdg.graph.successors(block('I8'))) == {block('I9')}
    assert block('I2') in icdg.guards(block('I8'))


def test_sum_csv_annotations(witness_runs, sum_csv):
    cfg = witness_runs['sum_csv'].cfg
    annotations = sum_csv.icdg.annotations
    assert annotations[cfg.block_of('I6')] == {'F0'}
    assert annotations[cfg.block_of('I7')] == {'F2', 'F3'}
    assert annotations[cfg.block_of('I2')] == {'F0', 'F1', 'F2', 'F3', 'F4'}
    assert 'main.b0' not in annotations


def test_sum_csv_projection(witness_runs, sum_csv):
    block = witness_runs['sum_csv'].cfg.block_of
    pg = sum_csv.projection
    assert set(pg.nodes) == set(sum_csv.icdg.annotations)
    assert (block('I2'), block('I7')) in pg.edges
    assert (block('I6'), block('I7')) in pg.edges
    assert (block('I8'), block('I9')) in pg.edges
    assert not any(src == dst for src, dst in pg.edges)
    chains = cdg.dependence_chains(pg, block('I7'))
    assert [chain.blocks for chain in chains] == [(block('I7'), block('I2')),
                                                   (block('I7'), block('I6'), block('I2'))]


def test_control_data(witness_runs, sum_csv):
    cfg = witness_runs['sum_csv'].cfg
    report = cdg.control_data(sum_csv.icdg, cfg)
    assert report[cfg.block_of('I2')] == ['F0', 'F1', 'F2', 'F3', 'F4']
    assert report[cfg.block_of('I3')] == ['F0', 'F1']
    assert report[cfg.block_of('I6')] == ['F0']
    assert report[cfg.block_of('I7')] == ['F2', 'F3']


def test_callee_inherits_call_site_guards():
    cfg = CfgPackage((('main', 'main.b0'), ('helper', 'helper.b0')),
                     {'main.b0': ('m0',), 'main.b1': ('c',), 'main.b2': ('m2',), 'helper.b0': ('h0',)},
                     (('main.b0', 'main.b1'), ('main.b0', 'main.b2'), ('main.b1', 'main.b2')),
                     (('c', 'helper'),), {'main': ('main.b2',), 'helper': ('helper.b0',)})
    icdg = cdg.compute_icdg(cfg)
    assert ('main.b0', 'main.b1') in icdg.edges
    assert ('main.b0', 'helper.b0') in icdg.edges
    assert icdg.guards('main.b2') == set()


def test_function_without_exit():
    cfg = CfgPackage((('main', 'main.b0'),), {'main.b0': ('m0',), 'main.b1': ('m1',)},
                     (('main.b0', 'main.b1'), ('main.b1', 'main.b0')), (), {})
    with pytest.raises(CfgError):
        cdg.compute_icdg(cfg)


def test_dot_export(sum_csv):
    text = cdg.to_dot(sum_csv.icdg.graph, sum_csv.icdg.annotations)
    assert 'digraph' in text
    assert '{F2 F3}' in text
