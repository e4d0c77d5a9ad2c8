import json

import numpy as np
import pytest

from taint_grammar import generator, pipeline
from taint_grammar.config import load_config
from taint_grammar.generator import self_check
from taint_grammar.semantics import parse_relation, evaluate, check_terminators
from taint_grammar.trace_model import ByteInterval, CallingContext, TraceTuple, TaintTrace, CfgPackage
from taint_grammar.utils import StageError, TraceValidationError
from taint_grammar.vm import programs

from test_structure_builder import SUM_CSV_GRAMMAR

TOP = CallingContext()
CONTRAST = ('csv_array', 'bmp_csv', 'pe', 'png2')


def key(rel):
    return rel.kind, rel.target, frozenset(rel.sources), rel.adjust, rel.tags


def synthetic(count, rng):
    """A count header followed by ``count`` key/value records, traced as two loop uses."""
    records = rng.integers(0, 256, size=(count, 8), dtype=np.uint8)
    data = count.to_bytes(4, 'little') + records.tobytes()
    header = frozenset({ByteInterval(0, 4)})
    keys = frozenset(ByteInterval(4 + 8 * index, 8 + 8 * index) for index in range(count))
    vals = frozenset(ByteInterval(8 + 8 * index, 12 + 8 * index) for index in range(count))
    trace = TaintTrace(len(data), data, (TraceTuple('H0', TOP, header), TraceTuple('H1', TOP, header),
                                         TraceTuple('R1', TOP, keys), TraceTuple('R2', TOP, vals)))
    cfg = CfgPackage((('main', 'main.b0'),),
                     {'main.b0': ('H0',), 'main.loop': ('H1',), 'main.body': ('R1', 'R2'), 'main.done': ('main.9',)},
                     (('main.b0', 'main.loop'), ('main.loop', 'main.body'), ('main.body', 'main.loop'),
                      ('main.loop', 'main.done')),
                     (), {'main': ('main.done',)})
    return trace, cfg


def test_sum_csv_end_to_end(sum_csv):
    assert sum_csv.grammar == SUM_CSV_GRAMMAR
    assert sum_csv.frontier.depth == 1
    assert sum_csv.timer.total() < 1.


def test_bmp_relations(analyses):
    relations = {key(rel) for rel in analyses['bmp'].relations}
    assert relations == {('offset', 'A0', frozenset({'F3'}), 0, ()),
                         ('product', 'A0', frozenset({'F5', 'F6'}), 0, ())}
    assert analyses['bmp'].doc.is_gap('F10')


@pytest.mark.parametrize('name', programs.available())
def test_expected_relations_are_mined(name, analyses):
    mined = {key(rel) for rel in analyses[name].relations}
    expected = {key(parse_relation(text)) for text in programs.load(name).expected}
    assert expected and expected <= mined


@pytest.mark.parametrize('name', programs.available())
def test_mined_relations_hold_on_the_witness(name, analyses):
    result = analyses[name]
    assert all(evaluate(rel, result.view) for rel in result.relations)
    assert check_terminators(result.view, result.relations)


@pytest.mark.parametrize('name', programs.SUITE)
def test_suite_acceptance(name, config):
    report = pipeline.end_to_end(name, config, samples=100).report
    assert report.generated == 100
    assert report.ratio == 100.


@pytest.mark.slow
def test_suite_acceptance_at_full_size(config):
    for name in programs.SUITE:
        report = pipeline.end_to_end(name, config).report
        assert report.generated == 1000 and report.ratio == 100., name


@pytest.mark.parametrize('name', CONTRAST)
def test_stripped_relations_lose_acceptance(name, config):
    report = pipeline.end_to_end(name, config, samples=100, strip=True).report
    assert report.ratio < 20.


def test_bad_trace_fails_in_partition(witness_runs, config):
    with pytest.raises(StageError) as excinfo:
        pipeline.analyze(TaintTrace(3, b'abc', ()), witness_runs['sum_csv'].cfg, config)
    assert excinfo.value.stage == 'partition'
    assert isinstance(excinfo.value.__cause__, TraceValidationError)


def test_write_artifacts(tmp_path, witness_runs, sum_csv):
    run = witness_runs['sum_csv']
    paths = pipeline.write_artifacts(sum_csv, tmp_path, run.trace, run.cfg)
    assert paths.grammar.read_text() == SUM_CSV_GRAMMAR
    reloaded = pipeline.analyze_paths(paths.trace, paths.cfg)
    assert reloaded.grammar == SUM_CSV_GRAMMAR
    assert list(reloaded.timer.timings)[:2] == ['load', 'partition']
    assert reloaded.timer.parents['load'] is None
    for name in ('fields', 'tig', 'frontiers', 'icdg', 'control_data', 'ast'):
        assert paths[name].exists()
    frontiers = json.loads(paths.frontiers.read_text())
    assert frontiers['selected'] == 1 and frontiers['si'] and frontiers['new_si']
    control = json.loads(paths.control_data.read_text())
    assert control['branches'] == sum_csv.control_data
    assert set(control['chains']) == set(sum_csv.projection.nodes)


def test_report_timings(sum_csv):
    report = pipeline.report_timings(sum_csv.timer)
    assert [row.stage for row in report.rows] == list(pipeline.STAGES)
    parents = {row.stage: row.parent for row in report.rows}
    assert parents['tig'] == 'partition'
    assert [stage for stage, parent in parents.items() if parent is None] == \
        ['partition', 'structure', 'icdg', 'semantics', 'render']
    assert report.dominant in pipeline.STAGES and report.dominant != 'tig'
    assert abs(sum(row.share for row in report.rows if row.parent is None) - 1.) < 1e-6
    assert sum_csv.timer.timings.tig <= sum_csv.timer.timings.partition


def test_synthetic_records(rng, config):
    trace, cfg = synthetic(2000, rng)
    result = pipeline.analyze(trace, cfg, config)
    assert 'A0.count = int(F0.bytes)' in {rel.render() for rel in result.relations}
    assert result.doc.sequence[:3] == ['F0', 'F1', 'F2']
    assert pipeline.report_timings(result.timer).dominant in pipeline.STAGES


@pytest.mark.slow
def test_three_megabytes_within_a_minute(rng, config):
    trace, cfg = synthetic(3 * 2 ** 20 // 8, rng)
    result = pipeline.analyze(trace, cfg, config)
    assert 'A0.count = int(F0.bytes)' in {rel.render() for rel in result.relations}
    report = pipeline.report_timings(result.timer)
    assert report.dominant == 'partition'
    assert report.total < 60.


def test_end_to_end_times_every_step(config):
    run = pipeline.end_to_end('sum_csv', config, samples=5)
    stages = list(run.timer.timings)
    assert stages[0] == 'trace' and stages[-1] == 'generate'
    assert set(pipeline.STAGES) <= set(stages)
    assert run.timer.dominant() != 'tig'


def test_generated_inputs_are_reparsed(config, monkeypatch):
    calls = []

    def counting(doc, data, budget=200000):
        calls.append(data)
        return self_check(doc, data, budget)

    monkeypatch.setattr(generator, 'self_check', counting)
    assert pipeline.end_to_end('sum_csv', config, samples=5).report.ratio == 100.
    assert len(calls) >= 5
    calls.clear()
    plain = load_config(overrides=dict(generator=dict(reparse=False)))
    assert pipeline.end_to_end('sum_csv', plain, samples=5).report.generated == 5
    assert calls == []


def test_new_si_frontiers(sum_csv):
    assert sum_csv.frontier_map_new.cuts
    assert sum_csv.frontier.depth in {frontier.depth for frontier in sum_csv.frontier_map.cuts}
