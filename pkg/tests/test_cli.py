import json

import pytest

from taint_grammar.cli import main
from taint_grammar.trace_model import load_cfg

from test_structure_builder import SUM_CSV_GRAMMAR


@pytest.fixture
def traced(tmp_path, capsys):
    trace, cfg = tmp_path.joinpath('trace.json'), tmp_path.joinpath('cfg.json')
    assert main(['trace', '--program', 'sum_csv', '--out', str(trace), '--cfg', str(cfg)]) == 0
    assert 'sum_csv: accepted' in capsys.readouterr().out
    return trace, cfg


@pytest.fixture
def grammar_file(tmp_path):
    path = tmp_path.joinpath('grammar.txt')
    path.write_text(SUM_CSV_GRAMMAR)
    return path


def test_analyze(traced, tmp_path, capsys):
    trace, cfg = traced
    out_dir = tmp_path.joinpath('artifacts')
    assert main(['analyze', str(trace), str(cfg), '--out', str(out_dir)]) == 0
    assert capsys.readouterr().out == SUM_CSV_GRAMMAR
    assert out_dir.joinpath('grammar.txt').read_text() == SUM_CSV_GRAMMAR

    assert main(['--json', 'analyze', str(trace), str(cfg)]) == 0
    ast = json.loads(capsys.readouterr().out)
    assert ast['root']['id'] == 'S0'
    assert len(ast['relations']) == 3


def test_stage_commands(traced, capsys):
    trace, cfg = traced
    assert main(['--json', 'fields', str(trace)]) == 0
    assert json.loads(capsys.readouterr().out)['modules']['F3'] == ['I2', 'I7']

    assert main(['tig', str(trace)]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == 'selected: cut 1'

    assert main(['structure', str(trace)]) == 0
    out = capsys.readouterr().out
    assert 'array A0 { S1 }\n' in out and 'WHERE' not in out

    assert main(['icdg', str(cfg), '--trace', str(trace), '--project']) == 0
    assert 'main.elems -> main.escan' in capsys.readouterr().out.splitlines()

    assert main(['icdg', str(cfg), '--dot']) == 0
    assert 'digraph' in capsys.readouterr().out

    assert main(['structure', str(trace), '--json']) == 0
    assert json.loads(capsys.readouterr().out)['root']['id'] == 'S0'

    assert main(['tig', str(trace), '--new-si', '--json']) == 0
    assert 'frontiers' in json.loads(capsys.readouterr().out)


def test_generate(grammar_file, tmp_path, capsys):
    assert main(['generate', str(grammar_file), '-n', '3', '--seed', '1']) == 0
    first = capsys.readouterr().out.split()
    assert len(first) == 3
    assert main(['generate', str(grammar_file), '-n', '3', '--seed', '1']) == 0
    assert capsys.readouterr().out.split() == first
    out_dir = tmp_path.joinpath('samples')
    assert main(['generate', str(grammar_file), '-n', '2', '--out-dir', str(out_dir)]) == 0
    assert sorted(path.name for path in out_dir.iterdir()) == ['sample_00000.bin', 'sample_00001.bin']


def test_accept(grammar_file, capsys):
    assert main(['accept', str(grammar_file), '--program', 'sum_csv', '-n', '20']) == 0
    assert 'generated=20 accepted=20' in capsys.readouterr().out


def test_suite(capsys):
    assert main(['suite', 'csv', '-n', '10']) == 0
    line = capsys.readouterr().out.splitlines()[0]
    assert line.startswith('csv') and '10/10' in line


def test_errors_return_one(tmp_path, capsys):
    assert main(['analyze', str(tmp_path.joinpath('missing.json')), str(tmp_path.joinpath('cfg.json'))]) == 1
    assert 'error [load]' in capsys.readouterr().err
    assert main(['accept', str(tmp_path.joinpath('none.txt')), '--program', 'sum_csv']) == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(['--version'])
    assert excinfo.value.code == 0


def test_control_data_and_chains(traced, capsys):
    trace, cfg = traced
    block = load_cfg(cfg).block_of
    assert main(['icdg', str(cfg), '--trace', str(trace), '--control-data', '--json']) == 0
    report = json.loads(capsys.readouterr().out)
    assert {block('I2'), block('I3'), block('I6'), block('I7')} <= set(report)
    assert all(report.values())

    assert main(['icdg', str(cfg), '--trace', str(trace), '--chains', block('I7'), '--json']) == 0
    assert json.loads(capsys.readouterr().out) == [[block('I7'), block('I2')],
                                                   [block('I7'), block('I6'), block('I2')]]
    assert main(['icdg', str(cfg), '--trace', str(trace), '--chains', block('I7')]) == 0
    assert f'{block("I7")} <- {block("I2")}' in capsys.readouterr().out.splitlines()

    assert main(['icdg', str(cfg), '--control-data']) == 1
    assert '--trace' in capsys.readouterr().err
    assert main(['icdg', str(cfg), '--trace', str(trace), '--chains', 'nowhere']) == 1


def test_option_spellings(grammar_file, tmp_path, capsys):
    out_dir = tmp_path.joinpath('samples')
    assert main(['generate', '--grammar', str(grammar_file), '--n', '3', '--out', str(out_dir)]) == 0
    assert len(list(out_dir.iterdir())) == 3
    assert main(['accept', '--program', 'sum_csv', '--grammar', str(grammar_file), '--n', '5', '--json']) == 0
    report = json.loads(capsys.readouterr().out)
    assert report['generated'] == 5 and report['accepted'] == 5
    assert main(['generate', '-n', '1']) == 1
