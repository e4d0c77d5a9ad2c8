import pytest

from taint_grammar.field_partition import (SourceIndex, Value, Field, group_fields, field_sequence, compute_new_si,
                                           partition, fields_table, modules_report, field_trace)
from taint_grammar.trace_model import ByteInterval, CallingContext
from taint_grammar.utils import CoverageError

TOP = CallingContext()


def use(*addrs):
    return frozenset((addr, TOP) for addr in addrs)


def si(*addrs):
    return SourceIndex(use(*addrs))


def test_sum_csv_fields(witness_runs):
    part = partition(witness_runs['sum_csv'].trace)
    assert len(part.values) == 10
    table = {fld.id: (fld.si.instructions(), [str(itv) for itv in fld.intervals()]) for fld in part.fields}
    assert table == {
        'F0': ({'I2', 'I3', 'I4', 'I6', 'I8'}, ['[0,1)']),
        'F1': ({'I2', 'I3'}, ['[1,2)']),
        'F2': ({'I2', 'I7', 'I9', 'I10'}, ['[2,3)', '[4,5)', '[6,7)', '[8,9)']),
        'F3': ({'I2', 'I7'}, ['[3,4)', '[5,6)', '[7,8)']),
        'F4': ({'I2'}, ['[9,10)']),
    }
    assert field_sequence(part.fields, 10) == ['F0', 'F1', 'F2', 'F3', 'F2', 'F3', 'F2', 'F3', 'F2', 'F4']


def test_same_field_iff_same_uses(prng):
    pool = [f'I{index}' for index in range(5)]
    for _ in range(200):
        values = []
        cursor = 0
        for _ in range(prng.randint(1, 30)):
            length = prng.randint(1, 3)
            values.append(Value(ByteInterval(cursor, cursor + length), use(*prng.sample(pool, prng.randint(1, 3)))))
            cursor += length
        fields = group_fields(values)
        field_of = {value.interval: fld.id for fld in fields for value in fld.values}
        for a in values:
            for b in values:
                assert (field_of[a.interval] == field_of[b.interval]) == (a.uses == b.uses)
        assert sum(len(fld.values) for fld in fields) == len(values)


def test_field_ids_follow_first_occurrence():
    values = [Value(ByteInterval(4, 6), use('b')), Value(ByteInterval(0, 2), use('a')),
              Value(ByteInterval(2, 4), use('b'))]
    fields = group_fields(values)
    assert [fld.id for fld in fields] == ['F0', 'F1']
    assert fields[0].si == si('a')
    assert fields[1].intervals() == [ByteInterval(2, 4), ByteInterval(4, 6)]


def test_field_sequence_coverage():
    fields = [Field('F0', si('a'), (Value(ByteInterval(0, 2), use('a')),)),
              Field('F1', si('b'), (Value(ByteInterval(3, 4), use('b')),))]
    with pytest.raises(CoverageError):
        field_sequence(fields, 4)
    with pytest.raises(CoverageError):
        field_sequence(fields[:1], 4)


def test_new_si_is_transitive():
    fields = [Field('F0', si('a', 'b'), ()), Field('F1', si('b', 'c'), ()), Field('F2', si('c', 'd'), ()),
              Field('F3', si('e'), ())]
    new_si = compute_new_si(fields)
    assert new_si['F0'] == new_si['F1'] == new_si['F2'] == si('a', 'b', 'c', 'd')
    assert new_si['F3'] == si('e')


def test_source_index():
    assert si('a').issubset(si('a', 'b'))
    assert si('a', 'b').intersects(si('b'))
    assert si('a').union(si('b')) == si('a', 'b')
    with pytest.raises(ValueError):
        SourceIndex(frozenset())


def test_reports(witness_runs):
    trace = witness_runs['sum_csv'].trace
    part = partition(trace)
    rows = fields_table(part.fields, trace.input_bytes)
    assert [row.id for row in rows] == ['F0', 'F1', 'F2', 'F3', 'F4']
    assert rows[2].n_values == 4 and rows[2].si_size == 4
    assert rows[4].preview == '\\n'
    assert modules_report(part.fields)['F3'] == ['I2', 'I7']
    assert {fid for _, _, fid in field_trace(trace, part.fields).tuples} == {'F0', 'F1', 'F2', 'F3', 'F4'}
