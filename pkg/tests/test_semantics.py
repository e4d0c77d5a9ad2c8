import pytest

from taint_grammar.semantics import (COUNT, OFFSET, SIZE, TERMINATOR, PRODUCT, MODULUS, RECORD_TYPE, BROADCAST, ZIP,
                                     Relation, SemanticDependence, Occurrence, FieldView, parse_relation,
                                     parse_constraints, evaluate, int_value, mine_relations, attach, strip_relations,
                                     check_terminators, infer_align, _record_types)
from taint_grammar.tokens import Token, Unit
from taint_grammar.utils import DanglingPathError

FORMS = [
    'F4.size = int(F3.bytes)',
    'A0.count = int(F0.bytes) - 1',
    'A0.offset = int(F3.bytes)',
    'A0.count % int(F5.bytes) = 0',
    'A0.count = int(F5.bytes) * int(F6.bytes)',
    'F2.terminator = F3.bytes',
    'A0.record_type = F1.bytes IN (0x01, 0x02)',
]


def renders(relations):
    return {rel.render() for rel in relations}


def test_sum_csv_relations(sum_csv):
    assert renders(sum_csv.relations) == {'A0.count = int(F0.bytes) - 1', 'F2.terminator = F3.bytes',
                                          'F2.terminator = F4.bytes'}
    assert not any(rel.exhaustive for rel in sum_csv.relations)
    assert SemanticDependence('F0', 'A0') in sum_csv.dependences
    assert check_terminators(sum_csv.view, sum_csv.relations)


@pytest.mark.parametrize('text', FORMS)
def test_relation_text(text):
    assert parse_relation(text).render() == text


def test_parsed_relations():
    assert parse_relation('A0.count = int(F5.bytes) * int(F6.bytes)').sources == ('F5', 'F6')
    assert parse_relation('A0.record_type = F1.bytes IN (0x01, 0x02)').tags == (b'\x01', b'\x02')
    assert parse_relation('A0.count = int(F0.bytes) + 1').adjust == 1
    assert [rel.source for rel in parse_constraints('F2.terminator = F3.bytes OR F2.terminator = F4.bytes')] == \
        ['F3', 'F4']
    with pytest.raises(ValueError):
        parse_relation('A0.count == 3')


def test_relation_checks():
    with pytest.raises(ValueError):
        Relation('length', 'A0', ('F0',))
    with pytest.raises(ValueError):
        Relation(COUNT, 'A0', ('F0', 'F1'))
    with pytest.raises(ValueError):
        Relation(COUNT, 'A0', ('F0',), adjust=2)
    assert Relation(PRODUCT, 'A0', ('F0', 'F1')).align == (BROADCAST, BROADCAST)
    rel = Relation(COUNT, 'A0', ('F0',), -1, exhaustive=True)
    assert Relation.from_dict(rel.to_dict()) == rel


def test_int_value():
    digits = Token((Unit('DIGIT'),), plus=True)
    assert int_value(b'12', digits) == 12
    assert int_value(b'\x01\x02', None) == 513
    with pytest.raises(ValueError):
        int_value(b'', None)
    with pytest.raises(ValueError):
        int_value(b'1a', digits)


def small_view():
    # "2ab\n": count byte, two elements, terminator
    occurrences = dict(F0=[Occurrence(0, 1)], A0=[Occurrence(1, 3, count=2)],
                       F1=[Occurrence(1, 2), Occurrence(2, 3)], F2=[Occurrence(3, 4)])
    tokens = dict(F0=Token((Unit('DIGIT'),)), F1=Token((Unit('LOWER'),)), F2=Token((Unit(0x0A),)))
    return FieldView(b'2ab\n', occurrences, tokens, dict(A0='F1'))


def test_evaluate():
    view = small_view()
    assert evaluate(Relation(COUNT, 'A0', ('F0',)), view)
    assert not evaluate(Relation(COUNT, 'A0', ('F0',), -1), view)
    assert not evaluate(Relation(OFFSET, 'A0', ('F0',)), view)
    assert evaluate(Relation(OFFSET, 'A0', ('F0',), -1), view)
    assert evaluate(Relation(SIZE, 'A0', ('F0',)), view)
    assert evaluate(Relation(TERMINATOR, 'F1', ('F2',)), view)
    assert not evaluate(Relation(COUNT, 'A9', ('F0',)), view)
    assert not evaluate(Relation(COUNT, 'A0', ('F1',), align=(ZIP,)), view)


def test_mining_without_dependences(sum_csv):
    doc = sum_csv.doc
    plain = mine_relations([], sum_csv.view, doc, exhaustive=False)
    assert renders(plain) == {'F2.terminator = F3.bytes', 'F2.terminator = F4.bytes'}
    relations = mine_relations([], sum_csv.view, doc, exhaustive=True)
    assert renders(relations) == renders(sum_csv.relations)
    assert [rel.render() for rel in relations if rel.exhaustive] == ['A0.count = int(F0.bytes) - 1']


def test_strip_relations(sum_csv):
    stripped = strip_relations(sum_csv.doc)
    assert stripped.relations() == []
    assert len(sum_csv.doc.relations()) == 3


def test_attach_rejects_unknown_nodes(sum_csv):
    doc = strip_relations(sum_csv.doc)
    with pytest.raises(DanglingPathError):
        attach(doc, [Relation(COUNT, 'A7', ('F0',))])
    with pytest.raises(DanglingPathError):
        attach(doc, [Relation(COUNT, 'A0', ('F9',))])
    attach(doc, [Relation(COUNT, 'A0', ('F0',), -1)])
    assert renders(doc.node('A0').constraints) == {'A0.count = int(F0.bytes) - 1'}


def test_infer_align(sum_csv):
    doc = sum_csv.doc
    assert infer_align(doc, 'F0') == BROADCAST
    assert infer_align(doc, 'F3') == ZIP
    assert infer_align(doc, 'F2') == ZIP


@pytest.mark.parametrize('name', ['bmp', 'bmp_csv'])
def test_product_sources_divide_the_count(name, analyses):
    result = analyses[name]
    products = [rel for rel in result.relations if rel.kind == PRODUCT]
    assert products
    for rel in products:
        for source, align in zip(rel.sources, rel.align):
            assert evaluate(Relation(MODULUS, rel.target, (source,), 0, (align,)), result.view), (rel.render(), source)


def test_int_sources_are_not_record_tags(analyses):
    result = analyses['png2']
    kept = _record_types(result.doc, result.dependences, True)
    assert [rel.kind for rel in kept] == [RECORD_TYPE]
    assert kept[0].source == 'F1'
    assert _record_types(result.doc, result.dependences, True, {'F1'}) == []
