import pytest

from taint_grammar.trace_model import ByteInterval, CallingContext
from taint_grammar.utils import AssemblyError, VmError
from taint_grammar.vm import assemble, run, ACCEPTED, REJECTED, TRAPPED
from taint_grammar.vm.machine import Machine
from taint_grammar.vm import programs

JTAB = """\
func main
    read c
    [J] jtab c, other, 65=isa, 0x42=isb
isa: [O] out c
    halt
isb: halt
other: fail
"""

SEEK = """\
func main
    read o
    [S] seek o
    read d
    [A] atoi n, d
    [O] out n
    halt
"""


def test_every_program_accepts_its_witness(witness_runs):
    assert set(programs.SUITE) <= set(witness_runs)
    for name, result in witness_runs.items():
        assert result.status == ACCEPTED, (name, result.reason)
        assert result.trace.tuples, name
    assert programs.load('sum_csv').expected == ['A0.count = int(F0.bytes) - 1', 'F2.terminator = F3.bytes',
                                                 'F2.terminator = F4.bytes']
    with pytest.raises(KeyError):
        programs.load('no_such_program')


def test_sum_csv_output(witness_runs):
    # line sum 3 + 2 + 5 + 8, then the running total
    assert witness_runs['sum_csv'].output == [18, 18]


def test_run_statuses():
    program = programs.load('csv_recursive_001')
    assert run(program, b'12,3\n').status == ACCEPTED
    assert run(program, b'1a\n').status == REJECTED
    assert run(programs.load('sum_csv'), b'4,3,2,5,8\n', step_budget=10).status == TRAPPED


def test_recursion_reuses_the_frame_context(witness_runs):
    contexts = {tup.ctx for tup in witness_runs['csv_recursive_001'].trace.tuples}
    assert contexts == {CallingContext(('R0',))}


def test_jtab():
    program = assemble(JTAB)
    accepted = run(program, b'A')
    assert accepted.status == ACCEPTED and accepted.output == [65]
    assert run(program, b'B').status == ACCEPTED
    assert run(program, b'C').status == REJECTED
    uses = {tup.addr: tup.taints for tup in accepted.trace.tuples}
    assert uses == {'J': frozenset({ByteInterval(0, 1)}), 'O': frozenset({ByteInterval(0, 1)})}
    assert len(program.cfg.successors(program.cfg.block_of('J'))) == 3


def test_seek_and_atoi_record_uses():
    program = assemble(SEEK)
    result = run(program, b'\x02x7')
    assert result.status == ACCEPTED and result.output == [7]
    uses = {tup.addr: tup.taints for tup in result.trace.tuples}
    assert uses['S'] == frozenset({ByteInterval(0, 1)})
    assert uses['A'] == frozenset({ByteInterval(2, 3)})
    assert run(program, b'\x02x?').status == REJECTED
    assert run(program, b'\x09x7').status == REJECTED


def test_untainted_uses_leave_no_tuple():
    program = assemble('func main\n    mov a, 3\n    [O] out a\n    halt\n')
    result = run(program, b'')
    assert result.accepted and result.trace.tuples == ()


@pytest.mark.parametrize('text,lineno', [
    ('mov a, 1\n', 1),
    ('func main\n    frob a\n', 2),
    ('func main\n    mov a\n', 2),
    ('func main\n    mov a, 1\n', 2),
    ('func main\nend: halt\nend: halt\n', 3),
])
def test_assembly_errors(text, lineno):
    with pytest.raises(AssemblyError) as excinfo:
        assemble(text)
    assert excinfo.value.lineno == lineno


def test_unresolved_names():
    with pytest.raises(AssemblyError):
        assemble('func main\n    jmp nowhere\n')
    with pytest.raises(AssemblyError):
        assemble('func main\n    call helper\n    halt\n')


def test_unset_register_is_a_program_bug():
    with pytest.raises(VmError):
        run(assemble('func main\n    out r\n    halt\n'), b'')


class RecordingMachine(Machine):
    """Machine keeping every executed instruction object."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.executed = []

    def execute(self, insn, fn, resume):
        self.executed.append(insn)
        return super().execute(insn, fn, resume)


def tainted_offsets(trace):
    return {offset for tup in trace.tuples for itv in tup.taints for offset in range(itv.start, itv.end)}


def landings(cfg, graph, blocks):
    """Non-empty blocks entered from ``blocks``, passing through empty ones."""
    found, todo, seen = set(), list(blocks), set()
    while todo:
        block = todo.pop()
        if block in seen:
            continue
        seen.add(block)
        if cfg.blocks[block]:
            found.add(block)
        else:
            todo.extend(graph.successors(block))
    return found


@pytest.mark.parametrize('name', programs.available())
def test_untainted_bytes_do_not_change_the_run(name, witness_runs):
    program = programs.load(name)
    base = witness_runs[name]
    tainted = tainted_offsets(base.trace)
    free = [pos for pos in range(len(program.witness)) if pos not in tainted][:64]
    if name == 'bmp':
        assert free
    for pos in free:
        data = bytearray(program.witness)
        data[pos] ^= 0xFF
        shadow = run(program, bytes(data))
        assert shadow.status == base.status, (name, pos)
        assert shadow.trace.tuples == base.trace.tuples, (name, pos)


def test_tainted_bytes_do_change_the_run(witness_runs):
    # the magic number decides the first branch of bmp
    base = witness_runs['bmp']
    data = bytearray(programs.load('bmp').witness)
    assert 0 in tainted_offsets(base.trace)
    data[0] ^= 0xFF
    assert run(programs.load('bmp'), bytes(data)).status == REJECTED


@pytest.mark.parametrize('name', programs.available())
def test_executed_transitions_follow_the_cfg(name):
    program = programs.load(name)
    cfg = program.cfg
    graph = cfg.graph()
    where = {id(insn): (block.id, pos) for function in program.functions.values()
             for block in function.blocks for pos, insn in enumerate(block.insns)}
    machine = RecordingMachine(program, program.witness)
    assert machine.run().accepted
    steps = [(insn,) + where[id(insn)] for insn in machine.executed]
    assert steps
    for (insn, block, pos), (_, next_block, next_pos) in zip(steps, steps[1:]):
        if insn.op == 'ret':
            continue
        if next_block == block and next_pos == pos + 1:
            continue
        assert next_pos == 0, (name, insn.id)
        if insn.op == 'call':
            assert (insn.id, insn.args[0]) in cfg.call_edges
            allowed = landings(cfg, graph, [cfg.entry_of(insn.args[0])])
        else:
            allowed = landings(cfg, graph, graph.successors(block))
        assert next_block in allowed, (name, insn.id, block, next_block)


def test_suite_needs_every_program(monkeypatch):
    assert [name for name, _, _ in programs.suite()] == list(programs.SUITE)
    monkeypatch.delitem(programs.PROGRAMS, 'pe')
    with pytest.raises(KeyError):
        programs.suite()
