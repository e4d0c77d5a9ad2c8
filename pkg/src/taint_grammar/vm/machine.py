"""Interpreter of subject programs with byte-level taint and calling contexts.

Every register holds ``(value, taint)`` where taint is the frozenset of input offsets
the value derives from. Data movement and arithmetic propagate taint silently;
``atoi``, the compare-and-branch family, ``jtab``, ``seek`` and ``out`` record a use
of their tainted operands as one trace tuple.
"""
from dataclasses import dataclass, field

from taint_grammar import utils
from taint_grammar.trace_model import ByteInterval, CallingContext, TaintTrace, TraceTuple
from taint_grammar.utils import VmError
from taint_grammar.vm.assembler import BRANCHES, is_immediate, jtab_cases

logger = utils.set_logger(utils.get_module_name(__file__))

ACCEPTED = 'accepted'
REJECTED = 'rejected'
TRAPPED = 'trapped'

DEFAULT_STEP_BUDGET = 1_000_000

_COMPARE = {
    'jeq': lambda a, b: a == b,
    'jne': lambda a, b: a != b,
    'jlt': lambda a, b: a < b,
    'jle': lambda a, b: a <= b,
    'jgt': lambda a, b: a > b,
    'jge': lambda a, b: a >= b,
}
_ARITH = {
    'add': lambda a, b: a + b,
    'sub': lambda a, b: a - b,
    'mul': lambda a, b: a * b,
    'div': lambda a, b: a // b,
    'mod': lambda a, b: a % b,
}
EMPTY = frozenset()


@dataclass
class RunResult:
    status: str
    reason: str
    trace: TaintTrace
    cfg: object
    output: list = field(default_factory=list)
    steps: int = 0

    @property
    def accepted(self):
        return self.status == ACCEPTED


class _Stop(Exception):

    def __init__(self, status, reason):
        super().__init__(reason)
        self.status = status
        self.reason = reason


def taint_intervals(taint):
    """Contiguous runs of a set of offsets."""
    intervals = []
    start = previous = None
    for offset in sorted(taint):
        if start is None:
            start = previous = offset
        elif offset == previous + 1:
            previous = offset
        else:
            intervals.append(ByteInterval(start, previous + 1))
            start = previous = offset
    if start is not None:
        intervals.append(ByteInterval(start, previous + 1))
    return frozenset(intervals)


@dataclass
class _Frame:
    fn: str
    ctx: tuple
    resume: tuple = None


class Machine:
    """One run of ``program`` over ``data``."""

    def __init__(self, program, data, step_budget=DEFAULT_STEP_BUDGET):
        self.program = program
        self.data = bytes(data)
        self.step_budget = step_budget
        self.registers = dict()
        self.stack = []
        self.frames = [_Frame(program.entry, ())]
        self.cursor = 0
        self.tuples = []
        self.output = []
        self.steps = 0

    def value(self, operand):
        if is_immediate(operand):
            return int(operand, 0), EMPTY
        if operand not in self.registers:
            raise VmError(f'register {operand} read before it was written')
        return self.registers[operand]

    def use(self, insn, taint):
        if taint:
            self.tuples.append(TraceTuple(insn.id, CallingContext(self.frames[-1].ctx), taint_intervals(taint)))

    def reject(self, reason):
        raise _Stop(REJECTED, reason)

    def call_context(self, site, callee):
        for frame in self.frames:
            if frame.fn == callee:
                return frame.ctx
        return self.frames[-1].ctx + (site,)

    def run(self):
        fn, block, index = self.program.entry, 0, 0
        try:
            while True:
                self.steps += 1
                if self.steps > self.step_budget:
                    raise _Stop(TRAPPED, f'step budget of {self.step_budget} exhausted')
                function = self.program.functions[fn]
                insns = function.blocks[block].insns
                if index >= len(insns):
                    block, index = block + 1, 0
                    continue
                insn = insns[index]
                jump = self.execute(insn, fn, (fn, block, index + 1))
                if jump is None:
                    index += 1
                elif isinstance(jump, tuple):
                    fn, block, index = jump
                else:
                    block, index = function.target(jump, insn), 0
        except _Stop as stop:
            status, reason = stop.status, stop.reason
        trace = TaintTrace(len(self.data), self.data, tuple(self.tuples))
        logger.debug(f'{self.program.name}: {status} after {self.steps} steps ({reason})')
        return RunResult(status, reason, trace, self.program.cfg, self.output, self.steps)

    def execute(self, insn, fn, resume):
        """Run one instruction; returns None, a label of ``fn`` or an absolute position."""
        op, args = insn.op, insn.args
        if op == 'read':
            size = self.value(args[1])[0] if len(args) > 1 else 1
            chunk = self.data[self.cursor:self.cursor + size]
            if size < 1 or len(chunk) < size:
                self.reject(f'{insn.id}: read of {size} bytes at {self.cursor} past the end')
            self.registers[args[0]] = int.from_bytes(chunk, 'little'), frozenset(range(self.cursor,
                                                                                        self.cursor + size))
            self.cursor += size
        elif op == 'atoi':
            value, taint = self.value(args[1])
            self.use(insn, taint)
            if not 0x30 <= value <= 0x39:
                self.reject(f'{insn.id}: {value:#x} is not a digit')
            self.registers[args[0]] = value - 0x30, taint
        elif op == 'mov':
            self.registers[args[0]] = self.value(args[1])
        elif op in _ARITH:
            (a, ta), (b, tb) = self.value(args[1]), self.value(args[2])
            if op in ('div', 'mod') and b == 0:
                self.reject(f'{insn.id}: division by zero')
            self.registers[args[0]] = _ARITH[op](a, b), ta | tb
        elif op in BRANCHES:
            (a, ta), (b, tb) = self.value(args[0]), self.value(args[1])
            self.use(insn, ta | tb)
            return args[2] if _COMPARE[op](a, b) else None
        elif op == 'jmp':
            return args[0]
        elif op == 'jeof':
            return args[0] if self.cursor >= len(self.data) else None
        elif op == 'jtab':
            value, taint = self.value(args[0])
            self.use(insn, taint)
            return jtab_cases(insn).get(value, args[1])
        elif op == 'seek':
            value, taint = self.value(args[0])
            self.use(insn, taint)
            if not 0 <= value <= len(self.data):
                self.reject(f'{insn.id}: seek to {value} outside the input')
            self.cursor = value
        elif op == 'tell':
            self.registers[args[0]] = self.cursor, EMPTY
        elif op == 'skip':
            size = self.value(args[0])[0]
            if self.cursor + size > len(self.data):
                self.reject(f'{insn.id}: skip of {size} bytes past the end')
            self.cursor += size
        elif op == 'out':
            value, taint = self.value(args[0])
            self.use(insn, taint)
            self.output.append(value)
        elif op == 'push':
            self.stack.append(self.value(args[0]))
        elif op == 'pop':
            if not self.stack:
                raise VmError(f'{insn.id}: pop from an empty stack')
            self.registers[args[0]] = self.stack.pop()
        elif op == 'call':
            callee = args[0]
            self.frames[-1].resume = resume
            self.frames.append(_Frame(callee, self.call_context(insn.id, callee)))
            return callee, 0, 0
        elif op == 'ret':
            if len(self.frames) == 1:
                raise _Stop(ACCEPTED, f'{insn.id}: returned from {fn}')
            self.frames.pop()
            return self.frames[-1].resume
        elif op == 'halt':
            raise _Stop(ACCEPTED, f'{insn.id}: halt')
        elif op == 'fail':
            raise _Stop(REJECTED, f'{insn.id}: fail')
        else:
            raise VmError(f'{insn.id}: unknown opcode {op}')
        return None


def run(program, data, step_budget=DEFAULT_STEP_BUDGET):
    """Execute ``program`` on ``data``; the trace holds one tuple per tainted use."""
    return Machine(program, data, step_budget).run()
