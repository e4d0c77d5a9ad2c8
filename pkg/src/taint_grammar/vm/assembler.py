"""Text format of subject programs.

One statement per line or several separated by ``;``; ``#`` starts a comment::

    .name sum_csv
    .witness "4,3,2,5,8\\n"
    func main                       # first function is the entry
        mov total, 0
    scan: jeof finish               # label: starts a block
        read c
        [I2] jne c, 10, scan        # [TAG] names the instruction (default <func>.<n>)
    finish: halt

Repeated ``.witness`` and ``.witness-hex`` lines append to the witness input.
A tag may be repeated by consecutive instructions of one block; they then count as
a single instruction in the exported CFG. Blocks end at labels and after jumps,
``ret``, ``halt`` and ``fail``; a block without a final jump falls through.
"""
import ast
import re
from functools import cached_property
from dataclasses import dataclass, field

from taint_grammar import utils
from taint_grammar.trace_model import CfgPackage
from taint_grammar.utils import AssemblyError

logger = utils.set_logger(utils.get_module_name(__file__))

BRANCHES = ('jeq', 'jne', 'jlt', 'jle', 'jgt', 'jge')
EXITS = ('ret', 'halt', 'fail')
TERMINATORS = BRANCHES + EXITS + ('jmp', 'jeof', 'jtab')

# opcode: (min args, max args); None is unbounded
ARITY = {
    'read': (1, 2), 'atoi': (2, 2), 'mov': (2, 2),
    'add': (3, 3), 'sub': (3, 3), 'mul': (3, 3), 'div': (3, 3), 'mod': (3, 3),
    'jmp': (1, 1), 'jeof': (1, 1), 'jtab': (2, None),
    'seek': (1, 1), 'tell': (1, 1), 'skip': (1, 1), 'out': (1, 1),
    'push': (1, 1), 'pop': (1, 1), 'call': (1, 1),
    'ret': (0, 0), 'halt': (0, 0), 'fail': (0, 0),
}
ARITY.update({op: (3, 3) for op in BRANCHES})

_LABEL_RE = re.compile(r'^([A-Za-z_]\w*)\s*:(.*)$')
_TAG_RE = re.compile(r'^\[([\w.]+)\]\s*(.*)$')
_NAME_RE = re.compile(r'^[A-Za-z_]\w*$')


@dataclass
class Insn:
    id: str
    op: str
    args: tuple
    lineno: int


@dataclass
class Block:
    id: str
    insns: list = field(default_factory=list)

    @property
    def last(self):
        return self.insns[-1] if self.insns else None


@dataclass
class Function:
    name: str
    blocks: list = field(default_factory=list)
    labels: dict = field(default_factory=dict)

    def target(self, label, insn):
        if label not in self.labels:
            raise AssemblyError(f'unknown label {label!r} in {self.name}', insn.lineno)
        return self.labels[label]


@dataclass
class Program:
    name: str
    functions: dict
    witness: bytes = None
    profile: list = field(default_factory=list)
    expected: list = field(default_factory=list)

    @property
    def entry(self):
        return next(iter(self.functions))

    def successors(self, fn, index):
        """Block indices following block ``index`` of ``fn`` inside its function."""
        function = self.functions[fn]
        block = function.blocks[index]
        last = block.last
        if last is None or last.op not in TERMINATORS:
            return [index + 1]
        if last.op in EXITS:
            return []
        if last.op == 'jmp':
            return [function.target(last.args[0], last)]
        if last.op == 'jtab':
            return list(dict.fromkeys(function.target(label, last) for label in jtab_labels(last)))
        return list(dict.fromkeys([function.target(last.args[-1], last), index + 1]))

    @cached_property
    def cfg(self):
        """Exported CfgPackage; block and instruction ids as assembled."""
        functions, blocks, edges, calls, exits = [], dict(), [], [], dict()
        for fn, function in self.functions.items():
            functions.append((fn, function.blocks[0].id))
            for index, block in enumerate(function.blocks):
                blocks[block.id] = tuple(dict.fromkeys(insn.id for insn in block.insns))
                edges.extend((block.id, function.blocks[succ].id) for succ in self.successors(fn, index))
                calls.extend((insn.id, insn.args[0]) for insn in block.insns if insn.op == 'call')
                if block.last is not None and block.last.op in EXITS:
                    exits.setdefault(fn, []).append(block.id)
        return CfgPackage(tuple(functions), blocks, tuple(edges), tuple(dict.fromkeys(calls)),
                          {fn: tuple(ids) for fn, ids in exits.items()})


def jtab_labels(insn):
    """Default label then the labels of the ``value=label`` cases."""
    return [insn.args[1]] + [case.split('=', 1)[1].strip() for case in insn.args[2:]]


def jtab_cases(insn):
    cases = dict()
    for case in insn.args[2:]:
        value, label = case.split('=', 1)
        cases[int(value.strip(), 0)] = label.strip()
    return cases


def is_immediate(operand):
    try:
        int(operand, 0)
    except ValueError:
        return False
    return True


class _Assembler:

    def __init__(self, name):
        self.name = name
        self.functions = dict()
        self.function = None
        self.witness = None
        self.profile = []
        self.expected = []
        self.pending = []
        self.tag_blocks = dict()
        self.counter = 0

    def directive(self, line, lineno):
        key, _, rest = line.partition(' ')
        rest = rest.strip()
        if key == '.name':
            self.name = rest
        elif key == '.witness':
            try:
                text = ast.literal_eval(rest)
            except (ValueError, SyntaxError) as e:
                raise AssemblyError(f'bad witness string: {e}', lineno) from e
            chunk = text.encode('latin-1') if isinstance(text, str) else bytes(text)
            self.witness = (self.witness or b'') + chunk
        elif key == '.witness-hex':
            self.witness = (self.witness or b'') + bytes.fromhex(rest)
        elif key == '.profile':
            self.profile.extend(rest.split())
        elif key == '.expect':
            self.expected.append(rest)
        else:
            raise AssemblyError(f'unknown directive {key}', lineno)

    def start_function(self, name, lineno):
        if not _NAME_RE.match(name) or name in self.functions:
            raise AssemblyError(f'bad or duplicate function name {name!r}', lineno)
        self.close_function(lineno)
        self.function = Function(name)
        self.functions[name] = self.function
        self.counter = 0

    def current_block(self):
        blocks = self.function.blocks
        if not blocks or (blocks[-1].last is not None and blocks[-1].last.op in TERMINATORS) or self.pending:
            block_id = f'{self.function.name}.{self.pending[0]}' if self.pending \
                else f'{self.function.name}.b{len(blocks)}'
            blocks.append(Block(block_id))
            for label in self.pending:
                self.function.labels[label] = len(blocks) - 1
            self.pending = []
        return blocks[-1]

    def label(self, label, lineno):
        if self.function is None:
            raise AssemblyError(f'label {label} outside a function', lineno)
        if label in self.function.labels or label in self.pending:
            raise AssemblyError(f'duplicate label {label}', lineno)
        self.pending.append(label)

    def instruction(self, stmt, lineno):
        if self.function is None:
            raise AssemblyError('instruction outside a function', lineno)
        tag = None
        matched = _TAG_RE.match(stmt)
        if matched:
            tag, stmt = matched.group(1), matched.group(2).strip()
        op, *rest = stmt.split(None, 1)
        args = tuple(arg.strip() for arg in rest[0].split(',')) if rest else ()
        if op not in ARITY:
            raise AssemblyError(f'unknown opcode {op!r}', lineno)
        low, high = ARITY[op]
        if len(args) < low or (high is not None and len(args) > high):
            raise AssemblyError(f'{op} takes {low}..{high if high is not None else "n"} operands, got {len(args)}',
                                lineno)
        block = self.current_block()
        if tag is None:
            insn_id = f'{self.function.name}.{self.counter}'
        else:
            insn_id = tag
            owner = self.tag_blocks.get(tag)
            if owner is not None and (owner is not block or block.last is None or block.last.id != tag):
                raise AssemblyError(f'tag {tag} reused outside its run of instructions', lineno)
            self.tag_blocks[tag] = block
        self.counter += 1
        block.insns.append(Insn(insn_id, op, args, lineno))

    def close_function(self, lineno):
        if self.function is None:
            return
        if self.pending:
            raise AssemblyError(f'label {self.pending[0]} ends function {self.function.name}', lineno)
        blocks = self.function.blocks
        if not blocks:
            raise AssemblyError(f'function {self.function.name} is empty', lineno)
        last = blocks[-1].last
        if last is None or last.op not in TERMINATORS or last.op in BRANCHES + ('jeof',):
            raise AssemblyError(f'function {self.function.name} falls off its end', lineno)

    def finish(self, lineno):
        self.close_function(lineno)
        if not self.functions:
            raise AssemblyError('program has no function', lineno)
        program = Program(self.name, self.functions, self.witness, self.profile, self.expected)
        for fn, function in self.functions.items():
            for index, block in enumerate(function.blocks):
                program.successors(fn, index)
                for insn in block.insns:
                    if insn.op == 'call' and insn.args[0] not in self.functions:
                        raise AssemblyError(f'call to unknown function {insn.args[0]}', insn.lineno)
                    if insn.op == 'jtab':
                        try:
                            jtab_cases(insn)
                        except ValueError as e:
                            raise AssemblyError(f'bad jtab case: {e}', insn.lineno) from e
        return program


def assemble(text, name='program'):
    """Program from its text."""
    asm = _Assembler(name)
    lineno = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith('.'):
            asm.directive(line, lineno)
            continue
        line = line.split('#', 1)[0]
        for stmt in line.split(';'):
            stmt = stmt.strip()
            while stmt:
                matched = _LABEL_RE.match(stmt)
                if not matched or matched.group(1) == 'func':
                    break
                asm.label(matched.group(1), lineno)
                stmt = matched.group(2).strip()
            if not stmt:
                continue
            if stmt.startswith('func '):
                asm.start_function(stmt[5:].strip(), lineno)
            else:
                asm.instruction(stmt, lineno)
    program = asm.finish(lineno)
    logger.debug(f'assembled {program.name}: {len(program.functions)} functions')
    return program


def load_program(path):
    with open(path, 'r') as f:
        text = f.read()
    return assemble(text, name=re.sub(r'\W', '_', str(path).rsplit('/', 1)[-1].rsplit('.', 1)[0]))
