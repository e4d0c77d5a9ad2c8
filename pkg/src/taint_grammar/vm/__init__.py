"""Toy tracer: subject programs in a small assembly, run with byte-level taint tracking."""
from taint_grammar.vm.assembler import Program, assemble, load_program
from taint_grammar.vm.machine import RunResult, run, ACCEPTED, REJECTED, TRAPPED, DEFAULT_STEP_BUDGET
