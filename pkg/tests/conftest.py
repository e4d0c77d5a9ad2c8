import random

import numpy as np
import pytest

from taint_grammar import pipeline
from taint_grammar.config import load_config
from taint_grammar.vm import programs


@pytest.fixture(scope='session')
def config():
    return load_config()


@pytest.fixture(scope='session')
def suite_programs():
    return {name: program for name, program, _ in programs.suite()}


@pytest.fixture(scope='session')
def witness_runs(config):
    """Run of every packaged program on its own witness."""
    return {name: pipeline.trace_program(programs.load(name), config=config) for name in programs.available()}


@pytest.fixture(scope='session')
def analyses(config, witness_runs):
    return {name: pipeline.analyze(run.trace, run.cfg, config) for name, run in witness_runs.items()}


@pytest.fixture(scope='session')
def sum_csv(analyses):
    return analyses['sum_csv']


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def prng():
    return random.Random(1234)
