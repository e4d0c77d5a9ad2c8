from pathlib import Path

from taint_grammar import utils
from taint_grammar.vm.assembler import load_program

logger = utils.set_logger('programs', add_to_console=False)

SUITE = ('csv', 'csv_array', 'csv_nested_array', 'csv_recursive_001', 'csv_array_recursive',
         'http', 'bmp_csv', 'pe', 'png2')

PROGRAMS = dict()
for path in sorted(Path(__file__).parent.iterdir()):
    try:
        if path.suffix == '.vm':
            PROGRAMS[path.stem] = load_program(path)
    except Exception as e:
        logger.warning("{:} program couldn't be loaded due to some errors: {:}".format(path.stem, str(e)))


def available():
    return sorted(PROGRAMS)


def load(name):
    if name not in PROGRAMS:
        raise KeyError(f'no program named {name}; available: {", ".join(available())}')
    return PROGRAMS[name]


def suite():
    """(name, program, witness) for each synthetic subject, in table order."""
    missing = [name for name in SUITE if name not in PROGRAMS]
    if missing:
        raise KeyError(f'suite programs failed to load: {", ".join(missing)}')
    return [(name, PROGRAMS[name], PROGRAMS[name].witness) for name in SUITE]
