"""Command line front end: ``taint-grammar <subcommand> ...``."""
import argparse
import json
import logging
import shlex
import sys
from pathlib import Path

from taint_grammar import __version__, utils
from taint_grammar import cdg, pipeline, tig
from taint_grammar.config import load_config, gen_config
from taint_grammar.field_partition import partition, fields_table, modules_report
from taint_grammar.generator import acceptance, command_runner, generate_many
from taint_grammar.semantics import strip_relations
from taint_grammar.structure_builder import build_doc, render, parse_grammar, doc_to_json, doc_from_json
from taint_grammar.trace_model import load_trace, load_cfg, dump_trace, dump_cfg
from taint_grammar.utils import StageError
from taint_grammar.vm import load_program
from taint_grammar.vm import programs

logger = utils.set_logger(utils.get_module_name(__file__))

DOMAIN_ERRORS = (StageError, ValueError, KeyError, RuntimeError, OSError)


def _program(ref):
    """A fixture name or a path to a ``.vm`` file."""
    if ref in programs.PROGRAMS:
        return programs.load(ref)
    return load_program(ref)


def load_doc(path):
    """Structure document from an AST json file or a grammar text file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == '.json':
        return doc_from_json(json.loads(text))
    return parse_grammar(text)


def _emit(args, payload, text):
    print(json.dumps(payload, indent=1) if args.json else text)


def cmd_trace(args, config):
    program = _program(args.program)
    data = Path(args.input).read_bytes() if args.input else None
    result = pipeline.trace_program(program, data, config)
    dump_trace(result.trace, args.out)
    dump_cfg(result.cfg, args.cfg)
    print(f'{program.name}: {result.status} ({result.reason}), {len(result.trace.tuples)} tuples')
    return 0 if result.accepted else 1


def cmd_fields(args, config):
    trace = load_trace(args.trace)
    part = partition(trace)
    rows = fields_table(part.fields, trace.input_bytes)
    modules = modules_report(part.fields)
    text = '\n'.join(f'{row.id:>5} x{row.n_values:<4} si={row.si_size:<3} {row.preview!r:24} '
                     f'{" ".join(modules[row.id])}' for row in rows)
    _emit(args, dict(fields=rows, modules=modules), text)
    return 0


def cmd_tig(args, config):
    trace = load_trace(args.trace)
    part = partition(trace)
    root = tig.build_tig(part.values, trace.input_length)
    keys = tig.new_si_keys(root) if args.new_si else tig.si_keys(root)
    frontier_map = tig.frontiers(root, keys.__getitem__)
    if args.dot:
        print(tig.to_dot(root))
        return 0
    selected = tig.select_frontier(frontier_map)
    lines = [f'cut {frontier.depth}: ' + ' '.join(str(itv) for itv in frontier.intervals())
             for frontier in frontier_map.cuts]
    lines.append(f'selected: cut {selected.depth}')
    _emit(args, dict(frontiers=tig.frontier_map_to_json(frontier_map), selected=selected.depth), '\n'.join(lines))
    return 0


def cmd_structure(args, config):
    trace = load_trace(args.trace)
    part = partition(trace)
    root = tig.build_tig(part.values, trace.input_length)
    keys = tig.si_keys(root)
    frontier = tig.select_frontier(tig.frontiers(root, keys.__getitem__))
    fields = tig.frontier_fields(frontier, keys.__getitem__)
    doc = build_doc(tig.frontier_sequence(frontier, fields), frontier.intervals(), fields,
                    tig.field_tokens(fields, trace.input_bytes), trace.input_bytes, config.pipeline.max_period)
    _emit(args, doc_to_json(doc), render(doc).rstrip())
    return 0


def cmd_icdg(args, config):
    cfg = load_cfg(args.cfg)
    icdg = cdg.compute_icdg(cfg)
    if args.trace:
        part = partition(load_trace(args.trace))
        icdg = cdg.annotate(icdg, part.fields, cfg)
    elif args.control_data or args.chains:
        raise ValueError('--control-data and --chains need --trace')
    if args.control_data:
        report = cdg.control_data(icdg, cfg)
        _emit(args, report, '\n'.join(f'{block}: {" ".join(fids)}' for block, fids in report.items()))
        return 0
    if args.chains:
        projection = cdg.project_graph(icdg)
        if args.chains not in projection.annotations:
            raise KeyError(f'{args.chains} is not an annotated block')
        chains = [list(chain.blocks) for chain in cdg.dependence_chains(projection, args.chains)]
        _emit(args, chains, '\n'.join(' <- '.join(chain) for chain in chains))
        return 0
    graph = cdg.project_graph(icdg).graph if args.project else icdg.graph
    if args.dot:
        print(cdg.to_dot(graph, icdg.annotations))
        return 0
    text = '\n'.join(f'{src} -> {dst}' for src, dst in sorted(graph.edges))
    _emit(args, dict(edges=sorted(graph.edges), annotations={block: sorted(fids)
                                                             for block, fids in icdg.annotations.items()}), text)
    return 0


def cmd_analyze(args, config):
    result = pipeline.analyze_paths(args.trace, args.cfg, config)
    if args.out:
        pipeline.write_artifacts(result, args.out)
    timings = pipeline.report_timings(result.timer)
    logger.info(f'dominant stage: {timings.dominant}')
    _emit(args, doc_to_json(result.doc), result.grammar.rstrip())
    return 0


def _grammar_path(args):
    path = args.grammar_option or args.grammar
    if path is None:
        raise ValueError('a grammar file is required (positional or --grammar)')
    return path


def cmd_generate(args, config):
    doc = load_doc(_grammar_path(args))
    cfg = gen_config(config)
    out = Path(args.out_dir) if args.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for index, data in enumerate(generate_many(doc, cfg)):
        if out is None:
            print(data.hex())
        else:
            out.joinpath(f'sample_{index:05d}.bin').write_bytes(data)
    return 0


def cmd_accept(args, config):
    doc = load_doc(_grammar_path(args))
    if args.strip:
        doc = strip_relations(doc)
    cfg = gen_config(config)
    if args.command:
        runner = command_runner(shlex.split(args.command))
    else:
        runner = pipeline.vm_runner(_program(args.program), config.vm.step_budget)
    report = acceptance(doc, runner, cfg)
    _emit(args, dict(generated=report.generated, accepted=report.accepted, rejected=report.rejected,
                     trapped=report.trapped, errors=report.errors, ratio=report.ratio), str(report))
    return 0


def cmd_suite(args, config):
    rows = []
    for name in args.names or programs.SUITE:
        run = pipeline.end_to_end(name, config, samples=args.samples, strip=args.strip)
        report = run.report
        ratio = 'n/a' if report.undefined else f'{report.ratio:.1f}%'
        rows.append(dict(name=name, generated=report.generated, accepted=report.accepted, ratio=report.ratio))
        print(f'{name:<22} {report.accepted:>5}/{report.generated:<5} {ratio:>7}')
    if args.json:
        print(json.dumps(rows, indent=1))
    return 0


def _add_json(p):
    # SUPPRESS keeps a global --json given before the subcommand
    p.add_argument('--json', action='store_true', default=argparse.SUPPRESS, help='print structured output as json')


def _add_grammar(p):
    p.add_argument('grammar', nargs='?', help='grammar text or AST json')
    p.add_argument('--grammar', dest='grammar_option', metavar='GRAMMAR', help='same as the positional argument')


def _add_samples(p):
    p.add_argument('-n', '--n', '--samples', dest='samples', type=int, default=None, help='number of inputs')
    p.add_argument('--seed', type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog='taint-grammar',
                                     description='Recover an input grammar from a taint trace and a cfg')
    parser.add_argument('--version', action='version', version=__version__)
    parser.add_argument('--config', type=Path, help='TOML file overlaid on the packaged configuration')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='-v for info, -vv for debug')
    parser.add_argument('--json', action='store_true', help='print structured documents as json')
    sub = parser.add_subparsers(dest='subcommand', required=True)

    p = sub.add_parser('trace', help='run a program on an input and export the trace and cfg')
    p.add_argument('--program', required=True, help='fixture name or .vm file')
    p.add_argument('--input', help='input file (default: the program witness)')
    p.add_argument('--out', default='trace.json')
    p.add_argument('--cfg', default='cfg.json')
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser('fields', help='field partition of a trace')
    p.add_argument('trace')
    _add_json(p)
    p.set_defaults(func=cmd_fields)

    p = sub.add_parser('tig', help='taint interval graph and its frontiers')
    p.add_argument('trace')
    p.add_argument('--dot', action='store_true')
    p.add_argument('--new-si', action='store_true', help='key the frontiers by New_SI instead of SI')
    _add_json(p)
    p.set_defaults(func=cmd_tig)

    p = sub.add_parser('structure', help='structure of the selected frontier, without relations')
    p.add_argument('trace')
    _add_json(p)
    p.set_defaults(func=cmd_structure)

    p = sub.add_parser('icdg', help='interprocedural control dependence of a cfg')
    p.add_argument('cfg')
    p.add_argument('--trace', help='annotate blocks with the fields of this trace')
    p.add_argument('--project', action='store_true', help='show the projection onto annotated blocks')
    p.add_argument('--control-data', action='store_true', help='fields deciding each branching block')
    p.add_argument('--chains', metavar='BLOCK', help='chains of dependence from an annotated block')
    p.add_argument('--dot', action='store_true')
    _add_json(p)
    p.set_defaults(func=cmd_icdg)

    p = sub.add_parser('analyze', help='full pipeline: grammar text (or AST with --json)')
    p.add_argument('trace')
    p.add_argument('cfg')
    p.add_argument('--out', help='directory receiving one artifact per stage')
    _add_json(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser('generate', help='random inputs from a grammar')
    _add_grammar(p)
    _add_samples(p)
    p.add_argument('--out', '--out-dir', dest='out_dir', help='write one file per sample instead of hex lines')
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser('accept', help='acceptance ratio of generated inputs')
    _add_grammar(p)
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument('--program', help='fixture name or .vm file')
    target.add_argument('--command', help='external command; the input path is appended, exit 0 accepts')
    _add_samples(p)
    p.add_argument('--strip', action='store_true', help='drop every relation first')
    _add_json(p)
    p.set_defaults(func=cmd_accept)

    p = sub.add_parser('suite', help='end to end acceptance over the synthetic programs')
    p.add_argument('names', nargs='*', help='fixtures to run (default: all nine)')
    _add_samples(p)
    p.add_argument('--strip', action='store_true', help='baseline: generate without relations')
    _add_json(p)
    p.set_defaults(func=cmd_suite)
    return parser


def _console(level):
    """Console handler on the package logger, filtered at ``level``."""
    base = logging.getLogger(utils.LOGGER_BASE_NAME)
    if not base.handlers:
        base = utils.set_logger(utils.LOGGER_BASE_NAME, base_logger=True, add_to_console=True)
    for handler in base.handlers:
        handler.setLevel(level)
    return base


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _console({0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG))
    try:
        config = load_config(args.config, dict(generator=dict(seed=getattr(args, 'seed', None),
                                                              samples=getattr(args, 'samples', None))))
        return args.func(args, config)
    except DOMAIN_ERRORS as e:
        stage = f' [{e.stage}]' if isinstance(e, StageError) else ''
        logger.error(f'{type(e).__name__}{stage}: {e} {utils.getLineInfo()}')
        print(f'error{stage}: {e}', file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
