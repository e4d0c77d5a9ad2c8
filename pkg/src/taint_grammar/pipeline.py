"""End-to-end driver: partition, TIG, structure, ICDG, semantics and render, then generation."""
import json
from contextlib import contextmanager
from pathlib import Path

from easydict import EasyDict as edict

from taint_grammar import utils
from taint_grammar import cdg, tig
from taint_grammar.config import load_config, gen_config
from taint_grammar.field_partition import partition, fields_table
from taint_grammar.generator import acceptance
from taint_grammar.semantics import semantic_dependences, build_view, mine_relations, attach, strip_relations
from taint_grammar.structure_builder import build_doc, repair_array_boundaries, match_sequence, render, doc_to_json
from taint_grammar.trace_model import load_trace, load_cfg, validate_trace, dump_trace, dump_cfg
from taint_grammar.utils import StageError, StageTimer
from taint_grammar.vm import run as vm_run
from taint_grammar.vm import programs

logger = utils.set_logger(utils.get_module_name(__file__))

# 'tig' runs inside 'partition': fields are only final once the frontier is chosen
STAGES = ('partition', 'tig', 'structure', 'icdg', 'semantics', 'render')


@contextmanager
def run_stage(timer, name):
    """Time a stage and re-raise its failures as StageError."""
    with timer.stage(name):
        try:
            yield
        except StageError:
            raise
        except Exception as e:
            logger.error(f'{name} stage failed: {e} {utils.getLineInfo()}')
            raise StageError(name, e) from e


def _annotation_fields(doc):
    return [edict(id=fid, si=si) for fid, si in doc.field_si.items() if si is not None]


def analyze(trace, cfg, config=None, timer=None):
    """Grammar of the witness input of ``trace``; returns every intermediate artifact in an EasyDict.

    Stage times are added to ``timer`` when one is given.
    """
    config = load_config() if config is None else config
    max_period = config.pipeline.max_period
    timer = StageTimer() if timer is None else timer
    data = trace.input_bytes

    with run_stage(timer, 'partition'):
        validate_trace(trace)
        part = partition(trace)
        with run_stage(timer, 'tig'):
            root = tig.build_tig(part.values, trace.input_length)
            parent_of, all_cuts = tig.parents(root), tig.cuts(root)
            keys = tig.si_keys(root)
            frontier_map = tig.frontiers(root, keys.__getitem__, parent_of, all_cuts)
            new_keys = tig.new_si_keys(root)
            frontier_map_new = tig.frontiers(root, new_keys.__getitem__, parent_of, all_cuts)
            frontier = tig.select_frontier(frontier_map)
            fields = tig.frontier_fields(frontier, keys.__getitem__)
            sequence = tig.frontier_sequence(frontier, fields)
            spans = frontier.intervals()
            tokens = tig.field_tokens(fields, data)
            logger.info(f'frontier at depth {frontier.depth}: {len(fields)} fields over {len(sequence)} values')

    with run_stage(timer, 'structure'):
        doc = build_doc(sequence, spans, fields, tokens, data, max_period)
        if config.pipeline.use_new_si_repair:
            new_si = {fld.id: new_keys[fld.values[0]] for fld in fields if not fld.is_gap}
            doc = repair_array_boundaries(doc, new_si, max_period)

    with run_stage(timer, 'icdg'):
        icdg = cdg.compute_icdg(cfg)
        annotated = cdg.annotate(icdg, _annotation_fields(doc), cfg)
        projection = cdg.project_graph(annotated)
        control = cdg.control_data(annotated, cfg)

    with run_stage(timer, 'semantics'):
        instance = match_sequence(doc)
        if instance is None:
            raise ValueError('the witness sequence does not match its own structure')
        view = build_view(doc, instance, data, doc.spans)
        dependences = semantic_dependences(projection, doc)
        relations = mine_relations(dependences, view, doc, config.pipeline.exhaustive_fallback)
        attach(doc, relations)

    with run_stage(timer, 'render'):
        grammar = render(doc)

    logger.info(f'analysis done in {timer.total():.3f}s, dominant stage: {timer.dominant()}')
    return edict(partition=part, tig=root, frontier_map=frontier_map, frontier_map_new=frontier_map_new,
                 frontier=frontier, fields=fields, doc=doc, icdg=annotated, projection=projection,
                 control_data=control, dependences=dependences, relations=relations, view=view,
                 grammar=grammar, ast=doc_to_json(doc), timer=timer)


def analyze_paths(trace_path, cfg_path, config=None):
    """``analyze`` on a trace and a cfg document read from disk; the timer includes the load."""
    timer = StageTimer()
    with run_stage(timer, 'load'):
        trace = load_trace(trace_path)
        cfg = load_cfg(cfg_path)
    return analyze(trace, cfg, config, timer)


def trace_program(program, data=None, config=None):
    """Run a subject program on ``data`` (its witness by default)."""
    config = load_config() if config is None else config
    data = program.witness if data is None else data
    if data is None:
        raise ValueError(f'{program.name} has no witness input')
    result = vm_run(program, data, config.vm.step_budget)
    if not result.accepted:
        logger.warning(f'{program.name} did not accept its input: {result.status} ({result.reason})')
    return result


def vm_runner(program, step_budget):
    def run(data):
        return vm_run(program, data, step_budget).status
    return run


def end_to_end(name, config=None, samples=None, strip=False):
    """Trace the fixture's witness, analyze it, then measure acceptance of generated inputs.

    Generated inputs are re-parsed under the grammar before they reach the program
    unless ``[generator] reparse`` is off.
    """
    config = load_config() if config is None else config
    program = programs.load(name)
    timer = StageTimer()
    with run_stage(timer, 'trace'):
        run = trace_program(program, config=config)
        if not run.accepted:
            raise ValueError(f'witness of {name} is {run.status}: {run.reason}')
    result = analyze(run.trace, run.cfg, config, timer)
    doc = strip_relations(result.doc) if strip else result.doc
    cfg = gen_config(config) if samples is None else gen_config(config, samples=samples)
    with run_stage(timer, 'generate'):
        report = acceptance(doc, vm_runner(program, config.vm.step_budget), cfg)
    logger.info(f'{name}: {report}')
    return edict(name=name, report=report, result=result, doc=doc, timer=timer)


def report_timings(timer):
    """Rows (stage, seconds, share, parent) in run order, plus the dominant outermost stage.

    Shares are of the outermost total; a nested stage's share is also inside its parent's.
    """
    total = timer.total() or 1.
    rows = [edict(stage=name, seconds=seconds, share=seconds / total, parent=timer.parents.get(name))
            for name, seconds in timer.timings.items()]
    return edict(rows=rows, dominant=timer.dominant(), total=timer.total())


def write_artifacts(result, out_dir, trace=None, cfg=None):
    """One file per stage under ``out_dir``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = edict()
    if trace is not None:
        paths.trace = dump_trace(trace, out.joinpath('trace.json'))
    if cfg is not None:
        paths.cfg = dump_cfg(cfg, out.joinpath('cfg.json'))
    data = result.doc.witness
    paths.fields = out.joinpath('fields.json')
    paths.fields.write_text(json.dumps(fields_table(result.partition.fields, data), indent=1))
    paths.tig = out.joinpath('tig.dot')
    paths.tig.write_text(tig.to_dot(result.tig))
    paths.frontiers = out.joinpath('frontiers.json')
    paths.frontiers.write_text(json.dumps(dict(si=tig.frontier_map_to_json(result.frontier_map),
                                               new_si=tig.frontier_map_to_json(result.frontier_map_new),
                                               selected=result.frontier.depth), indent=1))
    paths.icdg = out.joinpath('icdg.dot')
    paths.icdg.write_text(cdg.to_dot(result.icdg.graph, result.icdg.annotations))
    paths.control_data = out.joinpath('control_data.json')
    chains = {block: [list(chain.blocks) for chain in cdg.dependence_chains(result.projection, block)]
              for block in result.projection.nodes}
    paths.control_data.write_text(json.dumps(dict(branches=result.control_data, chains=chains), indent=1))
    paths.grammar = out.joinpath('grammar.txt')
    paths.grammar.write_text(result.grammar)
    paths.ast = out.joinpath('ast.json')
    paths.ast.write_text(json.dumps(doc_to_json(result.doc), indent=1))
    logger.info(f'artifacts written to {out}')
    return paths
