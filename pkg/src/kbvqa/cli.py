"""
Module that contains the command line app.

:func:`main` is the group behind the ``kbvqa`` script. It installs the click-log handler on
the ``kbvqa`` logger, so ``-v DEBUG`` shows per-batch losses and cache hits. With ``--debug``
errors are logged with their traceback, otherwise they end the command with a one-line message.

A complete run on synthetic data::

    kbvqa gen --out data
    kbvqa train --config data/run.cfg --stage all
    kbvqa eval --config data/run.cfg --split val --split test
    kbvqa ablate --config data/run.cfg --cases sub,obj,rel,att

``gen`` writes ``data/run.cfg`` with the feature sizes of the generated images; copy it to
change the model sizes.

``serve`` starts an EPC server, prints the port and combines the given providers with a
:class:`kbvqa.KBQAProvider` in a :class:`kbvqa.ChainedProvider`.
"""
import contextlib
import functools
import io
import json
import logging
import os

import click
import click_log

import kbvqa
from . import provider as providermod

logger = logging.getLogger(__name__)
package_logger = click_log.basic_config(logging.getLogger("kbvqa"))

_ERRORS = (IOError, OSError, ValueError, KeyError, IndexError, kbvqa.ValidationException, kbvqa.DivergenceError)


def _comma_list(ctx, param, value):
    if value is None:
        return None
    return [item.strip() for item in value.split(",") if item.strip()]


def _reported(func):
    """Turn expected errors into a :class:`click.ClickException`, logging the traceback with ``--debug``."""
    @functools.wraps(func)
    def wrapped(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except _ERRORS as err:
            ctx = click.get_current_context()
            if (ctx.obj or {}).get("debug"):
                logger.exception("%s failed", ctx.command_path)
            raise click.ClickException(str(err))
    return wrapped


def _load_config(path):
    return kbvqa.RunConfig.load(path) if path else kbvqa.RunConfig()


config_option = click.option('--config', '-c', 'config_path', type=click.Path(dir_okay=False),
                             help="run configuration file, defaults are used without one")


# If you change any arguments, make sure to update the readme documentation.
@click.group()
@click_log.simple_verbosity_option(package_logger)
@click.option('--debug', is_flag=True, help="Show tracebacks when erroring.")
@click.version_option(kbvqa.__version__)
@click.pass_context
def main(ctx, debug):
    """Knowledge base visual question answering."""
    ctx.obj = {"debug": debug}


@main.group()
def kb():
    """Build and query knowledge base index files."""


@kb.command("build")
@click.option('--in', 'source', required=True, type=click.Path(dir_okay=False),
              help="facts as subject<TAB>relation<TAB>object lines")
@click.option('--out', required=True, type=click.Path(dir_okay=False), help="index file to write")
@click.option('--casefold/--no-casefold', default=True, help="case-fold all terms")
@_reported
def kb_build(source, out, casefold):
    """Index a fact file."""
    index = kbvqa.build_index(kbvqa.read_facts(source, casefold))
    index.save(out)
    click.echo("%s facts, %s entities, %s relations, %s duplicates dropped" % (
        len(index), len(index.entities()), len(index.relations()), index.duplicates))


@kb.command("query")
@click.option('--kb', 'index_path', required=True, type=click.Path(dir_okay=False), help="index file")
@click.option('--subjects', callback=_comma_list, help="comma separated subject clues")
@click.option('--objects', callback=_comma_list, help="comma separated object clues")
@click.option('--relations', callback=_comma_list, help="comma separated relations to keep")
@click.option('--hops', type=int, default=1, show_default=True)
@click.option('--directed', is_flag=True, help="follow edges in clue direction only")
@_reported
def kb_query(index_path, subjects, objects, relations, hops, directed):
    """Print the oriented candidates of some clues with their provenance."""
    index = kbvqa.KnowledgeBase.load(index_path)
    found = kbvqa.retrieve_candidates(index, subjects or [], objects or [], relations, hops, directed)
    for fact, prov in zip(found.candidates, found.provenance):
        roles = ",".join("%s:%s" % p for p in sorted(prov))
        click.echo("\t".join([fact.subject, fact.relation, fact.object, fact.orientation, roles]))
    logger.info("%s candidates", len(found))


@main.command()
@click.option('--spec', 'spec_path', type=click.Path(dir_okay=False), help="generator settings file")
@click.option('--out', required=True, type=click.Path(file_okay=False), help="data directory to write")
@_reported
def gen(spec_path, out):
    """Generate a synthetic knowledge base and dataset."""
    spec = kbvqa.GeneratorSpec.load(spec_path) if spec_path else kbvqa.GeneratorSpec()
    index, splits = kbvqa.generate_synthetic(spec)
    vocabularies = kbvqa.write_dataset(out, index, splits)
    run_config = os.path.join(out, "run.cfg")
    kbvqa.RunConfig(data_dir=out, feature_dim=spec.feature_dim, num_objects=spec.num_objects).save(run_config)
    logger.info("wrote a matching run configuration to %s", run_config)
    click.echo("wrote %s facts, %s words and splits %s to %s" % (
        len(index), len(vocabularies.words), ", ".join("%s=%s" % (n, len(s)) for n, (s, _) in sorted(splits.items())),
        out))


@main.group()
def detector():
    """Train the relation phrase detector and export clues."""


@detector.command("train")
@config_option
@click.option('--out', type=click.Path(dir_okay=False), help="checkpoint, defaults to the work directory")
@_reported
def detector_train(config_path, out):
    """Train the detector on the training split."""
    written = kbvqa.train(_load_config(config_path), stage="detector", detector_checkpoint=out)
    click.echo(written["detector"])


@detector.command("clues")
@config_option
@click.option('--ckpt', type=click.Path(dir_okay=False), help="checkpoint, defaults to the work directory")
@click.option('--split', default="test", show_default=True)
@click.option('--topk-sub', type=int, help="subject clues per sample")
@click.option('--topk-obj', type=int, help="object clues per sample")
@click.option('--topk-rel', type=int, help="relation clues per sample")
@click.option('--out', required=True, type=click.Path(dir_okay=False), help="JSON lines file to write")
@_reported
def detector_clues(config_path, ckpt, split, topk_sub, topk_obj, topk_rel, out):
    """Write the predicted clues of every sample of a split."""
    config = _load_config(config_path)
    overrides = dict((k, v) for k, v in (("topk_subjects", topk_sub), ("topk_objects", topk_obj),
                                         ("topk_relations", topk_rel)) if v is not None)
    config = config.replace(**overrides)
    _, vocabularies = kbvqa.load_resources(config)
    data = kbvqa.load_run_split(config, split)
    model = kbvqa.load_detector(ckpt or kbvqa.Workspace(config.work_dir).detector_checkpoint, config, vocabularies)
    predictions = kbvqa.predict_phrases(model, data, config, vocabularies.words)
    clues = kbvqa.clues_from_predictions(predictions, vocabularies, config.topk_subjects, config.topk_objects,
                                         config.topk_relations)
    with io.open(out, "w", encoding="utf-8") as f:
        for sample, clue in zip(data.samples, clues):
            f.write(json.dumps({"id": sample.sample_id, "clues": clue.to_json()}) + "\n")
    click.echo("wrote clues of %s samples to %s" % (len(data), out))


@main.command()
@config_option
@click.option('--stage', type=click.Choice(kbvqa.STAGES), default="all", show_default=True)
@click.option('--detector-ckpt', type=click.Path(dir_okay=False), help="frozen detector for the memnet stage")
@_reported
def train(config_path, stage, detector_ckpt):
    """Train the detector, the memory network or both."""
    written = kbvqa.train(_load_config(config_path), stage=stage, detector_checkpoint=detector_ckpt)
    for name, path in sorted(written.items()):
        click.echo("%s: %s" % (name, path))


@main.command("eval")
@config_option
@click.option('--split', 'splits', multiple=True, help="split to evaluate, defaults to eval_splits")
@click.option('--json', 'as_json', is_flag=True, help="print the reports as JSON")
@_reported
def eval_(config_path, splits, as_json):
    """Evaluate the trained checkpoints."""
    reports, mean = kbvqa.evaluate_splits(_load_config(config_path), splits or None)
    if as_json:
        payload = dict((name, r.to_json()) for name, r in reports.items())
        payload["mean"] = mean.to_json()
        click.echo(json.dumps(payload, indent=2, sort_keys=True))
        return
    for report in reports.values():
        click.echo(report.format())
    if len(reports) > 1:
        click.echo(mean.format())


@main.command()
@config_option
@click.option('--cases', callback=_comma_list, default=",".join(kbvqa.ABLATION_CASES), show_default=True,
              help="comma separated ablation cases")
@click.option('--split', default="test", show_default=True)
@click.option('--no-train', is_flag=True, help="reuse the checkpoints of an earlier ablation")
@_reported
def ablate(config_path, cases, split, no_train):
    """Train and evaluate the ablation cases with a shared detector."""
    config = _load_config(config_path)
    quiet = [logging.getLogger("kbvqa.training")]
    level = logging.WARNING if package_logger.getEffectiveLevel() > logging.DEBUG else logging.DEBUG
    with logging_level(quiet, level):
        rows = kbvqa.ablate(config, cases, split, train_models=not no_train)
    click.echo(kbvqa.format_ablation(rows))


@main.command()
@config_option
@click.option('--split', default="test", show_default=True)
@click.option('--ks', callback=_comma_list, default="20,30,40,60,100", show_default=True,
              help="comma separated clue list sizes")
@click.option('--answer', is_flag=True, help="also answer with the trained memory network for every size")
@_reported
def sweep(config_path, split, ks, answer):
    """Clue accuracy, answer recall and optionally QA accuracy for several clue list sizes."""
    rows = kbvqa.sweep_topk(_load_config(config_path), split, [int(k) for k in ks], answer=answer)
    click.echo(kbvqa.format_sweep(rows))


@main.command()
@click.option('--address', type=str, default='localhost', help="address to bind the server to")
@click.option('--port', type=int, default=0, help="port to bind the server to, 0 picks a free one")
@click.option('--provider', '-p', type=str, multiple=True, help="dotted path to a provider class")
@config_option
@click.pass_context
def serve(ctx, address, port, provider, config_path):
    """Serve providers over EPC."""
    debug = ctx.obj["debug"]
    # Silence the loggers before we print the port
    # Clients read the port from the first line of the output
    epclogger = logging.getLogger("epc")
    click_log.basic_config(epclogger)
    epclogger.setLevel(package_logger.level)

    with logging_level([package_logger, epclogger], logging.ERROR):
        server = kbvqa.Server((address, port))
        server.print_port()

    provider = provider + ("kbvqa.KBQAProvider", )
    logger.info("setting the following providers %s", provider)

    providers = load_providers(provider, server, debug)
    logger.debug("all providers initialized: %s", providers)
    if config_path:
        for p in providers:
            if isinstance(p, kbvqa.KBQAProvider):
                p.load(config_path)

    logger.debug("creating chained provider")
    chainedprovider = kbvqa.ChainedProvider(server, providers=providers)
    server.set_provider(chainedprovider)

    logger.debug("serve forever")
    server.serve_forever()
    server.logger.info("server shutdown")


def load_providers(providers, server, debug=False):
    """Instantiate the provider classes at ``providers`` for ``server``.

    A path that cannot be imported is logged and skipped so the remaining providers are
    still served, e.g. ``serve -p mypkg.MyProvider`` next to :class:`kbvqa.KBQAProvider`.

    :param providers: dotted paths like ``kbvqa.KBQAProvider``
    :type providers: :class:`list` of :class:`str`
    :param server: passed to every provider constructor
    :type server: :class:`kbvqa.Server`
    :param debug: log the traceback of skipped paths
    :type debug: :class:`bool`
    :rtype: :class:`list` of :class:`kbvqa.ProviderBase`
    """
    loaded = []
    for path in providers:
        try:
            cls = providermod.get_attr_from_dotted_path(path)
        except (ImportError, ValueError, AttributeError) as err:
            log = logger.exception if debug else logger.error
            log("Skipping provider %s: %s", path, err)
            continue
        loaded.append(cls(server))
    return loaded


@contextlib.contextmanager
def logging_level(loggers, level):
    """Run the block with ``loggers`` at ``level`` and put their own levels back afterwards.

    ``serve`` keeps the port line free of log output this way and ``ablate`` mutes the
    per-epoch training messages.

    :param loggers: :class:`logging.Logger` objects
    :param level: a level name or number
    :type level: :class:`str` | :class:`int`
    """
    levels = {lg: lg.level for lg in loggers}
    for lg in loggers:
        lg.setLevel(level)
    try:
        yield
    finally:
        for lg, lvl in levels.items():
            lg.setLevel(lvl)
