"""Command-line entry points.

Every command takes ``--config`` (YAML/JSON) plus repeatable ``--set key=value``
overrides and writes the resolved config next to its outputs, so a run
directory is enough to reproduce it.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click

from .ablation import ablation_csv, build_corpus, run_ablation, run_region_sweep, sweep_csv
from .config import REGION_SWEEP, ConfigError, RunConfig, dump_config, load_config
from .data import (
    DatasetError,
    DatasetManifest,
    FeatureFileError,
    ReportRecord,
    SyntheticSpec,
    load_manifest,
    read_header,
    write_synthetic_corpus,
)
from .metrics import NLG_COLUMNS, MetricError, corpus_scores
from .tokenizer import tokenize
from .training import (
    Checkpoint,
    CheckpointError,
    TrainingDiverged,
    fit,
    generate_reports,
    make_examples,
    with_vocab,
)
from .transfer import TaskSample, finetune, format_table, summarize

log = logging.getLogger("wsireport")

# exit codes per failure class
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_DIVERGED = 4


class CommandError(click.ClickException):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code

    def show(self, file=None):
        click.echo(f"error: {self.format_message()}", err=True)


def _guard(fn):
    """Map library failures to a one-line diagnostic and a class-specific exit code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            raise CommandError(str(exc), EXIT_CONFIG) from exc
        except TrainingDiverged as exc:
            raise CommandError(f"training diverged: {exc}", EXIT_DIVERGED) from exc
        except FileNotFoundError as exc:
            raise CommandError(f"missing file: {exc.filename or exc}", EXIT_INPUT) from exc
        except (DatasetError, FeatureFileError, CheckpointError, MetricError, OSError) as exc:
            raise CommandError(str(exc).splitlines()[0], EXIT_INPUT) from exc

    return wrapper


def _config_options(fn):
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Override a config entry, e.g. --set train.epochs=5 (repeatable).")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                      help="YAML or JSON run config; defaults apply when omitted.")(fn)
    return fn


def _resolve(config_path: Optional[str], overrides) -> RunConfig:
    if config_path is not None and not Path(config_path).exists():
        raise FileNotFoundError(2, "No such file", config_path)
    return load_config(config_path, list(overrides))


def _run_dir(out: str, cfg: RunConfig) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(dump_config(cfg), encoding="utf-8")
    return path


def _manifest(path: Optional[str], cfg: RunConfig) -> DatasetManifest:
    path = path or cfg.data.manifest
    if path is None:
        raise ConfigError("no manifest given (use --manifest or data.manifest)")
    if not Path(path).exists():
        raise FileNotFoundError(2, "No such file", str(path))
    return load_manifest(path)


def _check_dim(manifest: DatasetManifest, d_in: int) -> None:
    if manifest.entries:
        d = read_header(manifest.resolve(manifest.entries[0]))[1]
        if d != d_in:
            raise ConfigError(f"invalid config key model.encoder.d_in: features have dimension {d}, config says {d_in}")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _nlg_csv(rows: dict[str, dict[str, float]]) -> str:
    lines = [",".join(["split", *NLG_COLUMNS])]
    for name, row in rows.items():
        lines.append(",".join([name, *(f"{row[c]:.6f}" for c in NLG_COLUMNS)]))
    return "\n".join(lines) + "\n"


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Report generation from WSI patch-feature bags."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command()
@_config_options
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Corpus directory.")
@_guard
def synth(config_path, overrides, out):
    """Write a planted synthetic corpus (features, reports, split manifest)."""
    cfg = _resolve(config_path, overrides)
    s = cfg.synth
    spec = SyntheticSpec(num_wsis=s.num_wsis, n_range=(s.n_min, s.n_max), d_in=s.d_in,
                         num_themes=s.num_themes, max_themes_per_wsi=s.max_themes_per_wsi,
                         noise_scale=s.noise_scale, center_scale=s.center_scale, seed=s.seed)
    out_dir = _run_dir(out, cfg)
    manifest = write_synthetic_corpus(out_dir, spec, cfg.data.split_ratios, cfg.data.split_seed)
    counts = {k: len(manifest.ids(k)) for k in ("train", "val", "test")}
    click.echo(f"wrote {len(manifest.entries)} WSIs to {out_dir} ({counts})")


@main.command()
@_config_options
@click.option("--manifest", type=click.Path(dir_okay=False), help="Split manifest (overrides data.manifest).")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Run directory.")
@_guard
def train(config_path, overrides, manifest, out):
    """Train a report generator; keep the best validation BLEU-4 checkpoint."""
    cfg = _resolve(config_path, overrides)
    m = _manifest(manifest, cfg)
    _check_dim(m, cfg.model.encoder.d_in)
    corpus = build_corpus(m, min(cfg.tokenizer.max_len, cfg.model.decoder.max_len), cfg.tokenizer.min_freq)
    run = _run_dir(out, cfg)
    result = fit(with_vocab(cfg.model, corpus.vocab), corpus.train, corpus.vocab, cfg.train,
                 val=corpus.val, metrics_path=run / "metrics.csv")
    result.checkpoint.save(run / "checkpoint.zip")
    held_out = corpus.test or corpus.val
    _write_json(run / "generations.json", generate_reports(result.model, held_out, corpus.vocab))
    click.echo(f"trained {len(result.history)} epochs, final loss {result.final_loss:.4f}; outputs in {run}")


@main.command()
@_config_options
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False))
@click.option("--split", default="test", show_default=True, type=click.Choice(["train", "val", "test"]))
@click.option("--beam-size", type=int, help="Defaults to the checkpoint's decoder beam size.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guard
def generate(config_path, overrides, checkpoint, manifest, split, beam_size, out):
    """Decode reports for one split with a trained checkpoint."""
    cfg = _resolve(config_path, overrides)
    if not Path(checkpoint).exists():
        raise FileNotFoundError(2, "No such file", checkpoint)
    ckpt = Checkpoint.load(checkpoint)
    m = _manifest(manifest, cfg)
    _check_dim(m, ckpt.model_config.encoder.d_in)
    # token ids come from the checkpoint's vocabulary, not a rebuilt one
    entries = m.subset(split)
    examples = make_examples([m.load_bag(e) for e in entries], [ReportRecord(e.wsi_id, e.report) for e in entries],
                             ckpt.vocab, ckpt.model_config.decoder.max_len)
    run = _run_dir(out, cfg)
    _write_json(run / "generations.json", generate_reports(ckpt.build_model(), examples, ckpt.vocab, beam_size))
    click.echo(f"generated {len(examples)} reports into {run / 'generations.json'}")


@main.command("eval-nlg")
@_config_options
@click.option("--generations", required=True, type=click.Path(dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guard
def eval_nlg(config_path, overrides, generations, manifest, out):
    """Score generated reports against the manifest references (six NLG columns)."""
    cfg = _resolve(config_path, overrides)
    if not Path(generations).exists():
        raise FileNotFoundError(2, "No such file", generations)
    gens = json.loads(Path(generations).read_text(encoding="utf-8"))
    m = _manifest(manifest, cfg)
    refs = {e.wsi_id: e.report for e in m.entries}
    missing = sorted(set(gens) - set(refs))
    if missing:
        raise DatasetError(f"generated ids not in manifest: {missing[:5]}")
    ids = sorted(gens)
    score = corpus_scores([tokenize(gens[i]["text"]) for i in ids], [tokenize(refs[i]) for i in ids])
    run = _run_dir(out, cfg)
    (run / "metrics.csv").write_text(_nlg_csv({"all": score.as_row()}), encoding="utf-8")
    click.echo(" ".join(f"{c}={v:.4f}" for c, v in score.as_row().items()))


@main.command()
@_config_options
@click.option("--manifest", type=click.Path(dir_okay=False))
@click.option("--region-sweep", is_flag=True, help="Run the region-size grid instead of the three arms.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guard
def ablate(config_path, overrides, manifest, region_sweep, out):
    """Train Base, +CMC and +CMC+LGH and tabulate validation scores with AVG Δ.

    Seeds come from ``ablation_seeds`` (default: the run seed); scores are
    averaged across seeds.
    """
    cfg = _resolve(config_path, overrides)
    m = _manifest(manifest, cfg)
    _check_dim(m, cfg.model.encoder.d_in)
    corpus = build_corpus(m, min(cfg.tokenizer.max_len, cfg.model.decoder.max_len), cfg.tokenizer.min_freq)
    run = _run_dir(out, cfg)
    if region_sweep:
        results = run_region_sweep(cfg.model, corpus, cfg.train, cfg.seed, REGION_SWEEP)
        text = sweep_csv(results)
        (run / "region_sweep.csv").write_text(text, encoding="utf-8")
    else:
        means, per_seed = run_ablation(cfg.model, corpus, cfg.train, cfg.seeds_for_ablation())
        text = ablation_csv(means)
        (run / "ablation.csv").write_text(text, encoding="utf-8")
        _write_json(run / "ablation_per_seed.json", per_seed)
    click.echo(text, nl=False)


def _task_samples(m: DatasetManifest, kind: str) -> list[TaskSample]:
    samples = []
    for e in m.entries:
        if kind == "classification" and e.label is None:
            raise DatasetError(f"manifest entry {e.wsi_id} has no label")
        if kind == "survival" and e.time is None:
            raise DatasetError(f"manifest entry {e.wsi_id} has no survival time")
        samples.append(TaskSample(e.wsi_id, m.load_bag(e).features, e.label, e.time, bool(e.censored)))
    return samples


def _finetune_command(kind: str, columns: tuple[str, ...]):
    @_config_options
    @click.option("--manifest", type=click.Path(dir_okay=False))
    @click.option("--checkpoint", type=click.Path(dir_okay=False),
                  help="Report-generation checkpoint whose encoder initialises the pre-trained row.")
    @click.option("--out", required=True, type=click.Path(file_okay=False))
    @_guard
    def command(config_path, overrides, manifest, checkpoint, out):
        cfg = _resolve(config_path, overrides)
        ckpt = None
        enc_cfg = cfg.model.encoder
        if checkpoint is not None:
            if not Path(checkpoint).exists():
                raise FileNotFoundError(2, "No such file", checkpoint)
            ckpt = Checkpoint.load(checkpoint)
            enc_cfg = ckpt.model_config.encoder
        m = _manifest(manifest, cfg)
        _check_dim(m, enc_cfg.d_in)
        samples = _task_samples(m, kind)
        run = _run_dir(out, cfg)
        rows = {}
        if ckpt is not None:
            rows["Pre-trained"] = finetune(samples, kind, enc_cfg, cfg.finetune, checkpoint=ckpt)
        rows["Scratch"] = finetune(samples, kind, enc_cfg, cfg.finetune)
        if any(not r for r in rows.values()):
            raise MetricError("no fold produced a usable evaluation split")
        text = format_table({name: summarize(r, columns) for name, r in rows.items()}, columns)
        (run / "metrics.csv").write_text(text, encoding="utf-8")
        _write_json(run / "folds.json", rows)
        click.echo(text, nl=False)

    return command


main.command("finetune-cls", help="Monte Carlo fine-tuning for slide classification (Acc, AUC).")(
    _finetune_command("classification", ("Acc", "AUC"))
)
main.command("finetune-surv", help="Monte Carlo fine-tuning for discrete-time survival (c-Index).")(
    _finetune_command("survival", ("c-Index",))
)


if __name__ == "__main__":  # pragma: no cover
    main()
