"""Arm-by-arm ablation and region-size sweeps over one prepared corpus."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import ARM_LABELS, ModelConfig, TrainConfig
from .data import DatasetManifest, ReportRecord
from .metrics import NLG_COLUMNS
from .tokenizer import Vocabulary, build_vocab
from .training import Example, evaluate_nlg, fit, make_examples, with_vocab

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    train: list[Example]
    val: list[Example]
    test: list[Example]
    vocab: Vocabulary


def build_corpus(manifest: DatasetManifest, max_len: int, min_freq: int = 3) -> Corpus:
    """Load every bag of a split manifest; the vocabulary comes from the train split only."""
    if not manifest.split:
        raise ValueError("manifest has no train/val/test split")
    train_reports = [ReportRecord(e.wsi_id, e.report) for e in manifest.subset("train")]
    if not train_reports:
        raise ValueError("manifest has an empty train split")
    vocab = build_vocab(train_reports, min_freq=min_freq)
    parts = []
    for name in ("train", "val", "test"):
        entries = manifest.subset(name)
        bags = [manifest.load_bag(e) for e in entries]
        reports = [ReportRecord(e.wsi_id, e.report) for e in entries]
        parts.append(make_examples(bags, reports, vocab, max_len))
    return Corpus(*parts, vocab)


def run_arm(model_cfg: ModelConfig, corpus: Corpus, train_cfg: TrainConfig, seed: int,
            eval_split: str = "val") -> dict[str, float]:
    cfg = train_cfg.model_copy(update={"seed": seed})
    result = fit(with_vocab(model_cfg, corpus.vocab), corpus.train, corpus.vocab, cfg, val=corpus.val)
    examples = getattr(corpus, eval_split)
    return evaluate_nlg(result.model, examples, corpus.vocab)


def mean_rows(rows: Sequence[dict[str, float]]) -> dict[str, float]:
    return {c: float(np.mean([r[c] for r in rows])) for c in NLG_COLUMNS}


def avg_delta(row: dict[str, float], base: dict[str, float]) -> Optional[float]:
    """Mean relative improvement over ``base`` across the six metrics, in percent.

    Metrics where the base scores zero are skipped; None if all are.
    """
    ratios = [(row[c] - base[c]) / base[c] * 100.0 for c in NLG_COLUMNS if base[c] != 0]
    return float(np.mean(ratios)) if ratios else None


def run_ablation(model_cfg: ModelConfig, corpus: Corpus, train_cfg: TrainConfig, seeds: Iterable[int],
                 arms: Sequence[str] = ("base", "cmc", "cmc_lgh"), eval_split: str = "val"):
    """Train every arm under every seed; return {arm: mean metrics} and per-seed rows."""
    seeds = list(seeds)
    per_seed: dict[str, list[dict]] = {}
    for arm in arms:
        cfg = model_cfg.model_copy(update={"arm": arm})
        per_seed[arm] = []
        for seed in seeds:
            row = run_arm(cfg, corpus, train_cfg, seed, eval_split)
            log.info("arm %s seed %d BLEU-4 %.4f", arm, seed, row["BLEU-4"])
            per_seed[arm].append(row)
    return {arm: mean_rows(rows) for arm, rows in per_seed.items()}, per_seed


def run_region_sweep(model_cfg: ModelConfig, corpus: Corpus, train_cfg: TrainConfig, seed: int,
                     sizes: Sequence[int], eval_split: str = "val") -> dict[int, dict[str, float]]:
    out = {}
    for s in sizes:
        enc = model_cfg.encoder.model_copy(update={"region_size": s})
        cfg = model_cfg.model_copy(update={"encoder": enc, "arm": "cmc_lgh"})
        out[s] = run_arm(cfg, corpus, train_cfg, seed, eval_split)
    return out


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def ablation_csv(means: dict[str, dict[str, float]]) -> str:
    """Rows Base / +CMC / +CMC+LGH with the six metrics and AVG Δ ('-' for Base)."""
    lines = [",".join(["Methods", *NLG_COLUMNS, "AVG Δ"])]
    base = means.get("base")
    for arm, row in means.items():
        if arm == "base" or base is None:
            delta = "-"
        else:
            d = avg_delta(row, base)
            delta = "n/a" if d is None else f"{d:.2f}%"
        lines.append(",".join([ARM_LABELS.get(arm, arm), *(_fmt(row[c]) for c in NLG_COLUMNS), delta]))
    return "\n".join(lines) + "\n"


def sweep_csv(results: dict[int, dict[str, float]]) -> str:
    lines = [",".join(["Methods", *NLG_COLUMNS])]
    for size, row in results.items():
        lines.append(",".join([f"Region Size {size}", *(_fmt(row[c]) for c in NLG_COLUMNS)]))
    return "\n".join(lines) + "\n"
