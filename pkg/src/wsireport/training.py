"""End-to-end training of the report generator."""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, TrainConfig
from .metrics import NLG_COLUMNS, corpus_scores
from .model import ReportGenerator
from .tokenizer import PAD, Vocabulary, decode, encode, sequence_length, tokenize

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def cross_entropy_loss(logits: torch.Tensor, targets: torch.Tensor, label_smoothing: float = 0.0) -> torch.Tensor:
    """Mean NLL over non-PAD positions. ``logits`` (..., T, V), ``targets`` (..., T)."""
    flat_t = targets.reshape(-1)
    if not bool((flat_t != PAD).any()):
        raise ValueError("all target positions are padding")
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), flat_t, ignore_index=PAD, label_smoothing=label_smoothing
    )


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate used during (0-based) ``epoch``."""
    return cfg.learning_rate * cfg.epoch_decay ** (epoch // cfg.decay_every)


@dataclass
class Example:
    wsi_id: str
    features: np.ndarray
    token_ids: list[int]
    text: str


def make_examples(bags, reports, vocab: Vocabulary, max_len: int) -> list[Example]:
    by_id = {r.wsi_id: r.text for r in reports}
    return [Example(b.wsi_id, b.features, encode(by_id[b.wsi_id], vocab, max_len), by_id[b.wsi_id]) for b in bags]


def _batch_targets(batch: Sequence[Example]) -> torch.Tensor:
    # padding only trails, so trimming to the longest real length is lossless
    t = max(sequence_length(e.token_ids) for e in batch)
    return torch.tensor([e.token_ids[:t] for e in batch], dtype=torch.long)


def with_vocab(model_cfg: ModelConfig, vocab: Vocabulary) -> ModelConfig:
    dec = model_cfg.decoder.model_copy(update={"vocab_size": len(vocab)})
    return model_cfg.model_copy(update={"decoder": dec})


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state: dict[str, np.ndarray]
    vocab: Vocabulary
    epoch: int = 0
    best_metric: Optional[float] = None
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ReportGenerator, vocab: Vocabulary, **kw) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().astype(np.float32).copy() for k, v in model.state_dict().items()}
        return cls(model.cfg, state, vocab, **kw)

    def build_model(self) -> ReportGenerator:
        model = ReportGenerator(self.model_config, seed=self.seed)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})
        model.eval()
        return model

    def save(self, path: str | Path) -> None:
        buf = io.BytesIO()
        np.savez(buf, **{k: self.state[k] for k in sorted(self.state)})
        meta = {"epoch": self.epoch, "best_metric": self.best_metric, "seed": self.seed, **self.extra}
        files = {
            "params.npz": buf.getvalue(),
            "vocab.json": self.vocab.to_json().encode(),
            "config.json": json.dumps(self.model_config.model_dump(mode="json"), indent=2, sort_keys=True).encode(),
            "meta.json": json.dumps(meta, indent=2, sort_keys=True).encode(),
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, data in files.items():
                info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
                zf.writestr(info, data)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            with zipfile.ZipFile(path) as zf:
                params = np.load(io.BytesIO(zf.read("params.npz")))
                state = {k: params[k] for k in params.files}
                vocab = Vocabulary.from_json(zf.read("vocab.json").decode())
                cfg = ModelConfig.model_validate_json(zf.read("config.json"))
                meta = json.loads(zf.read("meta.json"))
        except (OSError, KeyError, zipfile.BadZipFile) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        epoch = meta.pop("epoch", 0)
        best = meta.pop("best_metric", None)
        seed = meta.pop("seed", 0)
        return cls(cfg, state, vocab, epoch, best, seed, meta)


# ---------------------------------------------------------------- evaluation


def generate_reports(model: ReportGenerator, examples: Sequence[Example], vocab: Vocabulary,
                     beam_size: Optional[int] = None) -> dict[str, dict]:
    out = {}
    for ex in examples:
        g = model.generate(ex.features, beam_size=beam_size)
        out[ex.wsi_id] = {"text": decode(g.token_ids, vocab), "log_prob": g.log_prob}
    return out


def evaluate_nlg(model: ReportGenerator, examples: Sequence[Example], vocab: Vocabulary,
                 beam_size: Optional[int] = None) -> dict[str, float]:
    gens = generate_reports(model, examples, vocab, beam_size)
    cands = [tokenize(gens[e.wsi_id]["text"]) for e in examples]
    refs = [tokenize(decode(e.token_ids, vocab)) for e in examples]
    return corpus_scores(cands, refs).as_row()


# ---------------------------------------------------------------- fitting


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list[dict]
    model: ReportGenerator

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"]


def train_epoch(model, optimizer, examples, order, cfg: TrainConfig) -> float:
    model.train()
    total, count = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        batch = [examples[i] for i in order[start : start + cfg.batch_size]]
        targets = _batch_targets(batch)
        logits = model([e.features for e in batch], targets)
        loss = cross_entropy_loss(logits, targets[:, 1:], cfg.label_smoothing)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss.item()} on batch {[e.wsi_id for e in batch]}")
        optimizer.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        n_tok = int((targets[:, 1:] != PAD).sum())
        total += loss.item() * n_tok
        count += n_tok
    return total / count


def fit(
    model_cfg: ModelConfig,
    train: Sequence[Example],
    vocab: Vocabulary,
    cfg: TrainConfig,
    val: Sequence[Example] = (),
    model: Optional[ReportGenerator] = None,
    metrics_path: Optional[str | Path] = None,
) -> FitResult:
    """Adam with per-epoch multiplicative learning-rate decay.

    Keeps the parameters with the best validation BLEU-4 (earliest on ties);
    without a validation set the final parameters are kept.
    """
    torch.manual_seed(cfg.seed)
    if model is None:
        model = ReportGenerator(model_cfg, seed=cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda e: cfg.epoch_decay ** (e // cfg.decay_every)
    )
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_state, best_metric, best_epoch = None, -math.inf, -1
    for epoch in range(cfg.epochs):
        lr = optimizer.param_groups[0]["lr"]
        order = rng.permutation(len(train))
        loss = train_epoch(model, optimizer, train, order, cfg)
        scheduler.step()
        row = {"epoch": epoch, "lr": lr, "loss": loss}
        last = epoch == cfg.epochs - 1 or (cfg.stop_loss is not None and loss < cfg.stop_loss)
        if val and ((epoch + 1) % cfg.eval_every == 0 or last):
            row.update(evaluate_nlg(model, val, vocab, cfg.eval_beam_size))
            if row["BLEU-4"] > best_metric:
                best_metric, best_epoch = row["BLEU-4"], epoch
                best_state = copy.deepcopy(model.state_dict())
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f %s", epoch, lr, loss,
                 " ".join(f"{k}={row[k]:.3f}" for k in NLG_COLUMNS if k in row))
        if metrics_path is not None:
            write_metric_log(metrics_path, history)
        if last:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = len(history) - 1
    model.eval()
    ckpt = Checkpoint.from_model(model, vocab, epoch=best_epoch,
                                 best_metric=None if best_state is None else best_metric, seed=cfg.seed)
    return FitResult(ckpt, history, model)


def write_metric_log(path: str | Path, history: Sequence[dict]) -> None:
    cols = ["epoch", "loss", *NLG_COLUMNS]
    lines = [",".join(cols)]
    for row in history:
        vals = [str(row["epoch"]), f"{row['loss']:.6f}"]
        vals += [f"{row[c]:.6f}" if c in row else "" for c in NLG_COLUMNS]
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
