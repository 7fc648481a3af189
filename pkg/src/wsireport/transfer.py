"""Slide-level transfer heads on top of the hierarchical encoder.

Region representations are pooled into one WSI vector with gated attention,
then mapped to class probabilities or to discrete-time survival hazards.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig, FinetuneConfig
from .data import DatasetManifest, ManifestEntry, split_dataset
from .encoder import LGHEncoder
from .layers import GatedAttentionPool, init_linear_
from .metrics import MetricError, SurvivalRecord, binary_and_multiclass_scores, c_index
from .model import seeded

log = logging.getLogger(__name__)

TaskKind = Literal["classification", "survival"]


@dataclass
class TaskSample:
    wsi_id: str
    features: np.ndarray
    label: Optional[int] = None
    time: Optional[float] = None
    censored: bool = False


class TransferModel(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig, kind: TaskKind, num_outputs: int, seed: int = 0):
        super().__init__()
        self.kind = kind
        with seeded(seed, "encoder"):
            self.encoder = LGHEncoder(enc_cfg)
        with seeded(seed, "transfer_head"):
            self.wsi_pool = GatedAttentionPool(enc_cfg.d_model, enc_cfg.pool_dim)
            self.head = nn.Linear(enc_cfg.d_model, num_outputs)
            init_linear_(self.wsi_pool)
            init_linear_(self.head)

    def head_parameters(self):
        return [*self.wsi_pool.parameters(), *self.head.parameters()]

    def pool_wsi(self, region_reps: torch.Tensor):
        """(N, d) region representations -> (d,) slide vector and (N,) weights."""
        return self.wsi_pool(region_reps)

    def _logits(self, features) -> torch.Tensor:
        x = torch.tensor(np.asarray(features)) if not torch.is_tensor(features) else features
        x = x.to(self.head.weight.dtype)
        pooled, _ = self.pool_wsi(self.encoder(x).reps)
        return self.head(pooled)

    def classify_forward(self, features) -> torch.Tensor:
        return torch.softmax(self._logits(features), dim=-1)

    def survival_forward(self, features):
        """Per-bin hazards and a scalar risk (higher means earlier expected event)."""
        return hazards_and_risk(self._logits(features))

    def forward(self, features):
        return self._logits(features)


def hazards_and_risk(hazard_logits: torch.Tensor):
    """Per-bin hazards and risk = -sum_b log S_b, S_b the cumulative survival.

    Zero when every hazard vanishes and strictly increasing in each hazard logit.
    """
    hazards = torch.sigmoid(hazard_logits)
    # log(1 - sigmoid(z)) = -softplus(z), stable for large logits
    log_surv = torch.cumsum(-F.softplus(hazard_logits), dim=-1)
    risk = -log_surv.sum(dim=-1)
    return hazards, risk


def discretize_times(times: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.digitize(times, edges, right=False)


def quantile_edges(train_times: Sequence[float], bins: int) -> np.ndarray:
    """Interior bin edges at training-set quantiles (``bins - 1`` values)."""
    qs = np.linspace(0, 1, bins + 1)[1:-1]
    return np.quantile(np.asarray(train_times, dtype=np.float64), qs)


def survival_nll(hazard_logits: torch.Tensor, bin_idx: int, censored: bool) -> torch.Tensor:
    """Discrete-time censored negative log-likelihood for one sample.

    Events in bin k contribute log S(k-1) + log h_k; censored samples in bin k
    contribute log S(k).
    """
    log_h = -F.softplus(-hazard_logits)
    log_1mh = -F.softplus(hazard_logits)
    if censored:
        return -log_1mh[: bin_idx + 1].sum()
    return -(log_1mh[:bin_idx].sum() + log_h[bin_idx])


def load_pretrained_encoder(model: TransferModel, checkpoint) -> None:
    """Copy the encoder weights of a report-generation checkpoint."""
    if not checkpoint.model_config.use_lgh:
        raise ValueError(f"checkpoint arm {checkpoint.model_config.arm!r} has no hierarchical encoder")
    prefix = "encoder."
    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in checkpoint.state.items() if k.startswith(prefix)}
    model.encoder.load_state_dict(state)


def _train(model: TransferModel, samples: Sequence[TaskSample], cfg: FinetuneConfig, edges, seed: int) -> None:
    if cfg.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)
    model.train()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            losses = []
            for s in batch:
                logits = model(s.features)
                if model.kind == "classification":
                    losses.append(F.cross_entropy(logits.unsqueeze(0), torch.tensor([s.label])))
                else:
                    k = int(discretize_times(np.array([s.time]), edges)[0])
                    losses.append(survival_nll(logits, k, s.censored))
            loss = torch.stack(losses).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()


@torch.no_grad()
def predict(model: TransferModel, samples: Sequence[TaskSample]) -> dict[str, object]:
    """Class probabilities (list) or survival risk (float) per WSI id."""
    model.eval()
    if model.kind == "classification":
        return {s.wsi_id: model.classify_forward(s.features).double().tolist() for s in samples}
    return {s.wsi_id: float(model.survival_forward(s.features)[1]) for s in samples}


def evaluate(model: TransferModel, samples: Sequence[TaskSample], predictions=None) -> dict[str, float]:
    preds = predictions if predictions is not None else predict(model, samples)
    if model.kind == "classification":
        probs = np.array([preds[s.wsi_id] for s in samples])
        acc, auc = binary_and_multiclass_scores(probs, [s.label for s in samples])
        return {"Acc": acc, "AUC": auc}
    records = [SurvivalRecord(preds[s.wsi_id], s.time, s.censored) for s in samples]
    return {"c-Index": c_index(records)}


def _fold_split(samples: Sequence[TaskSample], cfg: FinetuneConfig, fold: int):
    entries = [ManifestEntry(s.wsi_id, "", "-") for s in samples]
    split = split_dataset(DatasetManifest(entries), cfg.split_ratios, seed=cfg.seed + fold).split
    train = [s for s in samples if split[s.wsi_id] == "train"]
    test = [s for s in samples if split[s.wsi_id] == "test"]
    if not test:
        test = [s for s in samples if split[s.wsi_id] == "val"]
    return train, test


def finetune(
    samples: Sequence[TaskSample],
    kind: TaskKind,
    enc_cfg: EncoderConfig,
    cfg: FinetuneConfig,
    checkpoint=None,
    num_classes: Optional[int] = None,
    keep_predictions: bool = False,
) -> list[dict]:
    """Monte Carlo cross-validation: per fold resample the split, fine-tune a
    fresh copy (pre-trained encoder if ``checkpoint`` is given) and evaluate on
    the held-out split. Returns one metric dict per completed fold, with the
    held-out predictions under "predictions" when ``keep_predictions``."""
    if kind == "classification":
        num_outputs = num_classes or (max(s.label for s in samples) + 1)
    else:
        if any(s.time is None or s.time <= 0 for s in samples):
            raise ValueError("survival samples need positive event times")
        num_outputs = cfg.survival_bins
    results = []
    for fold in range(cfg.monte_carlo_folds):
        train, test = _fold_split(samples, cfg, fold)
        if kind == "classification" and len({s.label for s in test}) < 2:
            warnings.warn(f"fold {fold}: single-class evaluation split, skipped")
            continue
        model = TransferModel(enc_cfg, kind, num_outputs, seed=cfg.seed + fold)
        if checkpoint is not None:
            load_pretrained_encoder(model, checkpoint)
        edges = None
        if kind == "survival":
            event_times = [s.time for s in train if not s.censored] or [s.time for s in train]
            edges = quantile_edges(event_times, cfg.survival_bins)
        torch.manual_seed(cfg.seed + fold)
        _train(model, train, cfg, edges, seed=cfg.seed + fold)
        preds = predict(model, test)
        try:
            row = evaluate(model, test, preds)
        except MetricError as exc:
            warnings.warn(f"fold {fold}: {exc}, skipped")
            continue
        row["fold"] = fold
        if keep_predictions:
            row["predictions"] = preds
        results.append(row)
        log.info("fold %d %s", fold, row)
    return results


def summarize(rows: Sequence[dict], columns: Sequence[str]) -> dict[str, tuple[float, float]]:
    """Mean and population std per metric column."""
    out = {}
    for c in columns:
        vals = np.array([r[c] for r in rows], dtype=np.float64)
        out[c] = (float(vals.mean()), float(vals.std()))
    return out


def format_table(summaries: dict[str, dict[str, tuple[float, float]]], columns: Sequence[str]) -> str:
    """CSV with one row per method and ``mean±std`` cells."""
    lines = [",".join(["Methods", *columns])]
    for method, summ in summaries.items():
        cells = [f"{summ[c][0]:.3f}±{summ[c][1]:.3f}" for c in columns]
        lines.append(",".join([method, *cells]))
    return "\n".join(lines) + "\n"
