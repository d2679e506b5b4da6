"""Hardest-negative bidirectional ranking loss and the training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .config import RunConfig
from .evaluation import recall_at_k, rsum
from .model import SgrafModel
from .nn import INFERENCE, TRAINING, AdamState, adam_step, piecewise_lr
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "branch", "loss", "i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10")


def batch_similarity_matrix(raw_images, captions, model: SgrafModel, branch: str, mode: str = INFERENCE) -> Tensor:
    """B x B matrix of scores between every image and every caption of a batch."""
    if len(raw_images) != len(captions):
        raise ValueError(f"{len(raw_images)} images but {len(captions)} captions")
    return model.score_matrix(raw_images, captions, (branch,), mode)[branch]


def hardest_negatives(scores: np.ndarray, image_ids: Optional[Sequence[int]] = None):
    """Column of the hardest caption per row and row of the hardest image per column.

    Entries whose image id matches the positive's image id are never chosen.
    """
    n = scores.shape[0]
    ids = np.arange(n) if image_ids is None else np.asarray(image_ids)
    same = ids[:, None] == ids[None, :]
    masked = np.where(same, -np.inf, scores)
    return masked.argmax(axis=1), masked.argmax(axis=0)


def ranking_loss(scores: Tensor, margin: float = 0.2, image_ids: Optional[Sequence[int]] = None) -> Tensor:
    """Mean over positives of the two hinge terms against the hardest negatives.

    ``scores`` is B x B with the positives on the diagonal. The argmax picks
    are constants; gradients reach only the diagonal and the chosen entries.
    """
    n = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != n:
        raise ValueError(f"expected a square score matrix, got {scores.shape}")
    if n < 2:
        raise ValueError("ranking_loss needs a batch of at least 2 pairs")
    if image_ids is not None and len(set(image_ids)) < 2:
        raise ValueError("batch contains no negative image")
    rows = np.arange(n)
    hard_txt, hard_img = hardest_negatives(scores.data, image_ids)
    pos = scores[rows, rows]
    cost_txt = T.relu(T.add(T.sub(scores[rows, hard_txt], pos), margin))
    cost_img = T.relu(T.add(T.sub(scores[hard_img, rows], pos), margin))
    return T.mean(T.add(cost_txt, cost_img))


@dataclass
class PairSet:
    """Image-caption pairs drawn from a feature array and a caption list."""

    features: np.ndarray  # [n_images, K, d_raw]
    captions: List[List[int]]
    image_of_caption: np.ndarray  # [n_captions]

    def __post_init__(self):
        self.image_of_caption = np.asarray(self.image_of_caption, dtype=np.intp)
        if len(self.captions) != len(self.image_of_caption):
            raise ValueError("every caption needs an image index")
        if len(self.captions) == 0:
            raise ValueError("empty dataset")
        if self.image_of_caption.max() >= len(self.features) or self.image_of_caption.min() < 0:
            raise ValueError("caption refers to a missing image")

    def __len__(self) -> int:
        return len(self.captions)

    @classmethod
    def from_bank(cls, bank, captions: Sequence[Sequence[int]], start: int = 0, stop: Optional[int] = None) -> "PairSet":
        """Images ``start:stop`` of a feature bank with their captions, re-indexed from zero."""
        stop = bank.n_images if stop is None else stop
        if not 0 <= start < stop <= bank.n_images:
            raise ValueError(f"image range {start}:{stop} outside 0:{bank.n_images}")
        caps, owner = [], []
        for i in range(start, stop):
            for c in bank.captions_of_image[i]:
                if not 0 <= c < len(captions):
                    raise IndexError(f"manifest names caption {c}, only {len(captions)} captions exist")
                caps.append(list(captions[c]))
                owner.append(i - start)
        return cls(bank.features[start:stop].astype(np.float64), caps, np.asarray(owner))

    def captions_per_image(self) -> List[List[int]]:
        out = [[] for _ in range(len(self.features))]
        for c, i in enumerate(self.image_of_caption):
            out[int(i)].append(c)
        return out


@dataclass
class EpochRecord:
    epoch: int
    branch: str
    loss: float
    recall: Optional[Dict[str, float]] = None

    def row(self) -> List[str]:
        r = self.recall or {}
        vals = [r.get(k) for k in LOG_FIELDS[3:]]
        return [str(self.epoch), self.branch, repr(self.loss)] + ["" if v is None else repr(v) for v in vals]


@dataclass
class TrainResult:
    models: Dict[str, SgrafModel]
    log: List[EpochRecord] = field(default_factory=list)

    def write_log(self, path: Union[str, Path]) -> None:
        write_log(self.log, path)


def write_log(records: Sequence[EpochRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_FIELDS)
        for rec in records:
            w.writerow(rec.row())


def evaluate_recall(model: SgrafModel, data: PairSet, branch: Optional[str] = None) -> Dict[str, float]:
    """R@1/5/10 in both directions; with ``branch=None`` a joint model's heads are averaged."""
    captions = data.captions
    if branch is None:
        scores = np.mean([model.score_array(data.features, captions, b) for b in model.branches], axis=0)
    else:
        scores = model.score_array(data.features, captions, branch)
    return recall_at_k(scores, data.captions_per_image())


def _batches(n: int, size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[s:s + size] for s in range(0, n, size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return [b for b in batches if len(b) >= 2]


def _fit(
    model: SgrafModel,
    branches: Sequence[str],
    data: PairSet,
    epochs: int,
    rng: np.random.Generator,
    label: str,
    validation: Optional[PairSet],
    log: List[EpochRecord],
) -> SgrafModel:
    c = model.config
    params = model.named_parameters()
    opt = AdamState(learning_rate=c.lr)
    best, best_state = -np.inf, None
    for epoch in range(epochs):
        opt.learning_rate = piecewise_lr(c.lr, epoch, c.lr_decay_epochs, c.lr_decay)
        losses = []
        for batch in _batches(len(data), c.batch_size, rng):
            img_idx = data.image_of_caption[batch]
            caps = [data.captions[i] for i in batch]
            scores = model.score_matrix(data.features[img_idx], caps, branches, TRAINING)
            loss = None
            for b in branches:
                term = ranking_loss(scores[b], c.margin, img_idx)
                loss = term if loss is None else T.add(loss, term)
            model.zero_grad()
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, opt)
            losses.append(float(loss.data))
        recall = None
        if validation is not None:
            recall = evaluate_recall(model, validation, None if len(branches) > 1 else branches[0])
            score = rsum(recall)
            if score > best:
                best, best_state = score, model.state_dict()
        rec = EpochRecord(epoch, label, float(np.mean(losses)) if losses else float("nan"), recall)
        log.append(rec)
        logger.info("epoch %d [%s] loss %.5f", epoch, label, rec.loss)
    if best_state is not None:
        model.load_state_dict(best_state)
    return model


def train(
    data: PairSet,
    config: RunConfig,
    validation: Optional[PairSet] = None,
    model: Optional[SgrafModel] = None,
) -> TrainResult:
    """Train with the configured strategy.

    ``joint``: one model carrying both heads, loss = sum of the per-head losses.
    ``independent``: one separate model per head, trained one after the other.
    When ``validation`` is given the epoch with the best R-sum is restored.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if config.strategy not in ("joint", "independent"):
        raise ValueError(f"invalid strategy {config.strategy!r}")
    rng = np.random.default_rng(config.seed)
    log: List[EpochRecord] = []
    if config.strategy == "joint":
        model = model or SgrafModel(config, np.random.default_rng(config.seed))
        _fit(model, model.branches, data, config.epochs, rng, "joint", validation, log)
        return TrainResult({"joint": model}, log)
    if model is not None:
        raise ValueError("independent training builds its own models")
    models = {}
    for k, branch in enumerate(config.branches):
        sub = config.replace(branches=(branch,), seed=config.seed + k)
        m = SgrafModel(sub, np.random.default_rng(sub.seed))
        _fit(m, (branch,), data, config.epochs_for(branch), rng, branch, validation, log)
        models[branch] = m
    return TrainResult(models, log)
