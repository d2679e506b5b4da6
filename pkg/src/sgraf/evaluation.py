"""Bidirectional Recall@K, score fusion, and per-pair inspection records."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

DEFAULT_KS = (1, 5, 10)


def _ranks_of_truth(scores: np.ndarray, truth: Sequence[Sequence[int]]) -> np.ndarray:
    """Best (0-based) rank of any ground-truth column for every row; ties go to the lower index."""
    ranks = np.empty(len(truth), dtype=np.intp)
    for i, gold in enumerate(truth):
        if len(gold) == 0:
            raise ValueError(f"query {i} has no ground-truth item")
        order = np.argsort(-scores[i], kind="stable")
        position = np.empty_like(order)
        position[order] = np.arange(len(order))
        ranks[i] = position[list(gold)].min()
    return ranks


def recall_at_k(
    scores: np.ndarray,
    captions_of_image: Sequence[Sequence[int]],
    ks: Sequence[int] = DEFAULT_KS,
) -> Dict[str, float]:
    """Sentence retrieval (``i2t_r*``) and image retrieval (``t2i_r*``) recall.

    Args:
        scores: [n_images, n_captions] similarity matrix.
        captions_of_image: caption column indices belonging to each image row.
        ks: cut-offs.

    Returns:
        Mapping like ``{"i2t_r1": ..., "t2i_r10": ...}`` with fractions in [0, 1].
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != len(captions_of_image):
        raise ValueError("score rows must match the ground-truth map")
    if len(captions_of_image) == 0:
        raise ValueError("empty ground truth")
    image_of = np.full(scores.shape[1], -1)
    for i, caps in enumerate(captions_of_image):
        image_of[list(caps)] = i
    if (image_of < 0).any():
        raise ValueError("every caption needs a ground-truth image")
    i2t = _ranks_of_truth(scores, captions_of_image)
    t2i = _ranks_of_truth(scores.T, [[i] for i in image_of])
    out = {}
    for k in ks:
        out[f"i2t_r{k}"] = float(np.mean(i2t < k))
    for k in ks:
        out[f"t2i_r{k}"] = float(np.mean(t2i < k))
    return out


def rsum(recall: Dict[str, float]) -> float:
    return 100.0 * sum(recall.values())


def fold_recall(
    scores: np.ndarray,
    captions_of_image: Sequence[Sequence[int]],
    fold_count: int,
    fold_size: int,
    ks: Sequence[int] = DEFAULT_KS,
):
    """Recall averaged over consecutive image folds; returns (mean, per-fold list)."""
    if fold_count < 1 or fold_size < 1:
        raise ValueError("fold_count and fold_size must be positive")
    if fold_count * fold_size > len(captions_of_image):
        raise ValueError("folds exceed the number of images")
    per_fold = []
    for f in range(fold_count):
        imgs = range(f * fold_size, (f + 1) * fold_size)
        cols = [c for i in imgs for c in captions_of_image[i]]
        local = {c: j for j, c in enumerate(cols)}
        sub = scores[np.ix_(list(imgs), cols)]
        gt = [[local[c] for c in captions_of_image[i]] for i in imgs]
        per_fold.append(recall_at_k(sub, gt, ks))
    mean = {k: float(np.mean([r[k] for r in per_fold])) for k in per_fold[0]}
    return mean, per_fold


def fuse_scores(s_sgr: np.ndarray, s_saf: np.ndarray) -> np.ndarray:
    a, b = np.asarray(s_sgr), np.asarray(s_saf)
    if a.shape != b.shape:
        raise ValueError(f"cannot fuse score matrices of shapes {a.shape} and {b.shape}")
    return (a + b) / 2.0


def write_metrics(rows: Sequence[Dict[str, object]], path: Union[str, Path]) -> None:
    """Metrics table in the training-log column layout."""
    from .training import LOG_FIELDS

    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS, restval="")
        w.writeheader()
        for row in rows:
            w.writerow(row)


# inspection -----------------------------------------------------------


@dataclass
class InspectionRecord:
    labels: List[str]
    beta: Optional[List[float]]
    influence: Optional[List[float]]
    scores: Dict[str, float]
    pair: Optional[int] = None

    def to_json(self) -> str:
        nodes = [
            {
                "token": lab,
                "beta": None if self.beta is None else self.beta[i],
                "influence": None if self.influence is None else self.influence[i],
            }
            for i, lab in enumerate(self.labels)
        ]
        return json.dumps({"pair": self.pair, "nodes": nodes, "scores": self.scores})


def _cosine_rows(a: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    num = (a * b).sum(axis=-1)
    return num / (np.maximum(np.linalg.norm(a, axis=-1), eps) * np.maximum(np.linalg.norm(b, axis=-1), eps))


def inspect_pair(raw_image, caption: Sequence[int], model, vocab: Optional[Sequence[str]] = None, pair: Optional[int] = None):
    """SAF weights, SGR influence and the three head scores for one pair.

    Influence of node p is ``1 - cos(final reasoned node, initial node p)``;
    it lies in [0, 2].
    """
    from . import saf as saf_mod
    from . import sgr as sgr_mod
    from .model import ModelStateError

    if model is None or (model.sgr is None and model.saf is None):
        raise ModelStateError("inspection needs a model with an SGR or SAF head")
    c = model.config
    raw = np.asarray(raw_image, dtype=np.float64)[None]
    ((_, text),) = model.encode_texts([list(caption)])
    nodes = model.cross_nodes(model.encode_images(raw), text)
    initial = nodes.stacked.data[0, 0]

    labels = []
    if c.use_local:
        if c.direction == "t2i":
            labels = [vocab[t] if vocab is not None and 0 <= t < len(vocab) else str(t) for t in caption]
        else:
            labels = [f"region{i}" for i in range(initial.shape[0] - int(c.use_global))]
    if c.use_global:
        labels.append("<global>")

    scores = {"ave": float(model.ave_score(nodes.stacked).data[0, 0])}
    beta = influence = None
    if model.saf is not None:
        w = saf_mod.saf_weights(nodes, model.saf, "inference")
        beta = [float(x) for x in w.beta.data[0, 0]]
        scores["saf"] = float(saf_mod.head(w.aggregated, model.saf).data[0, 0])
    if model.sgr is not None:
        state = sgr_mod.reason(nodes, model.sgr)
        final = sgr_mod.readout(state.nodes, nodes.has_global).data[0, 0]
        influence = [float(x) for x in 1.0 - _cosine_rows(final[None], initial, c.eps)]
        scores["sgr"] = float(sgr_mod.sgr_score(nodes, model.sgr).data[0, 0])
    return InspectionRecord(labels, beta, influence, scores, pair)


def write_inspection(records: Sequence[InspectionRecord], path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def read_inspection(path: Union[str, Path]) -> List[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
