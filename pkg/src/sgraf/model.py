"""The full matching network: encoders, similarity nodes, and the SGR/SAF/AVE heads."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import saf as saf_mod
from . import sgr as sgr_mod
from . import tensor as T
from .config import RunConfig
from .encoders import EncoderParams, TextualFeatures, VisualFeatures, encode_images, encode_texts
from .nn import INFERENCE, uniform_init
from .simrep import SimilarityNodes, SimilarityParams, compute_nodes
from .tensor import Tensor


class ModelStateError(RuntimeError):
    pass


class SgrafModel:
    """Parameters and forward computation for one configuration.

    ``config.branches`` selects which heads exist; a joint model carries both
    ``sgr`` and ``saf`` on top of one shared encoder and similarity layer.
    """

    def __init__(self, config: RunConfig, rng: Optional[np.random.Generator] = None):
        if config.vocab_size < 1:
            raise ModelStateError("config.vocab_size must be set before building a model")
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        self.encoder = EncoderParams.init(rng, c.d_raw, c.d, c.vocab_size, c.embed_dim, c.attn_hidden)
        self.similarity = SimilarityParams.init(rng, c.d, c.m, c.lam)
        k = c.node_dim
        self.sgr = sgr_mod.SgrParams.init(rng, k, c.steps) if "sgr" in c.branches else None
        self.saf = (
            saf_mod.SafParams.init(rng, k, c.bn_momentum, c.eps, c.saf_bn_scope) if "saf" in c.branches else None
        )
        self.ave_w = self.ave_b = None
        if "ave" in c.branches and c.similarity == "vector":
            self.ave_w, self.ave_b = uniform_init(rng, (k,), k), uniform_init(rng, (), k)

    # parameters -------------------------------------------------------

    def named_parameters(self) -> Dict[str, Tensor]:
        params = self.encoder.named("enc.")
        if self.config.similarity == "vector":
            params.update(self.similarity.named("sim."))
        if self.sgr is not None:
            params.update(self.sgr.named("sgr."))
        if self.saf is not None:
            params.update(self.saf.named("saf."))
        if self.ave_w is not None:
            params.update({"ave.head_w": self.ave_w, "ave.head_b": self.ave_b})
        return params

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    @property
    def branches(self) -> Tuple[str, ...]:
        return self.config.branches

    # forward ----------------------------------------------------------

    def encode_images(self, raw) -> VisualFeatures:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 3:
            raise ValueError("expected raw region features shaped [B, K, d_raw]")
        feats = encode_images(raw, self.encoder)
        return self._normalized(feats) if self.config.feature_norm else feats

    def encode_texts(self, captions: Sequence[Sequence[int]]) -> List[Tuple[np.ndarray, TextualFeatures]]:
        """Encode captions grouped by length; returns (original indices, features) per group."""
        groups = defaultdict(list)
        for i, cap in enumerate(captions):
            if len(cap) < 1:
                raise ValueError(f"caption {i} is empty")
            groups[len(cap)].append(i)
        out = []
        for length in sorted(groups):
            idx = np.asarray(groups[length])
            ids = np.asarray([captions[i] for i in idx], dtype=np.intp)
            feats = encode_texts(ids, self.encoder)
            out.append((idx, self._normalized(feats) if self.config.feature_norm else feats))
        return out

    def _normalized(self, feats):
        """Unit-length local and global features, so neither modality dominates ``|x - y|^2``."""
        eps = self.config.eps
        if isinstance(feats, VisualFeatures):
            return VisualFeatures(T.l2_normalize(feats.regions, eps=eps), T.l2_normalize(feats.global_, eps=eps), feats.pool_weights)
        return TextualFeatures(
            T.l2_normalize(feats.words, eps=eps), T.l2_normalize(feats.global_, eps=eps), feats.length, feats.pool_weights
        )

    def nodes(self, visual: VisualFeatures, textual: TextualFeatures) -> SimilarityNodes:
        c = self.config
        return compute_nodes(
            visual, textual, self.similarity, c.direction, c.similarity, c.use_global, c.use_local, c.attn_norm_axis, c.eps
        )

    def cross_nodes(self, visual: VisualFeatures, textual: TextualFeatures) -> SimilarityNodes:
        """Node sets for every (image, caption) combination: [B_img, B_txt, P, m]."""
        v = VisualFeatures(T.expand_dims(visual.regions, 1), T.expand_dims(visual.global_, 1))
        t = TextualFeatures(T.expand_dims(textual.words, 0), T.expand_dims(textual.global_, 0))
        return self.nodes(v, t)

    def ave_score(self, stacked: Tensor) -> Tensor:
        if self.config.similarity == "scalar":
            return T.mean(T.reshape(stacked, stacked.shape[:-1]), axis=-1)
        if self.ave_w is not None:
            w, b = self.ave_w, self.ave_b
        elif self.saf is not None:
            w, b = self.saf.head_w, self.saf.head_b
        elif self.sgr is not None:
            w, b = self.sgr.head_w, self.sgr.head_b
        else:
            raise ModelStateError("no head available for average aggregation")
        return T.mean(T.sigmoid(T.add(T.matmul(stacked, w), b)), axis=-1)

    def score_matrix(
        self,
        raw_images,
        captions: Sequence[Sequence[int]],
        branches: Optional[Sequence[str]] = None,
        mode: str = INFERENCE,
    ) -> Dict[str, Tensor]:
        """Scores S[i, j] = score(image i, caption j) for each requested branch."""
        branches = tuple(branches or self.branches)
        missing = [b for b in branches if b not in self.branches]
        if missing:
            raise ModelStateError(f"model has no {missing} head")
        visual = self.encode_images(raw_images)
        groups = self.encode_texts(captions)
        node_sets = [self.cross_nodes(visual, feats) for _, feats in groups]

        per_branch = {}
        if "sgr" in branches:
            per_branch["sgr"] = [sgr_mod.sgr_score(ns, self.sgr) for ns in node_sets]
        if "saf" in branches:
            weights = saf_mod.saf_weights_grouped([ns.stacked for ns in node_sets], self.saf, mode)
            per_branch["saf"] = [saf_mod.head(w.aggregated, self.saf) for w in weights]
        if "ave" in branches:
            per_branch["ave"] = [self.ave_score(ns.stacked) for ns in node_sets]

        order = np.concatenate([idx for idx, _ in groups])
        inverse = np.argsort(order)
        out = {}
        for b, cols in per_branch.items():
            merged = cols[0] if len(cols) == 1 else T.concat(cols, axis=1)
            if len(cols) > 1 or not np.array_equal(order, np.arange(len(order))):
                merged = merged[:, inverse]
            out[b] = merged
        return out

    def score_array(self, raw_images, captions, branch: str, chunk: int = 64) -> np.ndarray:
        """Inference-mode score matrix as a plain array, computed in image chunks."""
        raw_images = np.asarray(raw_images)
        rows = [
            self.score_matrix(raw_images[s:s + chunk], captions, (branch,), INFERENCE)[branch].data
            for s in range(0, len(raw_images), chunk)
        ]
        return np.concatenate(rows, axis=0)

    # persistence ------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters().items()}
        if self.saf is not None:
            state["saf.bn.running_mean"] = self.saf.bn.running_mean.copy()
            state["saf.bn.running_var"] = self.saf.bn.running_var.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        unknown = set(state) - set(params) - {"saf.bn.running_mean", "saf.bn.running_var"}
        if unknown or set(params) - set(state):
            raise ModelStateError(f"state does not match model parameters: {sorted(unknown or set(params) - set(state))}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ModelStateError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        if self.saf is not None:
            self.saf.bn.running_mean = np.array(state["saf.bn.running_mean"], dtype=np.float64)
            self.saf.bn.running_var = np.array(state["saf.bn.running_var"], dtype=np.float64)

    def save(self, path: Union[str, Path]) -> None:
        from .config import dump_config

        np.savez(path, __config__=np.array(dump_config(self.config)), **self.state_dict())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SgrafModel":
        from .config import parse_config

        with np.load(path) as f:
            config = parse_config(str(f["__config__"]))
            state = {k: f[k] for k in f.files if k != "__config__"}
        model = cls(config)
        model.load_state_dict(state)
        return model
