"""Feature-bank files, caption/manifest/vocabulary text files, and the synthetic corpus.

Feature bank layout (little-endian)::

    b"SGRF" | version u32 | n_images u32 | K u32 | d_raw u32 | n*K*d_raw float32

Captions: one caption per line as space-separated token ids.
Manifest: line i lists the caption indices of image i.
Vocabulary: one token per line, line number = id; 0 is UNK, 1 is padding.
"""
from __future__ import annotations

import itertools
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

MAGIC = b"SGRF"
VERSION = 1
HEADER = struct.Struct("<4sIIII")
DATA_DIR_ENV = "SGRAF_DATA_DIR"

PathLike = Union[str, Path]


class FeatureBankError(Exception):
    pass


class BadMagicError(FeatureBankError):
    pass


class VersionMismatchError(FeatureBankError):
    pass


class TruncatedPayloadError(FeatureBankError):
    pass


class ShapeInconsistencyError(FeatureBankError):
    pass


@dataclass
class FeatureBank:
    features: np.ndarray  # [n_images, K, d_raw] float32
    captions_of_image: List[List[int]]

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ShapeInconsistencyError("features must be shaped [n_images, K, d_raw]")
        if len(self.captions_of_image) != len(self.features):
            raise ShapeInconsistencyError("manifest and features disagree on the image count")

    @property
    def n_images(self) -> int:
        return self.features.shape[0]

    @property
    def regions(self) -> int:
        return self.features.shape[1]

    @property
    def d_raw(self) -> int:
        return self.features.shape[2]

    def image_of_caption(self) -> np.ndarray:
        n = sum(len(c) for c in self.captions_of_image)
        out = np.full(n, -1, dtype=np.intp)
        for i, caps in enumerate(self.captions_of_image):
            out[caps] = i
        if (out < 0).any():
            raise ShapeInconsistencyError("manifest does not cover every caption index")
        return out


def feature_bank_size(n_images: int, regions: int, d_raw: int) -> int:
    return HEADER.size + 4 * n_images * regions * d_raw


def write_features(features, path: PathLike) -> None:
    if isinstance(features, (list, tuple)):
        shapes = {np.shape(f) for f in features}
        if len(shapes) != 1:
            raise ShapeInconsistencyError(f"images have differing region shapes: {sorted(shapes)}")
        features = np.stack(features)
    features = np.asarray(features)
    if features.ndim != 3 or 0 in features.shape[1:]:
        raise ShapeInconsistencyError(f"features must be [n, K, d_raw] with K, d_raw >= 1, got {features.shape}")
    n, k, d = features.shape
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, n, k, d))
        f.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path: PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a feature bank (bad magic)")
    if len(blob) < HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, n, k, d = HEADER.unpack_from(blob)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if n and (k == 0 or d == 0):
        raise ShapeInconsistencyError(f"{path}: K={k}, d_raw={d} must be positive")
    expected = feature_bank_size(n, k, d)
    if len(blob) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(blob) - HEADER.size} bytes, header implies {expected - HEADER.size}")
    if len(blob) > expected:
        raise ShapeInconsistencyError(f"{path}: {len(blob) - expected} trailing bytes beyond n*K*d_raw")
    return np.frombuffer(blob, dtype="<f4", offset=HEADER.size).reshape(n, k, d).astype(np.float32)


def write_lines(rows: Sequence[Sequence], path: PathLike) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(" ".join(str(x) for x in row) + "\n")


def read_int_lines(path: PathLike) -> List[List[int]]:
    with open(path) as f:
        return [[int(x) for x in line.split()] for line in f.read().splitlines()]


def write_vocab(tokens: Sequence[str], path: PathLike) -> None:
    with open(path, "w") as f:
        f.write("\n".join(tokens) + "\n")


def read_vocab(path: PathLike) -> List[str]:
    with open(path) as f:
        return f.read().splitlines()


def write_feature_bank(bank: FeatureBank, path: PathLike, manifest_path: Optional[PathLike] = None) -> None:
    write_features(bank.features, path)
    write_lines(bank.captions_of_image, manifest_path or Path(path).with_suffix(".manifest"))


def read_feature_bank(path: PathLike, manifest_path: Optional[PathLike] = None) -> FeatureBank:
    features = read_features(path)
    manifest = read_int_lines(manifest_path or Path(path).with_suffix(".manifest"))
    if len(manifest) != len(features):
        raise ShapeInconsistencyError(f"manifest lists {len(manifest)} images, bank holds {len(features)}")
    return FeatureBank(features, manifest)


def data_dir(default: PathLike = ".") -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, default))


# synthetic corpus -----------------------------------------------------


@dataclass
class SyntheticSpec:
    concepts: int = 20
    concepts_per_pair: int = 2
    pairs: int = 200
    regions: int = 8
    regions_per_concept: Optional[int] = None  # None: K // concepts_per_pair
    d_raw: int = 32
    caption_length: int = 7
    filler_fraction: float = 0.3
    words_per_concept: int = 2
    filler_pool: int = 10
    region_noise: float = 0.1
    word_noise: float = 0.1
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.concepts < 1 or self.pairs < 1 or self.d_raw < 1 or self.caption_length < 1:
            raise ValueError("concepts, pairs, d_raw and caption_length must be positive")
        if not 1 <= self.concepts_per_pair <= self.concepts:
            raise ValueError("concepts_per_pair must lie in [1, concepts]")
        if self.regions_per_concept is not None and self.regions_per_concept < 1:
            raise ValueError("regions_per_concept must be positive")
        if self.concepts_per_pair * self.concept_regions > self.regions:
            raise ValueError("not enough regions for the concept regions of a pair")
        n_filler = self.filler_tokens
        if self.caption_length - n_filler < self.concepts_per_pair:
            raise ValueError("caption too short to mention every concept of a pair")
        if n_filler and self.filler_pool < 1:
            raise ValueError("filler tokens requested but the filler pool is empty")
        if not 0.0 <= self.filler_fraction < 1.0 or not 0.0 <= self.word_noise <= 1.0:
            raise ValueError("filler_fraction must lie in [0, 1) and word_noise in [0, 1]")
        if self.region_noise < 0:
            raise ValueError("region_noise must be >= 0")
        if self.words_per_concept < 1:
            raise ValueError("words_per_concept must be positive")
        return self

    @property
    def concept_regions(self) -> int:
        """Regions showing each concept; the remainder of K is padded with distractors."""
        if self.regions_per_concept is not None:
            return self.regions_per_concept
        return self.regions // self.concepts_per_pair

    @property
    def filler_tokens(self) -> int:
        return int(round(self.filler_fraction * self.caption_length))


@dataclass
class SyntheticCorpus:
    bank: FeatureBank
    captions: List[List[int]]
    vocab: List[str]
    pair_concepts: List[Tuple[int, ...]]
    prototypes: np.ndarray
    spec: SyntheticSpec

    def is_filler(self, token_id: int) -> bool:
        return self.vocab[token_id].startswith("filler")

    def is_concept(self, token_id: int) -> bool:
        return self.vocab[token_id].startswith("concept")

    def split(self, start: int, stop: int):
        """Pairs ``start:stop`` as a training/evaluation ``PairSet``."""
        from .training import PairSet

        return PairSet.from_bank(self.bank, self.captions, start, stop)


def synthetic_vocab(spec: SyntheticSpec) -> List[str]:
    vocab = ["<unk>", "<pad>"]
    vocab += [f"concept{c}_{w}" for c in range(spec.concepts) for w in range(spec.words_per_concept)]
    vocab += [f"filler{f}" for f in range(spec.filler_pool)]
    return vocab


def _concept_word(spec: SyntheticSpec, concept: int, variant: int) -> int:
    return 2 + concept * spec.words_per_concept + variant


def generate_synthetic_corpus(spec: SyntheticSpec) -> SyntheticCorpus:
    """Image/caption pairs sharing concepts.

    Concept subsets cycle through a seeded shuffle of all subsets, so the
    first ``C(concepts, per_pair)`` pairs have distinct subsets. Each concept
    contributes ``concept_regions`` noisy copies of its prototype; any
    remaining regions are unit-scale Gaussian distractors. Captions name every
    concept at least once, fill the other content slots with further concept
    words, and insert filler tokens at random positions independent of the image.
    With ``word_noise`` > 0 each content word is, with that probability,
    replaced by a word of a uniformly drawn concept.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    prototypes = rng.standard_normal((spec.concepts, spec.d_raw))
    combos = list(itertools.combinations(range(spec.concepts), spec.concepts_per_pair))
    combo_order = rng.permutation(len(combos))
    vocab = synthetic_vocab(spec)
    filler_base = 2 + spec.concepts * spec.words_per_concept
    n_filler = spec.filler_tokens
    n_content = spec.caption_length - n_filler

    features = np.empty((spec.pairs, spec.regions, spec.d_raw), dtype=np.float32)
    captions, pair_concepts = [], []
    for p in range(spec.pairs):
        concepts = combos[combo_order[p % len(combos)]]
        pair_concepts.append(tuple(int(c) for c in concepts))

        rows = [prototypes[c] for c in concepts for _ in range(spec.concept_regions)]
        n_distract = spec.regions - len(rows)
        if n_distract:
            rows.append(rng.standard_normal((n_distract, spec.d_raw)))
        block = np.vstack(rows)
        n_concept = spec.regions - n_distract
        block[:n_concept] += spec.region_noise * rng.standard_normal((n_concept, spec.d_raw))
        features[p] = block[rng.permutation(spec.regions)]

        mentions = list(concepts) + [int(c) for c in rng.choice(concepts, size=n_content - len(concepts))]
        rng.shuffle(mentions)
        if spec.word_noise:
            swap = rng.random(len(mentions)) < spec.word_noise
            mentions = [int(rng.integers(spec.concepts)) if s else c for c, s in zip(mentions, swap)]
        content = [_concept_word(spec, c, int(rng.integers(spec.words_per_concept))) for c in mentions]
        caption = list(content)
        for _ in range(n_filler):
            pos = int(rng.integers(len(caption) + 1))
            caption.insert(pos, filler_base + int(rng.integers(spec.filler_pool)))
        captions.append(caption)

    bank = FeatureBank(features, [[p] for p in range(spec.pairs)])
    return SyntheticCorpus(bank, captions, vocab, pair_concepts, prototypes, spec)


def concept_overlap(a: Sequence[int], b: Sequence[int]) -> float:
    """Fraction of ``a``'s concepts that also occur in ``b``."""
    return len(set(a) & set(b)) / len(a)


def write_corpus(corpus: SyntheticCorpus, directory: PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_feature_bank(corpus.bank, directory / "features.sgrf", directory / "manifest.txt")
    write_lines(corpus.captions, directory / "captions.txt")
    write_vocab(corpus.vocab, directory / "vocab.txt")
    return directory


def read_corpus(directory: PathLike):
    """Read a corpus directory: (bank, captions, vocab)."""
    directory = Path(directory)
    bank = read_feature_bank(directory / "features.sgrf", directory / "manifest.txt")
    captions = read_int_lines(directory / "captions.txt")
    vocab = read_vocab(directory / "vocab.txt") if (directory / "vocab.txt").exists() else None
    return bank, captions, vocab
