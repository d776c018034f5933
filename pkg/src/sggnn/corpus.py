"""Embedding corpora: synthetic identity clusters and file-backed ingestion.

A corpus is a flat list of items, each carrying an identity label, an
optional camera label and a fixed-dimension raw feature vector. Synthetic
corpora plant a configurable fraction of "hard positives" per identity by
shifting items part of the way toward a foreign identity's center, which
manufactures same-identity pairs whose vectors disagree.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

# Features are printed with 9 significant digits; 9 < 15 decimal digits of a
# float64, so parse(print(x)) -> print round-trips byte-identically.
_FEATURE_FMT = "{:.9g}"


@dataclass(frozen=True)
class EmbeddingItem:
    """One corpus entry: unique id, identity label, camera label, raw vector."""

    item_id: int
    identity_id: int
    camera_id: int
    raw: np.ndarray

    def __post_init__(self) -> None:
        if self.item_id < 0 or self.identity_id < 0 or self.camera_id < 0:
            raise ConfigError("item_id, identity_id and camera_id must be non-negative")
        raw = np.asarray(self.raw, dtype=np.float64)
        if raw.ndim != 1:
            raise ConfigError("raw feature must be a 1-D vector")
        if not np.all(np.isfinite(raw)):
            raise ConfigError(f"item {self.item_id} has non-finite features")
        object.__setattr__(self, "raw", raw)


@dataclass
class EmbeddingCorpus:
    """Immutable-by-convention collection of items sharing one feature dimension."""

    items: list[EmbeddingItem]
    dim: int
    identity_index: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for it in self.items:
            if it.item_id in seen:
                raise ConfigError(f"duplicate item_id {it.item_id}")
            seen.add(it.item_id)
            if it.raw.shape[0] != self.dim:
                raise ConfigError(
                    f"item {it.item_id} has dimension {it.raw.shape[0]}, expected {self.dim}"
                )
        if not self.identity_index:
            self.identity_index = _build_identity_index(self.items)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def identities(self) -> list[int]:
        return sorted(self.identity_index)

    def raw_matrix(self) -> np.ndarray:
        """Stack raw features into an (n_items, dim) float64 matrix."""
        if not self.items:
            return np.zeros((0, self.dim))
        return np.stack([it.raw for it in self.items])


def _build_identity_index(items: list[EmbeddingItem]) -> dict[int, list[int]]:
    index: dict[int, list[int]] = {}
    for it in items:
        index.setdefault(it.identity_id, []).append(it.item_id)
    return index


@dataclass(frozen=True)
class SynthConfig:
    """Controls for the synthetic cluster generator.

    Each identity gets a Gaussian center (scaled by ``center_scale``); items
    are center + N(0, noise_sigma^2) noise. The first
    ``round(hard_fraction * images_per_identity)`` items of every identity are
    then moved fraction ``hard_shift`` of the way toward a uniformly chosen
    different identity's center — these are the planted hard positives.
    """

    num_identities: int
    images_per_identity: int
    dim: int
    center_scale: float = 1.0
    noise_sigma: float = 0.3
    hard_fraction: float = 0.0
    hard_shift: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_identities <= 0 or self.images_per_identity <= 0:
            raise ConfigError("num_identities and images_per_identity must be positive")
        if self.dim <= 0:
            raise ConfigError("dim must be positive")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ConfigError("hard_fraction must lie in [0, 1]")
        if not 0.0 <= self.hard_shift <= 1.0:
            raise ConfigError("hard_shift must lie in [0, 1]")
        if self.noise_sigma <= 0.0:
            raise ConfigError("noise_sigma must be positive")

    @property
    def hard_per_identity(self) -> int:
        return int(round(self.hard_fraction * self.images_per_identity))


def generate_synthetic(cfg: SynthConfig) -> EmbeddingCorpus:
    """Generate a clustered corpus with planted hard positives.

    Deterministic given ``cfg.seed``: two calls with equal configs produce
    bit-identical corpora. Item ids are sequential; identity ``i`` owns items
    ``i * images_per_identity .. (i + 1) * images_per_identity - 1``, of which
    the first ``cfg.hard_per_identity`` are the shifted hard ones.
    """
    rng = np.random.default_rng(cfg.seed)
    n_id, n_img, d = cfg.num_identities, cfg.images_per_identity, cfg.dim
    centers = rng.standard_normal((n_id, d)) * cfg.center_scale
    noise = rng.standard_normal((n_id * n_img, d)) * cfg.noise_sigma

    n_hard = cfg.hard_per_identity
    if n_hard > 0 and n_id > 1:
        # Uniform foreign identity per hard item: draw in [0, n_id - 1) and
        # skip over the item's own identity.
        targets = rng.integers(0, n_id - 1, size=(n_id, n_hard))
    else:
        targets = np.zeros((n_id, 0), dtype=np.int64)

    items: list[EmbeddingItem] = []
    for i in range(n_id):
        for j in range(n_img):
            idx = i * n_img + j
            x = centers[i] + noise[idx]
            if j < targets.shape[1]:
                t = int(targets[i, j])
                if t >= i:
                    t += 1
                x = x + cfg.hard_shift * (centers[t] - x)
            items.append(EmbeddingItem(item_id=idx, identity_id=i, camera_id=0, raw=x))
    return EmbeddingCorpus(items=items, dim=d)


def save_corpus(corpus: EmbeddingCorpus, path: str | Path) -> None:
    """Write the corpus text format: "N D" header then one line per item.

    Rows are "item_id identity_id camera_id f_1 ... f_D" with features at
    9 significant digits; UTF-8, LF line endings. save -> load -> save is
    byte-stable.
    """
    lines = [f"{len(corpus.items)} {corpus.dim}"]
    for it in corpus.items:
        feats = " ".join(_FEATURE_FMT.format(v) for v in it.raw)
        prefix = f"{it.item_id} {it.identity_id} {it.camera_id}"
        lines.append(f"{prefix} {feats}" if feats else prefix)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_corpus(path: str | Path) -> EmbeddingCorpus:
    """Parse a corpus text file, reporting the offending line on any defect."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file, expected 'N D' header at line 1")
    header = lines[0].split()
    if len(header) != 2:
        raise DataFormatError(f"{path}: line 1: header must be 'N D', got {lines[0]!r}")
    try:
        n, dim = int(header[0]), int(header[1])
    except ValueError as exc:
        raise DataFormatError(f"{path}: line 1: non-integer header field: {exc}") from exc
    if n < 0 or dim <= 0:
        raise DataFormatError(f"{path}: line 1: need N >= 0 and D > 0, got N={n} D={dim}")

    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise DataFormatError(f"{path}: header declares {n} rows, found {len(body)}")

    items: list[EmbeddingItem] = []
    seen: set[int] = set()
    for row_no, line in enumerate(body, start=2):
        fields = line.split()
        if len(fields) != 3 + dim:
            raise DataFormatError(
                f"{path}: line {row_no}: expected {3 + dim} fields, got {len(fields)}"
            )
        try:
            item_id, identity_id, camera_id = (int(f) for f in fields[:3])
            feats = np.array([float(f) for f in fields[3:]], dtype=np.float64)
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {row_no}: {exc}") from exc
        if not np.all(np.isfinite(feats)):
            raise DataFormatError(f"{path}: line {row_no}: non-finite feature value")
        if item_id in seen:
            raise DataFormatError(f"{path}: line {row_no}: duplicate item_id {item_id}")
        seen.add(item_id)
        items.append(
            EmbeddingItem(item_id=item_id, identity_id=identity_id, camera_id=camera_id, raw=feats)
        )
    return EmbeddingCorpus(items=items, dim=dim)


def split_corpus(
    corpus: EmbeddingCorpus, train_identity_fraction: float, seed: int
) -> tuple[EmbeddingCorpus, EmbeddingCorpus]:
    """Identity-disjoint train/test split.

    Identities are shuffled with ``seed`` and the first
    ``floor(fraction * n_identities)`` go to the train side; every item
    follows its identity, so the two sides partition the corpus.
    """
    if not 0.0 < train_identity_fraction < 1.0:
        raise ConfigError("train_identity_fraction must lie strictly between 0 and 1")
    identities = corpus.identities
    n_train = int(train_identity_fraction * len(identities))
    if n_train == 0 or n_train == len(identities):
        raise ConfigError(
            f"fraction {train_identity_fraction} leaves an empty side for "
            f"{len(identities)} identities"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(identities))
    train_ids = {identities[k] for k in order[:n_train]}
    train_items = [it for it in corpus.items if it.identity_id in train_ids]
    test_items = [it for it in corpus.items if it.identity_id not in train_ids]
    return (
        EmbeddingCorpus(items=train_items, dim=corpus.dim),
        EmbeddingCorpus(items=test_items, dim=corpus.dim),
    )
