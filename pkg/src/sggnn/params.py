"""Learnable parameter containers and the binary checkpoint format.

All tensors are float64 numpy arrays. ``ModelParams`` aggregates every
parameter group: the embedding head, the shared relation batch-norm, the
probe-gallery and gallery-gallery classifiers, the two-layer message network
and the compatibility projection used by the unsupervised edge-weight
variant. Gradients live outside the containers, in plain dicts keyed by the
same names ``named_arrays`` yields.

Checkpoint layout ("SGGNN-CKPT v1", documented in README.md):

    b"SGGNN-CKPT v1\\n"
    b"<count>\\n"                     tensor count, ASCII decimal
    count x b"<name> <ndim> <dims...>\\n"
    raw payloads: for each tensor in header order, little-endian float64,
    C order, 8 * prod(dims) bytes
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataFormatError

_MAGIC = b"SGGNN-CKPT v1\n"


@dataclass
class EmbedHeadParams:
    """Affine -> ReLU -> affine head mapping raw vectors to feature space."""

    w1: np.ndarray  # (d_raw, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, d_feat)
    b2: np.ndarray  # (d_feat,)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass
class ClassifierParams:
    """Linear scorer; a sigmoid on top yields the pair similarity."""

    w: np.ndarray  # (d_feat,)
    b: np.ndarray  # scalar, shape ()


@dataclass
class MessageNetParams:
    """Two affine layers, each followed by batch-norm and rectification."""

    w1: np.ndarray
    b1: np.ndarray
    bn1: BatchNormParams
    w2: np.ndarray
    b2: np.ndarray
    bn2: BatchNormParams


@dataclass
class CompatParams:
    """Linear projection for the label-free compatibility edge weights."""

    proj: np.ndarray  # (d_feat, d_feat)


def init_batchnorm(dim: int, momentum: float = 0.1, eps: float = 1e-5) -> BatchNormParams:
    return BatchNormParams(
        gamma=np.ones(dim),
        beta=np.zeros(dim),
        running_mean=np.zeros(dim),
        running_var=np.ones(dim),
        momentum=momentum,
        eps=eps,
    )


@dataclass
class ModelParams:
    """Every learnable tensor of the scoring model, plus batch-norm state."""

    embed: EmbedHeadParams
    bn: BatchNormParams
    clf_pg: ClassifierParams
    clf_gg: ClassifierParams
    msg: MessageNetParams
    compat: CompatParams

    @property
    def d_raw(self) -> int:
        return self.embed.w1.shape[0]

    @property
    def d_feat(self) -> int:
        return self.embed.w2.shape[1]

    @classmethod
    def init(
        cls,
        d_raw: int,
        d_feat: int = 64,
        hidden: int | None = None,
        seed: int = 0,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ) -> "ModelParams":
        """Seeded Gaussian init; the two classifiers start as identical copies."""
        if hidden is None:
            hidden = d_raw
        rng = np.random.default_rng(seed)
        embed = EmbedHeadParams(
            w1=rng.normal(0.0, np.sqrt(2.0 / d_raw), size=(d_raw, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, d_feat)),
            b2=np.zeros(d_feat),
        )
        clf_pg = ClassifierParams(
            w=rng.normal(0.0, 1.0 / np.sqrt(d_feat), size=d_feat),
            b=np.zeros(()),
        )
        msg = MessageNetParams(
            w1=rng.normal(0.0, np.sqrt(2.0 / d_feat), size=(d_feat, d_feat)),
            b1=np.zeros(d_feat),
            bn1=init_batchnorm(d_feat, bn_momentum, bn_eps),
            w2=rng.normal(0.0, np.sqrt(2.0 / d_feat), size=(d_feat, d_feat)),
            b2=np.zeros(d_feat),
            bn2=init_batchnorm(d_feat, bn_momentum, bn_eps),
        )
        compat = CompatParams(
            proj=rng.normal(0.0, 1.0 / np.sqrt(d_feat), size=(d_feat, d_feat))
        )
        return cls(
            embed=embed,
            bn=init_batchnorm(d_feat, bn_momentum, bn_eps),
            clf_pg=clf_pg,
            clf_gg=copy.deepcopy(clf_pg),
            msg=msg,
            compat=compat,
        )

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """All tensors including batch-norm running statistics, fixed order."""
        yield "embed.w1", self.embed.w1
        yield "embed.b1", self.embed.b1
        yield "embed.w2", self.embed.w2
        yield "embed.b2", self.embed.b2
        for prefix, bn in (("bn", self.bn), ("msg.bn1", self.msg.bn1), ("msg.bn2", self.msg.bn2)):
            yield f"{prefix}.gamma", bn.gamma
            yield f"{prefix}.beta", bn.beta
            yield f"{prefix}.running_mean", bn.running_mean
            yield f"{prefix}.running_var", bn.running_var
        yield "clf_pg.w", self.clf_pg.w
        yield "clf_pg.b", self.clf_pg.b
        yield "clf_gg.w", self.clf_gg.w
        yield "clf_gg.b", self.clf_gg.b
        yield "msg.w1", self.msg.w1
        yield "msg.b1", self.msg.b1
        yield "msg.w2", self.msg.w2
        yield "msg.b2", self.msg.b2
        yield "compat.proj", self.compat.proj

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        """Trainable tensors only: running statistics are excluded."""
        for name, arr in self.named_arrays():
            if "running_" not in name:
                yield name, arr

    def array(self, name: str) -> np.ndarray:
        for n, arr in self.named_arrays():
            if n == name:
                return arr
        raise KeyError(name)

    def set_array(self, name: str, value: np.ndarray) -> None:
        self.array(name)[...] = value

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def sync_gallery_classifier(self) -> None:
        """Copy the probe-gallery classifier weights into the gallery one."""
        self.clf_gg.w[...] = self.clf_pg.w
        self.clf_gg.b[...] = self.clf_pg.b


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    """Fresh gradient slots for every trainable tensor."""
    return {name: np.zeros_like(arr) for name, arr in params.named_parameters()}


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Serialize all named tensors in the versioned binary layout."""
    tensors = list(params.named_arrays())
    header = [_MAGIC, f"{len(tensors)}\n".encode("ascii")]
    payload = []
    for name, arr in tensors:
        dims = " ".join(str(d) for d in arr.shape)
        line = f"{name} {arr.ndim}" + (f" {dims}" if dims else "") + "\n"
        header.append(line.encode("ascii"))
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(header) + b"".join(payload))


def load_checkpoint(path: str | Path) -> ModelParams:
    """Rebuild ``ModelParams`` from a checkpoint written by ``save_checkpoint``."""
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise DataFormatError(f"{path}: missing 'SGGNN-CKPT v1' header")
    offset = len(_MAGIC)
    count_end = blob.index(b"\n", offset)
    try:
        count = int(blob[offset:count_end])
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad tensor count line") from exc
    offset = count_end + 1

    entries: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        line_end = blob.index(b"\n", offset)
        fields = blob[offset:line_end].decode("ascii").split()
        offset = line_end + 1
        if len(fields) < 2:
            raise DataFormatError(f"{path}: malformed tensor header {fields!r}")
        name, ndim = fields[0], int(fields[1])
        if len(fields) != 2 + ndim:
            raise DataFormatError(f"{path}: tensor {name}: expected {ndim} dims")
        entries.append((name, tuple(int(d) for d in fields[2:])))

    arrays: dict[str, np.ndarray] = {}
    for name, shape in entries:
        size = 8 * int(np.prod(shape, dtype=np.int64)) if shape else 8
        chunk = blob[offset : offset + size]
        if len(chunk) != size:
            raise DataFormatError(f"{path}: truncated payload for tensor {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += size
    if offset != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - offset} trailing bytes after payload")

    return _params_from_arrays(path, arrays)


def _params_from_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> ModelParams:
    def take(name: str) -> np.ndarray:
        if name not in arrays:
            raise DataFormatError(f"{path}: checkpoint is missing tensor {name}")
        return arrays[name].copy()

    def take_bn(prefix: str) -> BatchNormParams:
        return BatchNormParams(
            gamma=take(f"{prefix}.gamma"),
            beta=take(f"{prefix}.beta"),
            running_mean=take(f"{prefix}.running_mean"),
            running_var=take(f"{prefix}.running_var"),
        )

    return ModelParams(
        embed=EmbedHeadParams(
            w1=take("embed.w1"), b1=take("embed.b1"), w2=take("embed.w2"), b2=take("embed.b2")
        ),
        bn=take_bn("bn"),
        clf_pg=ClassifierParams(w=take("clf_pg.w"), b=take("clf_pg.b")),
        clf_gg=ClassifierParams(w=take("clf_gg.w"), b=take("clf_gg.b")),
        msg=MessageNetParams(
            w1=take("msg.w1"),
            b1=take("msg.b1"),
            bn1=take_bn("msg.bn1"),
            w2=take("msg.w2"),
            b2=take("msg.b2"),
            bn2=take_bn("msg.bn2"),
        ),
        compat=CompatParams(proj=take("compat.proj")),
    )
