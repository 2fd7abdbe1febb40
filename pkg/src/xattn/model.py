"""Network assembly: shared trunk, per-domain branches, attention heads.

Three variants form a ladder. The base variant pools both domains
uniformly; the tag variant adds tag-conditioned pooling on the shop
side; the context variant additionally embeds the query once per
candidate, using the candidate's shop embedding as context.

The trunk and branches are per-location affine+ReLU transforms
(1x1-convolution equivalents); precomputed feature maps can bypass the
trunk via raw_dim == channels with an identity trunk.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Iterator, Mapping, NamedTuple

import numpy as np

from .attention import (
    ContextAttentionParams,
    FeatureMap,
    TagAttentionParams,
    TagVector,
    context_attend,
    context_attend_backward,
    tag_attend,
    tag_attend_backward,
)
from .metric import TripleEmbeddings, triplet_loss, triplet_loss_backward
from .numeric import l2_normalize, l2_normalize_backward

CHECKPOINT_MAGIC = b"XATN"
CHECKPOINT_VERSION = 1

DOMAINS = ("user", "shop")


class Variant(IntEnum):
    """Architecture ladder; each step is a parameter superset of the last."""

    YNET = 0
    TAGYNET = 1
    CTXYNET = 2

    @classmethod
    def parse(cls, name: str) -> "Variant":
        key = name.strip().lower()
        aliases = {
            "ynet": cls.YNET,
            "tag": cls.TAGYNET,
            "tagynet": cls.TAGYNET,
            "ctx": cls.CTXYNET,
            "ctxynet": cls.CTXYNET,
        }
        if key not in aliases:
            raise ValueError(f"unknown variant {name!r}")
        return aliases[key]


class UnsupportedVariantError(ValueError):
    """An operation was asked of a variant that lacks the needed head."""


class CheckpointFormatError(ValueError):
    """Checkpoint bytes could not be parsed; ``offset`` locates the fault."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ModelConfig:
    locations: int
    channels: int
    tag_count: int
    raw_dim: int
    variant: Variant

    def __post_init__(self) -> None:
        for field_name in ("locations", "channels", "tag_count", "raw_dim"):
            if getattr(self, field_name) < 1:
                raise ValueError(f"{field_name} must be positive")


@dataclass
class Affine:
    """Per-location affine transform: x -> x @ weight.T + bias."""

    weight: np.ndarray
    bias: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias


@dataclass
class ModelParams:
    """All learnable tensors, keyed canonically by ``named_tensors``."""

    config: ModelConfig
    trunk: Affine
    branch_shop: Affine
    branch_user: Affine
    tag_attn: TagAttentionParams | None = None
    ctx_attn: ContextAttentionParams | None = None

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "trunk.weight", self.trunk.weight
        yield "trunk.bias", self.trunk.bias
        yield "branch_shop.weight", self.branch_shop.weight
        yield "branch_shop.bias", self.branch_shop.bias
        yield "branch_user.weight", self.branch_user.weight
        yield "branch_user.bias", self.branch_user.bias
        if self.tag_attn is not None:
            yield "tag_attn.embedding", self.tag_attn.embedding
        if self.ctx_attn is not None:
            yield "ctx_attn.feature_weight", self.ctx_attn.feature_weight
            yield "ctx_attn.context_weight", self.ctx_attn.context_weight

    def tensor(self, name: str) -> np.ndarray:
        for tensor_name, arr in self.named_tensors():
            if tensor_name == name:
                return arr
        raise KeyError(name)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.named_tensors()}

    def copy(self) -> "ModelParams":
        tensors = {name: arr.copy() for name, arr in self.named_tensors()}
        return _params_from_tensors(self.config, tensors)


def _tensor_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...], float]]:
    """Canonical (name, shape, init scale) list; scale 0 means zeros."""
    c, r = config.channels, config.raw_dim
    branch_scale = 1.0 / np.sqrt(c)
    layout = [
        ("trunk.weight", (c, r), 1.0 / np.sqrt(r)),
        ("trunk.bias", (c,), 0.0),
        ("branch_shop.weight", (c, c), branch_scale),
        ("branch_shop.bias", (c,), 0.0),
        ("branch_user.weight", (c, c), branch_scale),
        ("branch_user.bias", (c,), 0.0),
    ]
    if config.variant >= Variant.TAGYNET:
        layout.append(("tag_attn.embedding", (config.tag_count, c), branch_scale))
    if config.variant >= Variant.CTXYNET:
        layout.append(("ctx_attn.feature_weight", (c,), branch_scale))
        layout.append(("ctx_attn.context_weight", (config.locations, c), branch_scale))
    return layout


def _params_from_tensors(
    config: ModelConfig, tensors: Mapping[str, np.ndarray]
) -> ModelParams:
    expected = _tensor_layout(config)
    for name, shape, _ in expected:
        if name not in tensors:
            raise ValueError(f"missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise ValueError(
                f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}"
            )
    t = tensors
    params = ModelParams(
        config=config,
        trunk=Affine(t["trunk.weight"], t["trunk.bias"]),
        branch_shop=Affine(t["branch_shop.weight"], t["branch_shop.bias"]),
        branch_user=Affine(t["branch_user.weight"], t["branch_user.bias"]),
    )
    if config.variant >= Variant.TAGYNET:
        params.tag_attn = TagAttentionParams(embedding=t["tag_attn.embedding"])
    if config.variant >= Variant.CTXYNET:
        params.ctx_attn = ContextAttentionParams(
            feature_weight=t["ctx_attn.feature_weight"],
            context_weight=t["ctx_attn.context_weight"],
        )
    return params


def init_params(
    config: ModelConfig,
    rng: np.random.Generator | int,
    base: ModelParams | None = None,
) -> ModelParams:
    """Seeded uniform [-s, s] initialization of every tensor.

    With ``base``, tensors sharing a name are copied (shapes must match
    exactly; a mismatch raises naming the tensor) and only the remaining
    ones are freshly drawn. Extra tensors in ``base`` are ignored, so a
    larger-variant checkpoint can seed a smaller variant.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    base_tensors = dict(base.named_tensors()) if base is not None else {}
    tensors: dict[str, np.ndarray] = {}
    for name, shape, scale in _tensor_layout(config):
        if name in base_tensors:
            src = base_tensors[name]
            if src.shape != shape:
                raise ValueError(
                    f"checkpoint tensor {name!r} has shape {src.shape}, "
                    f"model expects {shape}"
                )
            tensors[name] = src.astype(np.float64, copy=True)
        elif scale == 0.0:
            tensors[name] = np.zeros(shape, dtype=np.float64)
        else:
            tensors[name] = rng.uniform(-scale, scale, size=shape)
    return _params_from_tensors(config, tensors)


# ---------------------------------------------------------------------------
# forward paths
# ---------------------------------------------------------------------------


def extract_features(
    raw: np.ndarray, domain: str, params: ModelParams
) -> FeatureMap:
    """Trunk + domain branch, applied per location: branch(relu(trunk(x)))."""
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
    data = np.asarray(raw, dtype=np.float64)
    cfg = params.config
    if data.shape != (cfg.locations, cfg.raw_dim):
        raise ValueError(
            f"raw features must be {cfg.locations} x {cfg.raw_dim}, got {data.shape}"
        )
    hidden = np.maximum(params.trunk.apply(data), 0.0)
    branch = params.branch_user if domain == "user" else params.branch_shop
    return FeatureMap.from_matrix(branch.apply(hidden))


def embed_shop(raw: np.ndarray, tags: TagVector, params: ModelParams) -> np.ndarray:
    """Unit-norm shop embedding via tag-conditioned pooling."""
    if params.config.variant < Variant.TAGYNET:
        raise UnsupportedVariantError(
            "shop tag attention needs the tag head; this model does not have one"
        )
    assert params.tag_attn is not None
    fmap = extract_features(raw, "shop", params)
    return l2_normalize(tag_attend(fmap, tags, params.tag_attn).pooled)


def embed_shop_simple(raw: np.ndarray, params: ModelParams) -> np.ndarray:
    """Unit-norm shop embedding via uniform pooling (base-variant path)."""
    fmap = extract_features(raw, "shop", params)
    return l2_normalize(fmap.data.mean(axis=0))


def embed_user_simple(raw: np.ndarray, params: ModelParams) -> np.ndarray:
    """Unit-norm query embedding: uniform-weight aggregation, any variant."""
    fmap = extract_features(raw, "user", params)
    return l2_normalize(fmap.data.mean(axis=0))


def embed_user_context(
    raw: np.ndarray, shop_embedding: np.ndarray, params: ModelParams
) -> np.ndarray:
    """Unit-norm query embedding attended with a candidate's (normalized)
    shop embedding as context."""
    if params.config.variant < Variant.CTXYNET:
        raise UnsupportedVariantError(
            "context attention needs the context head; this model does not have one"
        )
    assert params.ctx_attn is not None
    fmap = extract_features(raw, "user", params)
    return l2_normalize(context_attend(fmap, shop_embedding, params.ctx_attn).pooled)


class TripleForward(NamedTuple):
    loss: float
    embeddings: TripleEmbeddings


def _shop_pooled(
    fmap: FeatureMap, tags: TagVector | None, params: ModelParams
) -> np.ndarray:
    if params.config.variant >= Variant.TAGYNET:
        if tags is None:
            raise ValueError("tag vector required for the tag-attention variant")
        assert params.tag_attn is not None
        return tag_attend(fmap, tags, params.tag_attn).pooled
    return fmap.data.mean(axis=0)


def forward_triple(
    anchor_raw: np.ndarray,
    positive_raw: np.ndarray,
    negative_raw: np.ndarray,
    positive_tags: TagVector | None,
    negative_tags: TagVector | None,
    params: ModelParams,
    alpha: float,
) -> TripleForward:
    """Loss and all four embeddings for one training triple.

    The context variant embeds the anchor once per candidate; the other
    variants reuse one uniformly pooled anchor embedding for both sides.
    """
    fmap_anchor = extract_features(anchor_raw, "user", params)
    fmap_pos = extract_features(positive_raw, "shop", params)
    fmap_neg = extract_features(negative_raw, "shop", params)

    pos_hat = l2_normalize(_shop_pooled(fmap_pos, positive_tags, params))
    neg_hat = l2_normalize(_shop_pooled(fmap_neg, negative_tags, params))

    if params.config.variant >= Variant.CTXYNET:
        assert params.ctx_attn is not None
        anchor_pos = l2_normalize(
            context_attend(fmap_anchor, pos_hat, params.ctx_attn).pooled
        )
        anchor_neg = l2_normalize(
            context_attend(fmap_anchor, neg_hat, params.ctx_attn).pooled
        )
    else:
        anchor = l2_normalize(fmap_anchor.data.mean(axis=0))
        anchor_pos = anchor
        anchor_neg = anchor
    embeddings = TripleEmbeddings(
        anchor_pos=anchor_pos, anchor_neg=anchor_neg, positive=pos_hat, negative=neg_hat
    )
    return TripleForward(loss=triplet_loss(embeddings, alpha), embeddings=embeddings)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _features_backward(
    raw: np.ndarray,
    domain: str,
    params: ModelParams,
    grad_map: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate branch and trunk gradients for one image in place."""
    data = np.asarray(raw, dtype=np.float64)
    pre_act = params.trunk.apply(data)
    hidden = np.maximum(pre_act, 0.0)
    if domain == "user":
        branch, prefix = params.branch_user, "branch_user"
    else:
        branch, prefix = params.branch_shop, "branch_shop"
    grads[prefix + ".weight"] += grad_map.T @ hidden
    grads[prefix + ".bias"] += grad_map.sum(axis=0)
    grad_hidden = grad_map @ branch.weight
    grad_pre = np.where(pre_act > 0.0, grad_hidden, 0.0)
    grads["trunk.weight"] += grad_pre.T @ data
    grads["trunk.bias"] += grad_pre.sum(axis=0)


def _shop_pooled_backward(
    fmap: FeatureMap,
    tags: TagVector | None,
    params: ModelParams,
    grad_pooled: np.ndarray,
    grads: dict[str, np.ndarray],
) -> np.ndarray:
    """Backward through the shop pooling; returns grad wrt the feature map."""
    if params.config.variant >= Variant.TAGYNET:
        assert params.tag_attn is not None and tags is not None
        grad_map, grad_embedding = tag_attend_backward(
            fmap, tags, params.tag_attn, grad_pooled
        )
        grads["tag_attn.embedding"] += grad_embedding
        return grad_map
    return np.tile(grad_pooled / fmap.locations, (fmap.locations, 1))


def backward_triple(
    anchor_raw: np.ndarray,
    positive_raw: np.ndarray,
    negative_raw: np.ndarray,
    positive_tags: TagVector | None,
    negative_tags: TagVector | None,
    params: ModelParams,
    alpha: float,
    frozen: Iterable[str] = (),
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus analytic gradients for every tensor in ``params``.

    Shop embeddings receive gradient along two routes in the context
    variant: directly from the loss and through the context-attention
    alignment of the anchor. Tensors named in ``frozen`` are reported as
    zero.
    """
    grads = params.zero_grads()

    fmap_anchor = extract_features(anchor_raw, "user", params)
    fmap_pos = extract_features(positive_raw, "shop", params)
    fmap_neg = extract_features(negative_raw, "shop", params)

    pooled_pos = _shop_pooled(fmap_pos, positive_tags, params)
    pooled_neg = _shop_pooled(fmap_neg, negative_tags, params)
    pos_hat = l2_normalize(pooled_pos)
    neg_hat = l2_normalize(pooled_neg)

    contextual = params.config.variant >= Variant.CTXYNET
    if contextual:
        assert params.ctx_attn is not None
        attended_pos = context_attend(fmap_anchor, pos_hat, params.ctx_attn)
        attended_neg = context_attend(fmap_anchor, neg_hat, params.ctx_attn)
        anchor_pos = l2_normalize(attended_pos.pooled)
        anchor_neg = l2_normalize(attended_neg.pooled)
    else:
        pooled_anchor = fmap_anchor.data.mean(axis=0)
        anchor_pos = anchor_neg = l2_normalize(pooled_anchor)

    embeddings = TripleEmbeddings(
        anchor_pos=anchor_pos, anchor_neg=anchor_neg, positive=pos_hat, negative=neg_hat
    )
    loss = triplet_loss(embeddings, alpha)
    if loss == 0.0:
        return 0.0, grads
    eg = triplet_loss_backward(embeddings, alpha)

    grad_pos_hat = eg.positive
    grad_neg_hat = eg.negative
    if contextual:
        assert params.ctx_attn is not None
        grad_pooled_ap = l2_normalize_backward(attended_pos.pooled, eg.anchor_pos)
        grad_pooled_an = l2_normalize_backward(attended_neg.pooled, eg.anchor_neg)
        map_p, ctx_p, featw_p, ctxw_p = context_attend_backward(
            fmap_anchor, pos_hat, params.ctx_attn, grad_pooled_ap
        )
        map_n, ctx_n, featw_n, ctxw_n = context_attend_backward(
            fmap_anchor, neg_hat, params.ctx_attn, grad_pooled_an
        )
        grads["ctx_attn.feature_weight"] += featw_p + featw_n
        grads["ctx_attn.context_weight"] += ctxw_p + ctxw_n
        grad_anchor_map = map_p + map_n
        # context route back into the shop embeddings
        grad_pos_hat = grad_pos_hat + ctx_p
        grad_neg_hat = grad_neg_hat + ctx_n
    else:
        grad_pooled_anchor = l2_normalize_backward(
            pooled_anchor, eg.anchor_pos + eg.anchor_neg
        )
        grad_anchor_map = np.tile(
            grad_pooled_anchor / fmap_anchor.locations, (fmap_anchor.locations, 1)
        )

    grad_pos_map = _shop_pooled_backward(
        fmap_pos, positive_tags, params, l2_normalize_backward(pooled_pos, grad_pos_hat), grads
    )
    grad_neg_map = _shop_pooled_backward(
        fmap_neg, negative_tags, params, l2_normalize_backward(pooled_neg, grad_neg_hat), grads
    )

    _features_backward(anchor_raw, "user", params, grad_anchor_map, grads)
    _features_backward(positive_raw, "shop", params, grad_pos_map, grads)
    _features_backward(negative_raw, "shop", params, grad_neg_map, grads)

    for name in frozen:
        if name in grads:
            grads[name][...] = 0.0
    return loss, grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    epoch: int
    seed: int
    stage: str


def _tensor_frame(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype="<f8")
    return b"".join(
        (
            struct.pack("<I", len(encoded)),
            encoded,
            struct.pack("<I", payload.ndim),
            struct.pack(f"<{payload.ndim}I", *payload.shape),
            payload.tobytes(),
        )
    )


def _config_frame(config: ModelConfig) -> bytes:
    return struct.pack(
        "<5I",
        int(config.variant),
        config.locations,
        config.channels,
        config.tag_count,
        config.raw_dim,
    )


def params_fingerprint(params: ModelParams) -> bytes:
    """32-byte digest of the config plus every tensor, framing included."""
    digest = hashlib.sha256()
    digest.update(_config_frame(params.config))
    for name, arr in params.named_tensors():
        digest.update(_tensor_frame(name, arr))
    return digest.digest()


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    stage = ckpt.stage.encode("utf-8")
    tensors = list(ckpt.params.named_tensors())
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        _config_frame(ckpt.config),
        struct.pack("<I", ckpt.epoch),
        struct.pack("<Q", ckpt.seed),
        struct.pack("<I", len(stage)),
        stage,
        struct.pack("<I", len(tensors)),
    ]
    parts.extend(_tensor_frame(name, arr) for name, arr in tensors)
    return b"".join(parts)


class _Reader:
    """Byte cursor that raises offset-carrying errors on truncation."""

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.data):
            raise CheckpointFormatError(
                f"truncated: needed {count} bytes for {what}, "
                f"had {len(self.data) - self.pos}",
                offset=self.pos,
            )
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}", offset=0)
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", offset=4)
    variant_raw = reader.u32("variant")
    try:
        variant = Variant(variant_raw)
    except ValueError:
        raise CheckpointFormatError(f"unknown variant code {variant_raw}", offset=8)
    config = ModelConfig(
        locations=reader.u32("locations"),
        channels=reader.u32("channels"),
        tag_count=reader.u32("tag_count"),
        raw_dim=reader.u32("raw_dim"),
        variant=variant,
    )
    epoch = reader.u32("epoch")
    seed = reader.u64("seed")
    stage = reader.take(reader.u32("stage length"), "stage name").decode("utf-8")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32("tensor count")):
        name_offset = reader.pos
        name = reader.take(reader.u32("tensor name length"), "tensor name").decode("utf-8")
        rank = reader.u32("tensor rank")
        dims = tuple(reader.u32("tensor dim") for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = reader.take(8 * count, f"tensor {name!r} payload")
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor {name!r}", offset=name_offset)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if reader.pos != len(data):
        raise CheckpointFormatError(
            f"{len(data) - reader.pos} trailing bytes", offset=reader.pos
        )
    try:
        params = _params_from_tensors(config, tensors)
    except ValueError as exc:
        raise CheckpointFormatError(str(exc)) from exc
    return Checkpoint(config=config, params=params, epoch=epoch, seed=seed, stage=stage)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
