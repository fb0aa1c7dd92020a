"""Engagement estimation model for dyadic conversations.

Five per-frame feature streams per speaker are projected to a shared width,
encoded per stream, grouped into audio / video blocks and fused within each
group. The partner's fused features then query the target's features through
cross-attention (partner as Q, normalized target as K/V), and an MLP head
emits one engagement value per frame. Flags turn the group-fusion encoders
and the partner cross-attention off independently, which gives the ablation
arms; a solo baseline variant (per-stream encoders + one wide fusion layer)
is provided as its own class.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import (Linear, LayerNorm, MultiHeadAttention, FeedForward,
                 TransformerEncoderLayer, PositionalEncoding, dropout, prefixed)
from .tensor import Tensor

STREAMS = ("opensmile", "w2vbert", "clip", "openface", "openpose")
AUDIO_STREAMS = ("opensmile", "w2vbert")
VIDEO_STREAMS = ("clip", "openface", "openpose")

DEFAULT_FEATURE_DIMS = {
    "opensmile": 88,
    "w2vbert": 1024,
    "clip": 512,
    "openface": 714,
    "openpose": 139,
}

CHECKPOINT_MAGIC = b"DATC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters; window geometry rides along because the
    model and the segmenter must agree on it."""

    model_dim: int = 512                    # unified projection width d
    cross_layers: int = 1                   # partner cross-attention stack depth
    heads: int = 8
    dropout: float = 0.2
    core_len: int = 32                      # supervised frames per window
    context_len: int = 32                   # context halo on each side
    feature_dims: dict = field(default_factory=lambda: dict(DEFAULT_FEATURE_DIMS))
    use_group_fusion: bool = True
    use_partner_cross: bool = True
    share_stream_encoders: bool = False
    use_positional: bool = True
    head_hidden: int = 0                    # 0 means model_dim
    encoder_depth: int = 1                  # per-stream and group encoder depth
    ffn_mult: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        d, h = self.model_dim, self.heads
        for width in (d, 2 * d, 3 * d):
            if width % h != 0:
                raise ValueError(f"heads ({h}) must divide all pipeline widths, "
                                 f"violated at {width}")
        if self.core_len < 1 or self.context_len < 0:
            raise ValueError("need core_len >= 1 and context_len >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if set(self.feature_dims) != set(STREAMS):
            raise ValueError(f"feature_dims must have exactly the streams {STREAMS}")
        if any(v < 1 for v in self.feature_dims.values()):
            raise ValueError("feature dims must be positive")
        if self.cross_layers < 1 or self.encoder_depth < 1:
            raise ValueError("cross_layers and encoder_depth must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype}")

    @property
    def window_len(self) -> int:
        return self.core_len + 2 * self.context_len

    @property
    def audio_dim(self) -> int:
        return 2 * self.model_dim

    @property
    def video_dim(self) -> int:
        return 3 * self.model_dim

    @property
    def head_in_dim(self) -> int:
        return 5 * self.model_dim

    @property
    def head_hidden_dim(self) -> int:
        return self.head_hidden or self.model_dim

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def as_bundle(streams: dict, dtype) -> dict[str, Tensor]:
    """Wrap raw per-stream arrays as constant tensors in the model dtype."""
    out = {}
    for name in STREAMS:
        if name not in streams:
            raise KeyError(f"feature bundle is missing stream '{name}'")
        x = streams[name]
        out[name] = x if isinstance(x, Tensor) else T.constant(np.asarray(x, dtype=dtype))
    return out


def _check_bundle(bundle: dict[str, Tensor], cfg: ModelConfig, who: str) -> int:
    length = None
    for name in STREAMS:
        t = bundle[name]
        want = cfg.feature_dims[name]
        if t.shape[-1] != want:
            raise T.ShapeError(f"{who} stream '{name}' has dim {t.shape[-1]}, "
                               f"config expects {want}")
        if length is None:
            length = t.shape[-2]
        elif t.shape[-2] != length:
            raise T.ShapeError(f"{who} stream '{name}' has length {t.shape[-2]}, "
                               f"others have {length}")
    return length


class StreamEncoders:
    """Per-stream linear projection to d, optional positional add, then a
    stack of standard encoder layers per stream."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.model_dim
        dt = cfg.np_dtype
        self.cfg = cfg
        self.proj = {s: Linear(cfg.feature_dims[s], d, rng, dt) for s in STREAMS}
        self.layers = {s: [TransformerEncoderLayer(d, cfg.heads, cfg.dropout, rng,
                                                   cfg.ffn_mult, dt)
                           for _ in range(cfg.encoder_depth)]
                       for s in STREAMS}
        self.positional = PositionalEncoding(cfg.window_len, d, dt) if cfg.use_positional else None

    def __call__(self, bundle: dict[str, Tensor], train: bool, rng) -> dict[str, Tensor]:
        out = {}
        for s in STREAMS:
            x = self.proj[s](bundle[s])
            if self.positional is not None:
                x = self.positional(x)
            for layer in self.layers[s]:
                x = layer(x, train, rng)
            out[s] = x
        return out

    def named_parameters(self):
        params = []
        for s in STREAMS:
            params += prefixed(f"proj.{s}", self.proj[s].named_parameters())
            for i, layer in enumerate(self.layers[s]):
                params += prefixed(f"enc.{s}.{i}", layer.named_parameters())
        return params


class GroupFusion:
    """Stream encoders plus concat into audio [.., L, 2d] / video [.., L, 3d]
    groups; with group fusion enabled each group passes through its own
    encoder stack, otherwise the raw concatenations flow through."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.streams = StreamEncoders(cfg, rng)
        self.audio_layers: list[TransformerEncoderLayer] = []
        self.video_layers: list[TransformerEncoderLayer] = []
        if cfg.use_group_fusion:
            dt = cfg.np_dtype
            for _ in range(cfg.encoder_depth):
                self.audio_layers.append(TransformerEncoderLayer(
                    cfg.audio_dim, cfg.heads, cfg.dropout, rng, cfg.ffn_mult, dt))
                self.video_layers.append(TransformerEncoderLayer(
                    cfg.video_dim, cfg.heads, cfg.dropout, rng, cfg.ffn_mult, dt))

    def __call__(self, bundle: dict[str, Tensor], train: bool = False,
                 rng=None) -> tuple[Tensor, Tensor]:
        enc = self.streams(bundle, train, rng)
        audio = T.concat([enc[s] for s in AUDIO_STREAMS], axis=-1)
        video = T.concat([enc[s] for s in VIDEO_STREAMS], axis=-1)
        for layer in self.audio_layers:
            audio = layer(audio, train, rng)
        for layer in self.video_layers:
            video = layer(video, train, rng)
        return audio, video

    def named_parameters(self):
        params = list(self.streams.named_parameters())
        for i, layer in enumerate(self.audio_layers):
            params += prefixed(f"audio.{i}", layer.named_parameters())
        for i, layer in enumerate(self.video_layers):
            params += prefixed(f"video.{i}", layer.named_parameters())
        return params


class PartnerCrossLayer:
    """Cross-attention encoder layer with the partner as query.

    Only the target stream is normalized and refined:

        kv  = Norm(target)
        mid = CrossAttn(q=partner, k=kv, v=kv) + target
        out = mid + FFN(Norm(mid))

    The query is deliberately left un-normalized and the first residual adds
    the raw target, so the layer is not a vanilla pre-norm block.
    """

    def __init__(self, dim: int, heads: int, dropout_rate: float, rng,
                 ffn_mult: int = 4, dtype=np.float64):
        self.dim = dim
        self.norm_kv = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads, dropout_rate, rng, dtype)
        self.norm_ffn = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, ffn_mult, dropout_rate, rng, dtype)

    def __call__(self, target: Tensor, partner: Tensor, train: bool = False,
                 rng=None) -> Tensor:
        if target.shape != partner.shape:
            raise T.ShapeError(f"cross layer: target {target.shape} and partner "
                               f"{partner.shape} must match")
        kv = self.norm_kv(target)
        mid = T.add(self.attn(partner, kv, train, rng), target)
        return T.add(mid, self.ffn(self.norm_ffn(mid), train, rng))

    def named_parameters(self):
        return (prefixed("norm_kv", self.norm_kv.named_parameters())
                + prefixed("attn", self.attn.named_parameters())
                + prefixed("norm_ffn", self.norm_ffn.named_parameters())
                + prefixed("ffn", self.ffn.named_parameters()))

    @staticmethod
    def param_count(dim: int, ffn_mult: int = 4) -> int:
        return (2 * LayerNorm.param_count(dim)
                + MultiHeadAttention.param_count(dim)
                + FeedForward.param_count(dim, ffn_mult))


class PredictionHead:
    """Two-layer MLP emitting one value per frame: 5d -> hidden -> 1."""

    def __init__(self, cfg: ModelConfig, rng):
        dt = cfg.np_dtype
        self.dropout_rate = cfg.dropout
        self.lin1 = Linear(cfg.head_in_dim, cfg.head_hidden_dim, rng, dt)
        self.lin2 = Linear(cfg.head_hidden_dim, 1, rng, dt)

    def __call__(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        h = dropout(T.gelu(self.lin1(x)), self.dropout_rate, train, rng)
        return self.lin2(h)

    def named_parameters(self):
        return prefixed("lin1", self.lin1.named_parameters()) + \
            prefixed("lin2", self.lin2.named_parameters())


class EngagementModel:
    """Full dyadic model: group fusion per speaker, partner-query cross
    attention per group, concat, MLP head.

    forward() accepts bundles of ``[L, dim]`` or ``[B, L, dim]`` arrays and
    returns ``[.., L, 1]``; in eval mode (train=False) the output is clamped
    to the label range [0, 1], in train mode it is left free so gradients
    survive saturation.
    """

    arch = "dialogue"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.target_fusion = GroupFusion(cfg, rng)
        if not cfg.use_partner_cross:
            self.partner_fusion = None
        elif cfg.share_stream_encoders:
            self.partner_fusion = self.target_fusion
        else:
            self.partner_fusion = GroupFusion(cfg, rng)
        self.audio_cross: list[PartnerCrossLayer] = []
        self.video_cross: list[PartnerCrossLayer] = []
        if cfg.use_partner_cross:
            dt = cfg.np_dtype
            for _ in range(cfg.cross_layers):
                self.audio_cross.append(PartnerCrossLayer(
                    cfg.audio_dim, cfg.heads, cfg.dropout, rng, cfg.ffn_mult, dt))
                self.video_cross.append(PartnerCrossLayer(
                    cfg.video_dim, cfg.heads, cfg.dropout, rng, cfg.ffn_mult, dt))
        self.head = PredictionHead(cfg, rng)

    @property
    def core_len(self) -> int:
        return self.cfg.core_len

    @property
    def context_len(self) -> int:
        return self.cfg.context_len

    def forward(self, target: dict, partner: dict | None = None,
                train: bool = False, rng=None) -> Tensor:
        cfg = self.cfg
        target = as_bundle(target, cfg.np_dtype)
        len_t = _check_bundle(target, cfg, "target")
        audio, video = self.target_fusion(target, train, rng)
        if cfg.use_partner_cross:
            if partner is None:
                raise ValueError("model was built with partner cross-attention; "
                                 "a partner bundle is required")
            partner = as_bundle(partner, cfg.np_dtype)
            len_p = _check_bundle(partner, cfg, "partner")
            if len_p != len_t:
                raise T.ShapeError(f"target length {len_t} != partner length {len_p}")
            p_audio, p_video = self.partner_fusion(partner, train, rng)
            for layer in self.audio_cross:
                audio = layer(audio, p_audio, train, rng)
            for layer in self.video_cross:
                video = layer(video, p_video, train, rng)
        fused = T.concat([audio, video], axis=-1)
        y = self.head(fused, train, rng)
        if not train:
            y = T.constant(np.clip(y.data, 0.0, 1.0))
        return y

    def predict_windows(self, batch) -> np.ndarray:
        """Eval-mode forward over a WindowBatch; returns clamped [B, L]."""
        with T.no_grad():
            y = self.forward(batch.target, batch.partner, train=False)
        return y.data[..., 0]

    def named_parameters(self):
        params = prefixed("target", self.target_fusion.named_parameters())
        if self.partner_fusion is not None and self.partner_fusion is not self.target_fusion:
            params += prefixed("partner", self.partner_fusion.named_parameters())
        for i, layer in enumerate(self.audio_cross):
            params += prefixed(f"cross.audio.{i}", layer.named_parameters())
        for i, layer in enumerate(self.video_cross):
            params += prefixed(f"cross.video.{i}", layer.named_parameters())
        params += prefixed("head", self.head.named_parameters())
        return params

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


class BaselineModel:
    """Solo baseline: per-stream encoders, concat all five streams to 5d,
    one wide fusion encoder stack, MLP head. No partner input, no grouping."""

    arch = "baseline"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.streams = StreamEncoders(cfg, rng)
        dt = cfg.np_dtype
        self.fusion = [TransformerEncoderLayer(cfg.head_in_dim, cfg.heads, cfg.dropout,
                                               rng, cfg.ffn_mult, dt)
                       for _ in range(cfg.encoder_depth)]
        self.head = PredictionHead(cfg, rng)

    @property
    def core_len(self) -> int:
        return self.cfg.core_len

    @property
    def context_len(self) -> int:
        return self.cfg.context_len

    def forward(self, target: dict, partner: dict | None = None,
                train: bool = False, rng=None) -> Tensor:
        cfg = self.cfg
        target = as_bundle(target, cfg.np_dtype)
        _check_bundle(target, cfg, "target")
        enc = self.streams(target, train, rng)
        fused = T.concat([enc[s] for s in STREAMS], axis=-1)
        for layer in self.fusion:
            fused = layer(fused, train, rng)
        y = self.head(fused, train, rng)
        if not train:
            y = T.constant(np.clip(y.data, 0.0, 1.0))
        return y

    def predict_windows(self, batch) -> np.ndarray:
        with T.no_grad():
            y = self.forward(batch.target, train=False)
        return y.data[..., 0]

    def named_parameters(self):
        params = prefixed("streams", self.streams.named_parameters())
        for i, layer in enumerate(self.fusion):
            params += prefixed(f"fusion.{i}", layer.named_parameters())
        params += prefixed("head", self.head.named_parameters())
        return params

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def param_count(cfg: ModelConfig, arch: str = "dialogue") -> int:
    """Closed-form trainable parameter total for a config; must agree with
    the enumerated parameter store of the constructed model."""
    d = cfg.model_dim
    enc = TransformerEncoderLayer.param_count
    streams = sum(Linear.param_count(cfg.feature_dims[s], d) for s in STREAMS)
    streams += 5 * cfg.encoder_depth * enc(d, cfg.ffn_mult)
    head = (Linear.param_count(cfg.head_in_dim, cfg.head_hidden_dim)
            + Linear.param_count(cfg.head_hidden_dim, 1))
    if arch == "baseline":
        return streams + cfg.encoder_depth * enc(cfg.head_in_dim, cfg.ffn_mult) + head

    per_role = streams
    if cfg.use_group_fusion:
        per_role += cfg.encoder_depth * (enc(cfg.audio_dim, cfg.ffn_mult)
                                         + enc(cfg.video_dim, cfg.ffn_mult))
    total = per_role
    if cfg.use_partner_cross:
        if not cfg.share_stream_encoders:
            total += per_role
        total += cfg.cross_layers * (PartnerCrossLayer.param_count(cfg.audio_dim, cfg.ffn_mult)
                                     + PartnerCrossLayer.param_count(cfg.video_dim, cfg.ffn_mult))
    return total + head


def _config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def _config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    """Single-file checkpoint: magic, version, JSON manifest (config and
    per-parameter offsets/shapes), then all parameters as one little-endian
    float32 blob. Round-trips bit-exactly at float32."""
    params = model.named_parameters()
    manifest_params = []
    chunks = []
    offset = 0
    for name, p in params:
        flat = np.ascontiguousarray(p.data, dtype="<f4")
        manifest_params.append({"name": name, "offset": offset, "shape": list(p.data.shape)})
        chunks.append(flat.tobytes())
        offset += flat.size
    manifest = {
        "schema_version": 1,
        "arch": model.arch,
        "config": _config_to_dict(model.cfg),
        "params": manifest_params,
        "num_values": offset,
    }
    if extra:
        manifest["extra"] = extra
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(manifest_bytes)))
        f.write(manifest_bytes)
        f.write(b"".join(chunks))


def load_checkpoint(path):
    """Rebuild the model a checkpoint describes; returns (model, manifest)."""
    from .data import DataFormatError  # shared error taxonomy for file issues

    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad checkpoint magic {raw[:4]!r} at offset 0")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    header_end = 16 + mlen
    if header_end > len(raw):
        raise DataFormatError(f"{path}: truncated manifest (need {header_end} bytes, "
                              f"have {len(raw)})")
    manifest = json.loads(raw[16:header_end].decode("utf-8"))
    blob = np.frombuffer(raw[header_end:], dtype="<f4")
    if blob.size != manifest["num_values"]:
        raise DataFormatError(f"{path}: parameter blob has {blob.size} values, manifest "
                              f"says {manifest['num_values']} (offset {header_end})")
    cfg = _config_from_dict(manifest["config"])
    cls = BaselineModel if manifest["arch"] == "baseline" else EngagementModel
    model = cls(cfg, seed=0)
    store = dict(model.named_parameters())
    for entry in manifest["params"]:
        name, off, shape = entry["name"], entry["offset"], tuple(entry["shape"])
        if name not in store:
            raise DataFormatError(f"{path}: unknown parameter '{name}' in manifest")
        p = store[name]
        n = int(np.prod(shape)) if shape else 1
        if p.data.shape != shape:
            raise DataFormatError(f"{path}: parameter '{name}' has shape {shape} on disk, "
                                  f"model expects {p.data.shape}")
        p.data = blob[off:off + n].reshape(shape).astype(cfg.np_dtype)
    return model, manifest
