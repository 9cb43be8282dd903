"""Two-stream RGB-D transformer with a mutual-attention fusion block.

Each stream turns its frames into one embedding per frame with a small conv
backbone, runs an inter-frame transformer encoder over the sequence, and the
two encoded sequences exchange information through cross-attention before
being fused and classified frame by frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor

FUSION_MODES = ("add", "concat", "multiply")
FUSION_BLOCKS = ("mutual", "direct")
MODALITIES = ("both", "rgb", "depth")
CLIP_AVERAGES = ("logits", "probs")
BACKBONE_CHANNELS = (8, 16)
LN_EPS = 1e-5


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    k: int = 8
    heads_encoder: int = 8
    heads_mutual: int = 8
    num_encoders: int = 1
    ffn_hidden: int = 0  # 0 means 4 * d_model
    dropout_rate: float = 0.1
    fusion_mode: str = "add"
    fusion_block: str = "mutual"
    modalities: str = "both"
    use_encoder: bool = True
    use_positional_encoding: bool = True
    clip_average: str = "logits"
    num_classes: int = 0

    def __post_init__(self):
        if self.ffn_hidden == 0:
            self.ffn_hidden = 4 * self.d_model
        self.validate()

    def validate(self) -> None:
        if self.d_model <= 0 or self.d_model % 2:
            raise ConfigError(f"d_model must be positive and even, got {self.d_model}")
        for name in ("heads_encoder", "heads_mutual"):
            h = getattr(self, name)
            if h < 1 or self.d_model % h:
                raise ConfigError(f"d_model={self.d_model} is not divisible by {name}={h}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.num_encoders < 0:
            raise ConfigError("num_encoders must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        for name, allowed in (("fusion_mode", FUSION_MODES), ("fusion_block", FUSION_BLOCKS),
                              ("modalities", MODALITIES), ("clip_average", CLIP_AVERAGES)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @property
    def streams(self) -> tuple[str, ...]:
        return ("rgb", "depth") if self.modalities == "both" else (self.modalities,)

    @property
    def classifier_width(self) -> int:
        if self.modalities == "both" and self.fusion_mode == "concat":
            return 2 * self.d_model
        return self.d_model

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def positional_encoding(k: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: sine in even columns, cosine in odd, one row per position."""
    if d_model % 2:
        raise ConfigError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(k, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / 10000.0 ** (2.0 * i / d_model)
    pe = np.empty((k, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


@dataclass
class AttentionMaps:
    """Per-head row-stochastic maps keyed by ``(stream, layer)`` plus the two cross maps."""
    self_attention: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    mutual: dict[str, np.ndarray] = field(default_factory=dict)

    def all_maps(self):
        for (stream, layer), maps in self.self_attention.items():
            for h, m in enumerate(maps):
                yield f"{stream}_{layer}_{h}", m
        for direction, maps in self.mutual.items():
            for h, m in enumerate(maps):
                yield f"mutual_{direction}_h{h}", m


@dataclass
class ForwardResult:
    clip_logits: Tensor
    frame_logits: Tensor
    attention: AttentionMaps
    activations: dict[str, Tensor]


def glorot(rng: RngStream, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Trear:
    """Parameter container plus the forward pass.

    Parameters live in ``self.params`` under dotted names; the RGB and depth
    streams never share a tensor.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.num_classes < 1:
            raise ConfigError("num_classes must be set before building the model")
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = RngStream(seed, "init")
        c = config
        for s in c.streams:
            chans = (3, *BACKBONE_CHANNELS, c.d_model)
            for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
                self._add(f"{s}.backbone.conv{i}.w", glorot(rng, (cout, cin, 3, 3), cin * 9, cout * 9))
                self._add(f"{s}.backbone.conv{i}.b", np.zeros(cout))
            if c.use_encoder:
                for layer in range(c.num_encoders):
                    p = f"{s}.encoder{layer}"
                    self._add_attention(rng, f"{p}.attn")
                    self._add_ln(f"{p}.ln1")
                    self._add(f"{p}.ffn.w1", glorot(rng, (c.d_model, c.ffn_hidden), c.d_model, c.ffn_hidden))
                    self._add(f"{p}.ffn.b1", np.zeros(c.ffn_hidden))
                    self._add(f"{p}.ffn.w2", glorot(rng, (c.ffn_hidden, c.d_model), c.ffn_hidden, c.d_model))
                    self._add(f"{p}.ffn.b2", np.zeros(c.d_model))
                    self._add_ln(f"{p}.ln2")
        if c.modalities == "both" and c.fusion_block == "mutual":
            for direction in ("rgb2depth", "depth2rgb"):
                self._add_attention(rng, f"mutual.{direction}")
                self._add_ln(f"mutual.{direction}.ln")
        w = c.classifier_width
        self._add("classifier.w", glorot(rng, (w, c.num_classes), w, c.num_classes))
        self._add("classifier.b", np.zeros(c.num_classes))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _add_attention(self, rng: RngStream, prefix: str) -> None:
        d = self.config.d_model
        for proj in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.{proj}", glorot(rng, (d, d), d, d))
        self._add(f"{prefix}.bo", np.zeros(d))

    def _add_ln(self, prefix: str) -> None:
        d = self.config.d_model
        self._add(f"{prefix}.gamma", np.ones(d))
        self._add(f"{prefix}.beta", np.zeros(d))

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # ------------------------------------------------------------- state

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = [k for k in self.params if k not in arrays]
        if missing:
            raise ConfigError(f"checkpoint lacks parameters: {', '.join(missing)}")
        for k, t in self.params.items():
            if arrays[k].shape != t.shape:
                raise ConfigError(f"parameter {k}: checkpoint shape {arrays[k].shape}, model {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64, copy=True)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # ------------------------------------------------------------ layers

    def embed_frames(self, stream: str, frames: np.ndarray | Tensor) -> Tensor:
        """(k, 3, H, W) frames -> (k, d_model) embeddings, one row per frame."""
        x = T.as_tensor(frames)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"{stream} frames must be (k, 3, H, W), got {x.shape}")
        for i in range(len(BACKBONE_CHANNELS) + 1):
            x = T.relu(T.conv2d(x, self.p(f"{stream}.backbone.conv{i}.w"),
                                self.p(f"{stream}.backbone.conv{i}.b"), stride=2, padding=1))
        return T.mean(x, axis=(2, 3))

    def _dropout(self, x: Tensor, training: bool, rng: RngStream | None) -> Tensor:
        return T.dropout(x, self.config.dropout_rate, training, rng)

    def encoder_forward(self, stream: str, f: Tensor, training: bool = False,
                        rng: RngStream | None = None) -> tuple[Tensor, list[np.ndarray]]:
        c = self.config
        maps = []
        for layer in range(c.num_encoders):
            p = f"{stream}.encoder{layer}"
            attn, a = multi_head_attention(f, f, self._attn_params(f"{p}.attn"), c.heads_encoder)
            maps.append(a)
            f1 = T.layer_norm(f + self._dropout(attn, training, rng),
                              self.p(f"{p}.ln1.gamma"), self.p(f"{p}.ln1.beta"), LN_EPS)
            hidden = T.relu(f1 @ self.p(f"{p}.ffn.w1") + self.p(f"{p}.ffn.b1"))
            ffn = hidden @ self.p(f"{p}.ffn.w2") + self.p(f"{p}.ffn.b2")
            f = T.layer_norm(f1 + self._dropout(ffn, training, rng),
                             self.p(f"{p}.ln2.gamma"), self.p(f"{p}.ln2.beta"), LN_EPS)
        return f, maps

    def _attn_params(self, prefix: str) -> dict[str, Tensor]:
        return {k: self.p(f"{prefix}.{k}") for k in ("wq", "wk", "wv", "wo", "bo")}

    def mutual_attention(self, f_rgb: Tensor, f_depth: Tensor, training: bool = False,
                         rng: RngStream | None = None):
        if f_rgb.shape != f_depth.shape:
            raise ConfigError(f"modality shapes differ: rgb {f_rgb.shape}, depth {f_depth.shape}")
        c = self.config
        out, maps = {}, {}
        for direction, q_src, kv_src in (("rgb2depth", f_rgb, f_depth), ("depth2rgb", f_depth, f_rgb)):
            pre = f"mutual.{direction}"
            attn, a = multi_head_attention(q_src, kv_src, self._attn_params(pre), c.heads_mutual)
            out[direction] = T.layer_norm(q_src + self._dropout(attn, training, rng),
                                          self.p(f"{pre}.ln.gamma"), self.p(f"{pre}.ln.beta"), LN_EPS)
            maps[direction] = a
        return out["rgb2depth"], out["depth2rgb"], maps

    def classify(self, fused: Tensor) -> tuple[Tensor, Tensor]:
        """Per-frame affine logits and their frame average (in logit or probability space)."""
        w = self.p("classifier.w")
        if fused.shape[-1] != w.shape[0]:
            raise ConfigError(f"classifier expects width {w.shape[0]}, got {fused.shape[-1]}")
        frame_logits = fused @ w + self.p("classifier.b")
        if self.config.clip_average == "probs":
            clip = T.log(T.mean(T.softmax(frame_logits, axis=-1), axis=0))
        else:
            clip = T.mean(frame_logits, axis=0)
        return frame_logits, clip

    # ----------------------------------------------------------- forward

    def forward(self, rgb: np.ndarray | None, depth: np.ndarray | None, training: bool = False,
                rng: RngStream | None = None) -> ForwardResult:
        """Run the full network on one clip.

        ``rgb`` and ``depth`` are (k, 3, H, W) float arrays; the depth frames
        are already normalized and replicated to three channels. Streams the
        config does not use may be passed as ``None``.
        """
        c = self.config
        if training and c.dropout_rate > 0 and rng is None:
            raise ValueError("training mode with dropout needs an rng stream")
        inputs = {"rgb": rgb, "depth": depth}
        acts: dict[str, Tensor] = {}
        maps = AttentionMaps()
        encoded = {}
        for s in c.streams:
            if inputs[s] is None:
                raise ValueError(f"model uses the {s} stream but no {s} frames were given")
            f = self.embed_frames(s, inputs[s])
            if c.use_positional_encoding:
                f = f + positional_encoding(f.shape[0], c.d_model)
            acts[f"{s}.embed"] = f
            if c.use_encoder:
                f, m = self.encoder_forward(s, f, training, rng)
                for layer, a in enumerate(m):
                    maps.self_attention[(s, layer)] = a
            acts[f"{s}.encoded"] = f
            encoded[s] = f

        if c.modalities != "both":
            fused = encoded[c.modalities]
        else:
            fr, fd = encoded["rgb"], encoded["depth"]
            if c.fusion_block == "mutual":
                fr, fd, mm = self.mutual_attention(fr, fd, training, rng)
                maps.mutual.update(mm)
                acts["rgb.mutual"], acts["depth.mutual"] = fr, fd
            fused = fuse(fr, fd, c.fusion_mode)
        acts["fused"] = fused
        frame_logits, clip_logits = self.classify(fused)
        return ForwardResult(clip_logits, frame_logits, maps, acts)


def multi_head_attention(q_src: Tensor, kv_src: Tensor, params: dict[str, Tensor],
                         heads: int) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over frames, split into ``heads`` column blocks.

    Returns the output-projected (k, d) result and the (heads, k, k) weights.
    """
    k, d = q_src.shape
    if d % heads:
        raise ConfigError(f"width {d} is not divisible into {heads} heads")
    if kv_src.shape[1] != d:
        raise ConfigError(f"query width {d} differs from key/value width {kv_src.shape[1]}")
    dk = d // heads
    kv_len = kv_src.shape[0]

    def split(x: Tensor, n: int) -> Tensor:
        return T.transpose(T.reshape(x, (n, heads, dk)), (1, 0, 2))

    q = split(q_src @ params["wq"], k)
    key = split(kv_src @ params["wk"], kv_len)
    v = split(kv_src @ params["wv"], kv_len)
    scores = T.matmul(q, T.transpose(key)) * (1.0 / math.sqrt(dk))
    weights = T.softmax(scores, axis=-1)
    heads_out = T.matmul(weights, v)
    concat = T.reshape(T.transpose(heads_out, (1, 0, 2)), (k, d))
    return concat @ params["wo"] + params["bo"], weights.data.copy()


def fuse(a: Tensor, b: Tensor, mode: str) -> Tensor:
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    if a.shape != b.shape:
        raise ConfigError(f"cannot fuse shapes {a.shape} and {b.shape}")
    if mode == "add":
        return a + b
    if mode == "multiply":
        return a * b
    return T.concat([a, b], axis=-1)
