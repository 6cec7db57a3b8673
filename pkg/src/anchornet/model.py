"""AnchorNet-T: a 1D convolutional text localizer with three receptive fields.

Shared head of 1x1 convolutions, then one branch per kernel size j.  Each
branch produces a class map ``F^j = F_raw^j * S`` (attention-weighted),
averaged over positions for its class distribution, so every position's
contribution to the decision stays separable and maps to a span of j tokens.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .corpus import PAD, UNK
from .errors import InvalidArgument, ParseError
from .localize import Heatmap
from .rf import LayerGeom, compose, span_geometry


def ini_value(v) -> str:
    """Config field as INI text; floats use repr so they round-trip exactly."""
    if isinstance(v, tuple):
        return " ".join(map(str, v))
    return repr(v) if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    seq_len: int = 59
    head_channels: tuple[int, ...] = (32, 64)
    branch_kernels: tuple[int, ...] = (3, 5, 7)
    branch_channels: int = 128
    attention_channels: int = 64
    num_classes: int = 2
    nonlinearity: str = "relu"
    aux_loss_weight: float = 1.0
    pad_index: int = PAD
    unk_index: int = UNK
    embed_init: float = 0.1

    def __post_init__(self):
        ks = self.branch_kernels
        if not ks or any(k % 2 == 0 or k < 1 for k in ks) or list(ks) != sorted(set(ks)):
            raise InvalidArgument(f"branch_kernels must be strictly increasing odd integers, got {ks}")
        if self.seq_len < max(ks):
            raise InvalidArgument(f"seq_len {self.seq_len} is shorter than the widest kernel {max(ks)}")
        if self.nonlinearity not in ad.NONLINEARITIES:
            raise InvalidArgument(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.vocab_size < 2 or self.num_classes < 2:
            raise InvalidArgument("need vocab_size >= 2 and num_classes >= 2")

    @property
    def feature_channels(self) -> int:
        return self.head_channels[-1] if self.head_channels else self.embed_dim

    def branch_layers(self, k: int) -> list[LayerGeom]:
        """Geometry of the path from tokens to branch k's class map."""
        head = [LayerGeom.span(1, name=f"head{i}") for i in range(len(self.head_channels))]
        return head + [LayerGeom.span(k, name=f"b{k}.conv"), LayerGeom.span(1, name=f"b{k}.cls")]

    def branch_length(self, k: int) -> int:
        return self.seq_len - k + 1

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        values = {f.name: ini_value(getattr(self, f.name)) for f in fields(self)}
        parser["model"] = {"format": "anchornet-t", "version": "1", **values}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ModelConfig":
        """Parse ``to_text`` output; ``overrides`` replace parsed fields (e.g. vocab_size)."""
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
            sect = dict(parser["model"])
        except (configparser.Error, KeyError) as exc:
            raise ParseError(f"bad model config: {exc}") from None
        if sect.pop("format", None) != "anchornet-t" or sect.pop("version", None) != "1":
            raise ParseError("not an anchornet-t v1 model config")
        kwargs = {}
        try:
            for f in fields(cls):
                if f.name not in sect:
                    continue
                raw = sect.pop(f.name)
                default = f.default
                if f.name in ("head_channels", "branch_kernels"):
                    kwargs[f.name] = tuple(int(t) for t in raw.split())
                elif f.name == "nonlinearity":
                    kwargs[f.name] = raw
                elif isinstance(default, float):
                    kwargs[f.name] = float(raw)
                else:
                    kwargs[f.name] = int(raw)
        except ValueError as exc:
            raise ParseError(f"bad model config value: {exc}") from None
        if sect:
            raise ParseError(f"unknown model config keys {sorted(sect)}")
        kwargs.update(overrides)
        if "vocab_size" not in kwargs:
            raise ParseError("model config has no vocab_size")
        return cls(**kwargs)


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Param]:
    """He-normal convolutions, small-normal class/aux layers, zero pad embedding row."""
    p: dict[str, Param] = {}

    def conv(name, k, c_in, c_out, std=None):
        std = np.sqrt(2.0 / (k * c_in)) if std is None else std
        p[f"{name}.w"] = Param(rng.normal(0.0, std, (k, c_in, c_out)), f"{name}.w")
        p[f"{name}.b"] = Param(np.zeros(c_out), f"{name}.b")

    table = rng.normal(0.0, config.embed_init, (config.vocab_size, config.embed_dim))
    table[config.pad_index] = 0.0
    p["embed"] = Param(table, "embed")
    c = config.embed_dim
    for i, c_out in enumerate(config.head_channels):
        conv(f"head{i}", 1, c, c_out)
        c = c_out
    for k in config.branch_kernels:
        conv(f"b{k}.conv", k, c, config.branch_channels)
        conv(f"b{k}.cls", 1, config.branch_channels, config.num_classes, std=0.01)
        conv(f"b{k}.att", 1, config.branch_channels, config.attention_channels)
        conv(f"b{k}.gate", 1, config.attention_channels, 1, std=0.01)
        p[f"b{k}.aux.w"] = Param(rng.normal(0.0, 0.01, (config.attention_channels, config.num_classes)),
                                 f"b{k}.aux.w")
        p[f"b{k}.aux.b"] = Param(np.zeros(config.num_classes), f"b{k}.aux.b")
    return p


@dataclass
class AttentionMaps:
    spatial_weights: Tensor  # G, softmax over positions of a 1-channel projection
    channel_attention: Tensor  # C
    spatial_attention: Tensor  # S
    pooled: Tensor  # S-weighted average of the attention features


def attention_branch(x: Tensor, proj_w: Tensor, proj_b: Tensor | None = None) -> AttentionMaps:
    """Chained softmax pooling over ``x[..., L, C]``.

    G = softmax_L(x @ proj); C = softmax_C(sum_L x * G);
    S = softmax_L(sum_C x * C).
    """
    lead = x.shape[:-1]
    g_raw = ad.linear(x, ad.reshape(proj_w, (proj_w.shape[-2], 1)), proj_b)
    G = ad.softmax(ad.reshape(g_raw, lead), axis=-1)
    c_raw = ad.tsum(x * ad.reshape(G, lead + (1,)), axis=-2)
    C = ad.softmax(c_raw, axis=-1)
    s_raw = ad.tsum(x * ad.reshape(C, c_raw.shape[:-1] + (1, c_raw.shape[-1])), axis=-1)
    S = ad.softmax(s_raw, axis=-1)
    pooled = ad.tsum(x * ad.reshape(S, lead + (1,)), axis=-2)
    return AttentionMaps(G, C, S, pooled)


@dataclass
class BranchOutput:
    kernel: int
    class_map: Tensor  # F^j [..., L_j, num_classes]
    raw_class_map: Tensor
    attention: AttentionMaps
    class_probs: Tensor
    aux_probs: Tensor

    @property
    def spatial_attention(self) -> Tensor:
        return self.attention.spatial_attention

    @property
    def channel_attention(self) -> Tensor:
        return self.attention.channel_attention


@dataclass
class ModelOutput:
    head: Tensor
    branches: list[BranchOutput] = field(default_factory=list)

    def branch(self, kernel: int) -> BranchOutput:
        for b in self.branches:
            if b.kernel == kernel:
                return b
        raise KeyError(kernel)


class AnchorNetT:
    def __init__(self, config: ModelConfig, params: dict[str, Param] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, np.random.default_rng(seed))

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def check_tokens(self, tokens) -> np.ndarray:
        idx = np.asarray(tokens, dtype=np.int64)
        if idx.shape[-1] != self.config.seq_len:
            raise InvalidArgument(f"token sequences must have length {self.config.seq_len}, got {idx.shape[-1]}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.config.vocab_size):
            raise InvalidArgument(f"token index outside vocabulary of {self.config.vocab_size}")
        return idx

    def embed(self, tokens) -> Tensor:
        idx = self.check_tokens(tokens)
        return ad.embedding(self.params["embed"], idx, frozen_row=self.config.pad_index)

    def forward(self, tokens) -> ModelOutput:
        """Forward one sequence ``[L]`` or a batch ``[B, L]`` of token indices."""
        return self.forward_embedded(self.embed(tokens))

    def forward_embedded(self, x: Tensor) -> ModelOutput:
        p, cfg = self.params, self.config
        act = ad.NONLINEARITIES[cfg.nonlinearity]
        h = x
        for i in range(len(cfg.head_channels)):
            h = act(ad.conv1d(h, p[f"head{i}.w"], p[f"head{i}.b"]))
        out = ModelOutput(h)
        for k in cfg.branch_kernels:
            z = act(ad.conv1d(h, p[f"b{k}.conv.w"], p[f"b{k}.conv.b"]))
            raw = ad.conv1d(z, p[f"b{k}.cls.w"], p[f"b{k}.cls.b"])
            feats = act(ad.conv1d(z, p[f"b{k}.att.w"], p[f"b{k}.att.b"]))
            att = attention_branch(feats, p[f"b{k}.gate.w"], p[f"b{k}.gate.b"])
            S = att.spatial_attention
            F = raw * ad.reshape(S, S.shape + (1,))
            probs = ad.softmax(ad.spatial_mean(F), axis=-1)
            aux = ad.softmax(ad.linear(att.pooled, p[f"b{k}.aux.w"], p[f"b{k}.aux.b"]), axis=-1)
            out.branches.append(BranchOutput(k, F, raw, att, probs, aux))
        return out

    def loss(self, tokens, labels) -> Tensor:
        return total_loss(self.forward(tokens), labels, self.config)

    def branch_probs(self, tokens) -> np.ndarray:
        """Class distributions ``[n_branches, B, num_classes]`` without recording."""
        out = self.forward(tokens)
        return np.stack([b.class_probs.data for b in out.branches])


def total_loss(outputs: ModelOutput, labels, config: ModelConfig) -> Tensor:
    """Sum of branch cross-entropies plus ``aux_loss_weight`` times the auxiliary ones."""
    loss = None
    for b in outputs.branches:
        term = ad.cross_entropy(b.class_probs, labels)
        if config.aux_loss_weight:
            term = term + ad.cross_entropy(b.aux_probs, labels) * config.aux_loss_weight
        loss = term if loss is None else loss + term
    return loss


def class_activation_map(output: BranchOutput, class_index: int, seq_len: int,
                         example: int | None = None) -> Heatmap:
    """Column ``class_index`` of a branch's class map, with its span geometry."""
    F = output.class_map.data
    if example is not None:
        F = F[example]
    if F.ndim != 2:
        raise InvalidArgument("pick one example from a batched output")
    if not 0 <= class_index < F.shape[-1]:
        raise InvalidArgument(f"class index {class_index} outside [0, {F.shape[-1]})")
    return Heatmap(F[:, class_index].copy(), span_geometry(output.kernel, seq_len),
                   class_index, output.kernel)


def branch_geometry(config: ModelConfig, k: int):
    return compose(config.branch_layers(k), (1, config.seq_len))


def accuracy_by_branch(model, tokens: np.ndarray, labels: np.ndarray, batch_size: int = 250) -> list[float]:
    """Per-branch argmax accuracy (one entry per row of ``model.branch_probs``)."""
    if len(labels) == 0:
        return []
    correct = 0
    for start in range(0, len(labels), batch_size):
        probs = model.branch_probs(tokens[start:start + batch_size])
        correct = correct + (probs.argmax(axis=-1) == labels[start:start + batch_size]).sum(axis=1)
    return [float(a) for a in correct / len(labels)]
