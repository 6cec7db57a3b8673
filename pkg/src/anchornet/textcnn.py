"""Downstream sentence classifier: parallel wide convolutions, max-over-time, softmax.

Used on the spans AnchorNet-T localizes.  Wide padding (``window - 1`` on
both sides) lets it classify spans shorter than its widest window.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .corpus import PAD
from .errors import InvalidArgument, ParseError
from .model import ini_value


@dataclass(frozen=True)
class TextCNNConfig:
    vocab_size: int
    embed_dim: int = 32
    seq_len: int = 59
    windows: tuple[int, ...] = (3, 4, 5)
    feature_maps: int = 100
    num_classes: int = 2
    pad_index: int = PAD
    embed_init: float = 0.1

    def __post_init__(self):
        if not self.windows or min(self.windows) < 1:
            raise InvalidArgument(f"windows must be positive, got {self.windows}")
        if self.vocab_size < 2 or self.num_classes < 2 or self.feature_maps < 1:
            raise InvalidArgument("need vocab_size >= 2, num_classes >= 2, feature_maps >= 1")

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        values = {f.name: ini_value(getattr(self, f.name)) for f in fields(self)}
        parser["textcnn"] = {"format": "anchornet-textcnn", "version": "1", **values}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TextCNNConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
            sect = dict(parser["textcnn"])
        except (configparser.Error, KeyError) as exc:
            raise ParseError(f"bad textcnn config: {exc}") from None
        if sect.pop("format", None) != "anchornet-textcnn" or sect.pop("version", None) != "1":
            raise ParseError("not an anchornet-textcnn v1 config")
        kwargs = {}
        try:
            for f in fields(cls):
                if f.name in sect:
                    raw = sect.pop(f.name)
                    if f.name == "windows":
                        kwargs[f.name] = tuple(int(t) for t in raw.split())
                    elif isinstance(f.default, float):
                        kwargs[f.name] = float(raw)
                    else:
                        kwargs[f.name] = int(raw)
        except ValueError as exc:
            raise ParseError(f"bad textcnn config value: {exc}") from None
        if sect:
            raise ParseError(f"unknown textcnn config keys {sorted(sect)}")
        kwargs.update(overrides)
        if "vocab_size" not in kwargs:
            raise ParseError("textcnn config has no vocab_size")
        return cls(**kwargs)


class TextCNN:
    def __init__(self, config: TextCNNConfig, params: dict[str, Param] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else self._init(np.random.default_rng(seed))

    def _init(self, rng) -> dict[str, Param]:
        cfg = self.config
        table = rng.normal(0.0, cfg.embed_init, (cfg.vocab_size, cfg.embed_dim))
        table[cfg.pad_index] = 0.0
        p = {"embed": Param(table, "embed")}
        for w in cfg.windows:
            std = np.sqrt(2.0 / (w * cfg.embed_dim))
            p[f"conv{w}.w"] = Param(rng.normal(0.0, std, (w, cfg.embed_dim, cfg.feature_maps)), f"conv{w}.w")
            p[f"conv{w}.b"] = Param(np.zeros(cfg.feature_maps), f"conv{w}.b")
        n_in = cfg.feature_maps * len(cfg.windows)
        p["fc.w"] = Param(rng.normal(0.0, 0.01, (n_in, cfg.num_classes)), "fc.w")
        p["fc.b"] = Param(np.zeros(cfg.num_classes), "fc.b")
        return p

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def embed(self, tokens) -> Tensor:
        idx = np.asarray(tokens, dtype=np.int64)
        if idx.shape[-1] < 1:
            raise InvalidArgument("cannot classify an empty span")
        if idx.size and (idx.min() < 0 or idx.max() >= self.config.vocab_size):
            raise InvalidArgument(f"token index outside vocabulary of {self.config.vocab_size}")
        return ad.embedding(self.params["embed"], idx, frozen_row=self.config.pad_index)

    def forward_embedded(self, x: Tensor) -> Tensor:
        p = self.params
        pooled = []
        for w in self.config.windows:
            h = ad.relu(ad.conv1d(x, p[f"conv{w}.w"], p[f"conv{w}.b"], padding=w - 1))
            pooled.append(ad.tmax(h, axis=-2))
        return ad.softmax(ad.linear(ad.concat(pooled, axis=-1), p["fc.w"], p["fc.b"]), axis=-1)

    def forward(self, tokens) -> Tensor:
        """Class distribution for a span ``[L]`` or batch ``[B, L]`` of any length >= 1."""
        return self.forward_embedded(self.embed(tokens))

    def loss(self, tokens, labels) -> Tensor:
        return ad.cross_entropy(self.forward(tokens), labels)

    def branch_probs(self, tokens) -> np.ndarray:
        return self.forward(tokens).data[None]
