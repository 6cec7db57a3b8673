"""On-disk formats.

Checkpoints are one binary container::

    b"ANCHORNT"  magic (8 bytes)
    u32          format version
    u64          header length in bytes
    header       UTF-8 JSON: model kind, config text, vocab, metadata,
                 tensor names and shapes (in payload order)
    payload      each tensor as little-endian float64, C order
    sha256       32-byte digest of everything above

Heatmaps and patch sets are INI text with a ``format``/``version`` pair;
float values are written with ``repr`` so they read back bit-identical.
Localization records and metrics logs are JSON lines.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .autodiff import Param
from .errors import ChecksumError, CheckpointError, ParseError, VersionMismatch
from .localize import Heatmap, PatchSet, SelectedPatch
from .model import AnchorNetT, ModelConfig
from .rf import PatchRect, RFSummary
from .textcnn import TextCNN, TextCNNConfig

MAGIC = b"ANCHORNT"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32

MODEL_KINDS = {
    "anchornet-t": (ModelConfig, AnchorNetT),
    "textcnn": (TextCNNConfig, TextCNN),
}


@dataclass
class Checkpoint:
    kind: str
    config_text: str
    tensors: dict[str, np.ndarray]
    vocab: dict[str, int] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, vocab: dict[str, int] | None = None, metadata: dict | None = None) -> "Checkpoint":
        kind = next((k for k, (_, m) in MODEL_KINDS.items() if isinstance(model, m)), None)
        if kind is None:
            raise CheckpointError(f"cannot checkpoint a {type(model).__name__}")
        tensors = {name: p.data.copy() for name, p in model.params.items()}
        return cls(kind, model.config.to_text(), tensors, dict(vocab or {}), dict(metadata or {}))

    def config(self):
        return MODEL_KINDS[self.kind][0].from_text(self.config_text)

    def build(self):
        """Instantiate the model with these parameter values."""
        config_cls, model_cls = MODEL_KINDS[self.kind]
        params = {name: Param(arr.copy(), name) for name, arr in self.tensors.items()}
        return model_cls(config_cls.from_text(self.config_text), params=params)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    if ckpt.kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {ckpt.kind!r}")
    header = {
        "kind": ckpt.kind,
        "config": ckpt.config_text,
        "vocab": ckpt.vocab,
        "metadata": ckpt.metadata,
        "tensors": [[name, list(arr.shape)] for name, arr in ckpt.tensors.items()],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = io.BytesIO()
    body.write(_PREFIX.pack(MAGIC, CHECKPOINT_VERSION, len(head)))
    body.write(head)
    for arr in ckpt.tensors.values():
        body.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    data = body.getvalue()
    return data + hashlib.sha256(data).digest()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    """Checks, in order: magic, version, checksum, then header and payload sizes."""
    if len(data) < _PREFIX.size:
        raise ChecksumError("checkpoint truncated before its header")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not an anchornet checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    if len(data) < _PREFIX.size + _DIGEST or hashlib.sha256(data[:-_DIGEST]).digest() != data[-_DIGEST:]:
        raise ChecksumError("checkpoint checksum mismatch (truncated or corrupted)")
    body = data[:-_DIGEST]
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    missing = {"kind", "config", "vocab", "metadata", "tensors"} - set(header if isinstance(header, dict) else ())
    if missing:
        raise CheckpointError(f"checkpoint header lacks {sorted(missing)}")
    offset = _PREFIX.size + head_len
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + n > len(body):
            raise CheckpointError(f"payload of {name!r} runs past the end of the file")
        flat = np.frombuffer(body, dtype="<f8", count=n // 8, offset=offset)
        tensors[name] = flat.astype(np.float64).reshape(shape)
        offset += n
    if offset != len(body):
        raise CheckpointError(f"{len(body) - offset} unexpected bytes after the last tensor")
    if header["kind"] not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {header['kind']!r}")
    return Checkpoint(header["kind"], header["config"], tensors, header["vocab"], header["metadata"])


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# INI helpers ---------------------------------------------------------------

def _ini_text(sections: dict[str, dict[str, str]]) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for name, values in sections.items():
        parser[name] = values
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _ini_read(text: str, fmt: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ParseError(str(exc)) from None
    head = parser[fmt] if parser.has_section(fmt) else {}
    if head.get("format") != f"anchornet-{fmt}":
        raise ParseError(f"not an anchornet-{fmt} file")
    if head.get("version") != "1":
        raise ParseError(f"unsupported anchornet-{fmt} version {head.get('version')!r}")
    return parser


def _pair(text: str) -> tuple[int, int]:
    a, b = (int(t) for t in text.split())
    return a, b


def _floats(values: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


# heatmaps ------------------------------------------------------------------

def format_heatmap(hm: Heatmap) -> str:
    g = hm.geometry
    rows = "\n".join(_floats(row) for row in hm.values.reshape(-1, hm.values.shape[-1]))
    return _ini_text({"heatmap": {
        "format": "anchornet-heatmap", "version": "1",
        "class_index": str(hm.class_index), "branch": str(hm.branch),
        "rf": f"{g.rf[0]} {g.rf[1]}", "jump": f"{g.jump[0]} {g.jump[1]}",
        "start": f"{g.start[0]} {g.start[1]}", "n_layers": str(g.n_layers),
        "in_size": f"{g.in_size[0]} {g.in_size[1]}",
        "shape": " ".join(map(str, hm.values.shape)),
        "values": "\n" + rows,
    }})


def parse_heatmap(text: str) -> Heatmap:
    sect = _ini_read(text, "heatmap")["heatmap"]
    try:
        shape = tuple(int(t) for t in sect["shape"].split())
        values = np.array([float(t) for t in sect["values"].split()], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ParseError(f"heatmap has {values.size} values for shape {shape}")
        in_size = _pair(sect["in_size"])
        geo = RFSummary(_pair(sect["rf"]), _pair(sect["jump"]), _pair(sect["start"]), int(sect["n_layers"]))
        out_size = shape if len(shape) == 2 else (1, shape[0])
        geo = RFSummary(geo.rf, geo.jump, geo.start, geo.n_layers, in_size, out_size)
        return Heatmap(values.reshape(shape), geo, int(sect["class_index"]), int(sect["branch"]))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad heatmap field: {exc}") from None


# patch sets ----------------------------------------------------------------

def format_patch_set(ps: PatchSet) -> str:
    sections = {"patchset": {"format": "anchornet-patchset", "version": "1",
                             "count": str(len(ps)), "visited": str(ps.visited)}}
    for i, p in enumerate(ps.patches):
        r = p.rect
        sections[f"patch:{i}"] = {"rect": f"{r.top} {r.left} {r.height} {r.width}",
                                  "coord": f"{p.coord[0]} {p.coord[1]}",
                                  "activation": repr(p.activation)}
    return _ini_text(sections)


def parse_patch_set(text: str) -> PatchSet:
    parser = _ini_read(text, "patchset")
    try:
        count = int(parser["patchset"]["count"])
        patches = []
        for i in range(count):
            sect = parser[f"patch:{i}"]
            top, left, h, w = (int(t) for t in sect["rect"].split())
            patches.append(SelectedPatch(PatchRect(top, left, h, w), float(sect["activation"]),
                                         _pair(sect["coord"])))
        return PatchSet(patches, int(parser["patchset"]["visited"]))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad patch set field: {exc}") from None


# JSON lines ----------------------------------------------------------------

@dataclass(frozen=True)
class LocalizationRecord:
    doc: int  # corpus-wide document index
    label: int
    gamma: int
    theta: int  # receptive field (kernel) of the selected branch
    span: tuple[int, int]  # [start, end) token positions
    labels: tuple[int, ...]  # per-branch argmax Y^j
    confidences: tuple[float, ...]  # per-branch max probability P^j

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "LocalizationRecord":
        try:
            d = json.loads(line)
            return cls(int(d["doc"]), int(d["label"]), int(d["gamma"]), int(d["theta"]),
                       tuple(int(v) for v in d["span"]), tuple(int(v) for v in d["labels"]),
                       tuple(float(v) for v in d["confidences"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad localization record: {exc}") from None


def write_jsonl(path: str | Path, rows: Iterable) -> None:
    lines = [r.to_json() if hasattr(r, "to_json") else json.dumps(r, sort_keys=True) for r in rows]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_records(path: str | Path) -> list[LocalizationRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            try:
                out.append(LocalizationRecord.from_json(line))
            except ParseError as exc:
                raise ParseError(str(exc), lineno) from None
    return out
