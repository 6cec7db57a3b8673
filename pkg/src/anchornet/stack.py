"""Layer-stack configs: an INI file with one ``[layer:NAME]`` section per layer.

A layer consumes the previous layer's output unless ``inputs`` names other
layers (``input`` denotes the stack input), which is enough to describe
residual shortcuts, parallel filter banks and dense concatenation.

Example::

    [stack]
    format = anchornet-stack
    version = 1
    name = tiny
    input_channels = 3

    [layer:conv1]
    op = conv
    kernel = 3 3
    stride = 2 2
    out = 16
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import InvalidArgument, ParseError
from .rf import LayerGeom, Pair

FORMAT = "anchornet-stack"
VERSION = 1

SPATIAL_OPS = {"conv", "bneck", "maxpool", "avgpool"}
OPS = SPATIAL_OPS | {"fc", "gap", "act", "add", "concat"}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    op: str
    kernel: Pair = (1, 1)
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    in_channels: int | None = None
    out_channels: int | None = None
    groups: int = 1
    expansion: int | None = None
    inputs: tuple[str, ...] = ()
    tags: tuple[str, ...] = ()

    @property
    def geom(self) -> LayerGeom:
        return LayerGeom(self.kernel, self.stride, self.padding, self.name)


@dataclass
class StackConfig:
    name: str
    layers: list[LayerSpec]
    input_channels: int = 1
    one_d: bool = False
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.channels()

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def sources(self, index: int) -> tuple[str, ...]:
        spec = self.layers[index]
        if spec.inputs:
            return spec.inputs
        return (self.layers[index - 1].name,) if index else ("input",)

    def channels(self) -> dict[str, int]:
        """Output channels of every layer; raises if the chain is inconsistent."""
        chans = {"input": self.input_channels}
        for i, spec in enumerate(self.layers):
            if spec.name in chans:
                raise InvalidArgument(f"duplicate layer name {spec.name!r}")
            try:
                srcs = [chans[s] for s in self.sources(i)]
            except KeyError as exc:
                raise InvalidArgument(f"{spec.name}: unknown input {exc.args[0]!r}") from None
            if spec.op == "concat":
                chans[spec.name] = sum(srcs)
                continue
            if spec.op != "add" and len(srcs) != 1:
                raise InvalidArgument(f"{spec.name}: op {spec.op!r} takes exactly one input")
            if spec.op == "add" and len(set(srcs)) != 1:
                raise InvalidArgument(f"{spec.name}: add inputs disagree on channels {srcs}")
            c_in = srcs[0]
            if spec.in_channels is not None and spec.in_channels != c_in:
                raise InvalidArgument(
                    f"{spec.name}: declares {spec.in_channels} input channels, receives {c_in}"
                )
            if spec.op in ("conv", "bneck", "fc"):
                if spec.out_channels is None:
                    raise InvalidArgument(f"{spec.name}: {spec.op} needs 'out'")
                if c_in % spec.groups or spec.out_channels % spec.groups:
                    raise InvalidArgument(f"{spec.name}: channels not divisible by groups")
                chans[spec.name] = spec.out_channels
            else:
                chans[spec.name] = c_in
        return chans

    def is_chain(self) -> bool:
        return all(self.sources(i) == ((self.layers[i - 1].name,) if i else ("input",))
                   for i in range(len(self.layers)))

    def geometry(self) -> list[LayerGeom]:
        """Spatial layers of a plain chain, for receptive-field analysis."""
        if not self.is_chain():
            raise InvalidArgument(f"stack {self.name!r} is not a plain chain; RF analysis needs one")
        return [spec.geom for spec in self.layers if spec.op in SPATIAL_OPS]


def _ints(text: str, what: str, line: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise ParseError(f"{line}: bad integer list for {what}: {text!r}") from None


def parse_stack(text: str) -> StackConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ParseError(str(exc)) from None
    if not parser.has_section("stack"):
        raise ParseError("missing [stack] section")
    head = dict(parser["stack"])
    if head.pop("format", None) != FORMAT:
        raise ParseError(f"not an {FORMAT} file")
    version = head.pop("version", None)
    if version != str(VERSION):
        raise ParseError(f"unsupported stack version {version!r}")
    name = head.pop("name", "stack")
    one_d = head.pop("one_d", "false").lower() in ("1", "true", "yes")
    try:
        input_channels = int(head.pop("input_channels", "1"))
    except ValueError:
        raise ParseError("input_channels must be an integer") from None

    def pair(section, key, default):
        if key not in section:
            return default
        vals = _ints(section[key], key, section.name)
        if len(vals) == 1:
            return (1, vals[0]) if one_d else (vals[0], vals[0])
        if len(vals) != 2:
            raise ParseError(f"{section.name}: {key} needs one or two integers")
        return vals

    layers = []
    for sect_name in parser.sections():
        if sect_name == "stack":
            continue
        if not sect_name.startswith("layer:"):
            raise ParseError(f"unexpected section [{sect_name}]")
        sect = parser[sect_name]
        known = {"op", "kernel", "stride", "padding", "in", "out", "groups",
                 "expansion", "inputs", "tags"}
        extra = set(sect) - known
        if extra:
            raise ParseError(f"{sect_name}: unknown keys {sorted(extra)}")
        op = sect.get("op", "")
        if op not in OPS:
            raise ParseError(f"{sect_name}: unknown op {op!r}")

        def opt_int(key):
            if key not in sect:
                return None
            vals = _ints(sect[key], key, sect_name)
            if len(vals) != 1:
                raise ParseError(f"{sect_name}: {key} must be one integer")
            return vals[0]

        try:
            layers.append(LayerSpec(
                name=sect_name[len("layer:"):],
                op=op,
                kernel=pair(sect, "kernel", (1, 1)),
                stride=pair(sect, "stride", (1, 1)),
                padding=pair(sect, "padding", (0, 0)),
                in_channels=opt_int("in"),
                out_channels=opt_int("out"),
                groups=opt_int("groups") or 1,
                expansion=opt_int("expansion"),
                inputs=tuple(sect.get("inputs", "").replace(",", " ").split()),
                tags=tuple(sect.get("tags", "").split()),
            ))
            LayerGeom(layers[-1].kernel, layers[-1].stride, layers[-1].padding)
        except InvalidArgument as exc:
            raise ParseError(f"{sect_name}: {exc}") from None
    if not layers:
        raise ParseError("stack has no layers")
    try:
        return StackConfig(name, layers, input_channels, one_d, head)
    except InvalidArgument as exc:
        raise ParseError(str(exc)) from None


def format_stack(stack: StackConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    head = {"format": FORMAT, "version": str(VERSION), "name": stack.name,
            "input_channels": str(stack.input_channels)}
    if stack.one_d:
        head["one_d"] = "true"
    head.update(stack.metadata)
    parser["stack"] = head
    for spec in stack.layers:
        sect = {"op": spec.op}
        if spec.op in SPATIAL_OPS:
            sect["kernel"] = f"{spec.kernel[0]} {spec.kernel[1]}"
            sect["stride"] = f"{spec.stride[0]} {spec.stride[1]}"
            sect["padding"] = f"{spec.padding[0]} {spec.padding[1]}"
        for key, value in (("in", spec.in_channels), ("out", spec.out_channels),
                           ("expansion", spec.expansion)):
            if value is not None:
                sect[key] = str(value)
        if spec.groups != 1:
            sect["groups"] = str(spec.groups)
        if spec.inputs:
            sect["inputs"] = " ".join(spec.inputs)
        if spec.tags:
            sect["tags"] = " ".join(spec.tags)
        parser[f"layer:{spec.name}"] = sect
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load_stack(path: str | Path) -> StackConfig:
    return parse_stack(Path(path).read_text(encoding="utf-8"))


def builtin_stacks() -> list[str]:
    root = resources.files("anchornet") / "stacks"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def builtin_stack(name: str) -> StackConfig:
    path = resources.files("anchornet") / "stacks" / f"{name}.ini"
    if not path.is_file():
        raise InvalidArgument(f"no built-in stack {name!r}; known: {', '.join(builtin_stacks())}")
    return parse_stack(path.read_text(encoding="utf-8"))


def resolve_stack(ref: str) -> StackConfig:
    """A path to an INI file, or the name of a shipped stack."""
    if Path(ref).is_file():
        return load_stack(ref)
    return builtin_stack(ref)
