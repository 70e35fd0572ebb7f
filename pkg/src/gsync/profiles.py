"""Layer and network descriptors, plus the JSON profile format.

A profile is a flattened, forward-ordered chain of layers.  Branchy networks
(ResNet, GoogLeNet) are serialized into a single list; only per-layer
parameter counts, activation sizes and flop counts matter downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

DATA_DIR = Path(__file__).parent / "data"
SHIPPED = ("resnet50", "vgg16", "googlenet", "mlp")

# relative tolerance when a file carries its own fwd_flops_per_sample
FLOPS_RTOL = 1e-3


class ProfileError(Exception):
    pass


class ParseError(ProfileError):
    pass


class ValidationError(ProfileError):
    def __init__(self, message, layer_id=None, field_name=None):
        where = ""
        if layer_id is not None:
            where = f"layer {layer_id}"
            if field_name:
                where += f" field {field_name!r}"
            where += ": "
        super().__init__(where + message)
        self.layer_id = layer_id
        self.field_name = field_name


class Precision(Enum):
    """Wire/storage precision.  Value is (name, bytes per element, wire code)."""

    FP32 = ("fp32", 4, 0)
    FP16 = ("fp16", 2, 1)
    INT8 = ("int8", 1, 2)

    @property
    def label(self) -> str:
        return self.value[0]

    @property
    def itemsize(self) -> int:
        return self.value[1]

    @property
    def code(self) -> int:
        return self.value[2]

    @classmethod
    def parse(cls, text) -> "Precision":
        if isinstance(text, Precision):
            return text
        for p in cls:
            if p.label == str(text).strip().lower():
                return p
        raise ValueError(f"unknown precision {text!r}; expected one of fp32, fp16, int8")

    @classmethod
    def from_code(cls, code: int) -> "Precision":
        for p in cls:
            if p.code == code:
                return p
        raise ValueError(f"unknown precision code {code}")


class LayerKind(Enum):
    CONV = "Conv"
    FC = "FullyConnected"
    NONPARAM = "NonParam"


def derive_param_count(kind: LayerKind, C, K, KH, KW, has_bias) -> int:
    if kind is LayerKind.NONPARAM:
        return 0
    n = C * K * KH * KW if kind is LayerKind.CONV else C * K
    return n + (K if has_bias else 0)


def derive_fwd_flops(kind: LayerKind, C, K, OH, OW, KH, KW) -> int:
    if kind is LayerKind.CONV:
        return 2 * C * K * KH * KW * OH * OW
    if kind is LayerKind.FC:
        return 2 * C * K
    # pooling-style window op: one operation per window element per output
    return K * OH * OW * KH * KW


@dataclass(frozen=True)
class LayerDescriptor:
    id: int
    name: str
    kind: LayerKind
    in_channels: int
    out_channels: int
    out_h: int = 1
    out_w: int = 1
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    has_bias: bool = False
    param_count: int = -1
    fwd_flops_per_sample: float = -1

    def __post_init__(self):
        # fill derived fields so hand-built descriptors behave like loaded ones
        if self.param_count < 0:
            object.__setattr__(
                self,
                "param_count",
                derive_param_count(self.kind, self.in_channels, self.out_channels,
                                   self.kernel_h, self.kernel_w, self.has_bias),
            )
        if self.fwd_flops_per_sample < 0:
            object.__setattr__(
                self,
                "fwd_flops_per_sample",
                derive_fwd_flops(self.kind, self.in_channels, self.out_channels,
                                 self.out_h, self.out_w, self.kernel_h, self.kernel_w),
            )

    @property
    def parameterized(self) -> bool:
        return self.kind is not LayerKind.NONPARAM

    @property
    def activation_elements(self) -> int:
        """Output feature-map elements per sample (K * OH * OW)."""
        return self.out_channels * self.out_h * self.out_w

    def validate(self):
        for attr, key in _SHAPE_KEYS:
            v = getattr(self, attr)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValidationError(f"must be an integer >= 1, got {v!r}", self.id, key)
        if self.kind is LayerKind.FC:
            for attr, key in (("out_h", "OH"), ("out_w", "OW"), ("kernel_h", "KH"), ("kernel_w", "KW")):
                if getattr(self, attr) != 1:
                    raise ValidationError("must be 1 for a FullyConnected layer", self.id, key)
        expected = derive_param_count(self.kind, self.in_channels, self.out_channels,
                                      self.kernel_h, self.kernel_w, self.has_bias)
        if self.param_count != expected:
            raise ValidationError(
                f"param_count {self.param_count} contradicts shapes (expected {expected})",
                self.id, "param_count")
        if self.parameterized:
            flops = derive_fwd_flops(self.kind, self.in_channels, self.out_channels,
                                     self.out_h, self.out_w, self.kernel_h, self.kernel_w)
            if abs(self.fwd_flops_per_sample - flops) > FLOPS_RTOL * flops:
                raise ValidationError(
                    f"fwd_flops_per_sample {self.fwd_flops_per_sample} contradicts shapes "
                    f"(expected {flops})", self.id, "fwd_flops_per_sample")
        elif self.fwd_flops_per_sample < 0:
            raise ValidationError("must be >= 0", self.id, "fwd_flops_per_sample")


_SHAPE_KEYS = (
    ("in_channels", "C"),
    ("out_channels", "K"),
    ("out_h", "OH"),
    ("out_w", "OW"),
    ("kernel_h", "KH"),
    ("kernel_w", "KW"),
    ("stride", "stride"),
)
_REQUIRED = {"id", "name", "kind", "has_bias"} | {k for _, k in _SHAPE_KEYS}
_OPTIONAL = {"param_count", "fwd_flops_per_sample"}
_TOP_KEYS = {"name", "default_minibatch", "layers"}


@dataclass(frozen=True)
class ModelProfile:
    name: str
    layers: tuple = field(default_factory=tuple)
    default_minibatch: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    @property
    def param_layers(self) -> list:
        return [layer for layer in self.layers if layer.parameterized]

    def validate(self):
        if not isinstance(self.default_minibatch, int) or self.default_minibatch < 1:
            raise ValidationError(f"default_minibatch must be >= 1, got {self.default_minibatch!r}")
        for i, layer in enumerate(self.layers):
            if layer.id != i:
                raise ValidationError(f"layer ids must be 0..L-1 in order; position {i} has id {layer.id}",
                                      layer.id, "id")
            layer.validate()
        if not self.param_layers:
            raise ValidationError(f"profile {self.name!r} has no parameterized layer")
        return self


def total_params(profile: ModelProfile) -> int:
    return sum(layer.param_count for layer in profile.layers)


def _layer_from_dict(d: dict, position: int) -> LayerDescriptor:
    if not isinstance(d, dict):
        raise ParseError(f"layer entry {position} is not an object")
    unknown = set(d) - _REQUIRED - _OPTIONAL
    if unknown:
        raise ParseError(f"layer entry {position}: unknown field(s) {sorted(unknown)}")
    missing = _REQUIRED - set(d)
    if missing:
        raise ParseError(f"layer entry {position}: missing field(s) {sorted(missing)}")
    try:
        kind = LayerKind(d["kind"])
    except ValueError:
        raise ParseError(f"layer entry {position}: unknown kind {d['kind']!r}") from None
    if not isinstance(d["has_bias"], bool):
        raise ParseError(f"layer entry {position}: has_bias must be true/false")
    if not isinstance(d["name"], str):
        raise ParseError(f"layer entry {position}: name must be a string")
    for key in ["id"] + [k for _, k in _SHAPE_KEYS] + ["param_count"]:
        if key in d and (not isinstance(d[key], int) or isinstance(d[key], bool)):
            raise ParseError(f"layer entry {position}: {key} must be an integer")
    flops = d.get("fwd_flops_per_sample", -1)
    if isinstance(flops, bool) or not isinstance(flops, (int, float)):
        raise ParseError(f"layer entry {position}: fwd_flops_per_sample must be a number")
    return LayerDescriptor(
        id=d["id"],
        name=d["name"],
        kind=kind,
        in_channels=d["C"],
        out_channels=d["K"],
        out_h=d["OH"],
        out_w=d["OW"],
        kernel_h=d["KH"],
        kernel_w=d["KW"],
        stride=d["stride"],
        has_bias=d["has_bias"],
        param_count=d.get("param_count", -1),
        fwd_flops_per_sample=flops,
    )


def profile_from_dict(doc) -> ModelProfile:
    if not isinstance(doc, dict):
        raise ParseError("profile must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ParseError(f"unknown top-level field(s) {sorted(unknown)}")
    missing = _TOP_KEYS - set(doc)
    if missing:
        raise ParseError(f"missing top-level field(s) {sorted(missing)}")
    if not isinstance(doc["layers"], list):
        raise ParseError("layers must be a list")
    if not isinstance(doc["name"], str):
        raise ParseError("name must be a string")
    mb = doc["default_minibatch"]
    if not isinstance(mb, int) or isinstance(mb, bool):
        raise ParseError("default_minibatch must be an integer")
    layers = [_layer_from_dict(d, i) for i, d in enumerate(doc["layers"])]
    return ModelProfile(doc["name"], layers, mb).validate()


def profile_to_dict(profile: ModelProfile) -> dict:
    layers = []
    for layer in profile.layers:
        layers.append({
            "id": layer.id,
            "name": layer.name,
            "kind": layer.kind.value,
            "C": layer.in_channels,
            "K": layer.out_channels,
            "OH": layer.out_h,
            "OW": layer.out_w,
            "KH": layer.kernel_h,
            "KW": layer.kernel_w,
            "stride": layer.stride,
            "has_bias": layer.has_bias,
            "param_count": layer.param_count,
            "fwd_flops_per_sample": layer.fwd_flops_per_sample,
        })
    return {"name": profile.name, "default_minibatch": profile.default_minibatch, "layers": layers}


def load_profile(path) -> ModelProfile:
    """Load and validate a profile file.

    ``path`` may also be the bare name of a shipped profile (``"resnet50"``).
    Raises ParseError for malformed files and ValidationError for shape
    invariant violations.
    """
    p = Path(path)
    if not p.exists() and str(path) in SHIPPED:
        p = DATA_DIR / f"{path}.json"
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read profile {str(path)!r}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{p}: {e}") from e
    return profile_from_dict(doc)


def save_profile(profile: ModelProfile, path):
    Path(path).write_text(json.dumps(profile_to_dict(profile), indent=1) + "\n", encoding="utf-8")


def shipped_profile(name: str) -> ModelProfile:
    return load_profile(DATA_DIR / f"{name}.json")


def chain(name: str, layers: Iterable[dict], default_minibatch: int = 32) -> ModelProfile:
    """Build a profile from dicts lacking ids; ids assigned in order."""
    descs = []
    for i, kw in enumerate(layers):
        descs.append(LayerDescriptor(id=i, **kw))
    return ModelProfile(name, descs, default_minibatch).validate()
