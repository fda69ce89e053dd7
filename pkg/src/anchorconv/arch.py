"""Network families built around anchored (shared) convolution kernels.

Five families share one declarative description, ``NetworkSpec``:

* ``plain`` - constant channel count; every body convolution reads the single
  kernel entry ``W_conv_G``; each layer keeps its own free batch norm.
* ``plain_residual`` - same sharing, body layers paired into identity-shortcut
  residual blocks (required for depths beyond 17).
* ``mixed`` / ``mixed_residual`` - sharing restricted to the layers between
  pooling boundaries: section ``s`` reads ``W_conv_S{s}``, and a 3x3
  transition convolution performs each channel expansion (the residual
  variant adds a 1x1 projection on each expanding shortcut).
* ``free`` - identical topology, but every convolution owns its own kernel;
  the reference point the shared families are measured against.

The body depth L counts body convolutions only; the expansion/transition
layers and the classifier are excluded. Pooling splits the body into
``sections`` contiguous stages, as equal as possible with earlier stages
taking the remainder, one 2x2 max pool after each stage but the last, then
global average pooling feeds a single linear classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeError, SpecError
from .ops import (
    BNState,
    add,
    batchnorm,
    conv2d,
    global_avg_pool,
    linear,
    maxpool2,
    relu,
)
from .tensor import Graph, ParamStore, Tensor, randn, zeros

FAMILIES = ("plain", "plain_residual", "mixed", "mixed_residual", "free")
DEFAULT_MIX_PATTERN = (64, 128, 256, 512)
MAX_NONRESIDUAL_DEPTH = 17  # deeper stacks need residual learning to stay optimizable

SHARED_KERNEL = "W_conv_G"
EXPANSION_KERNEL = "W_conv_1"
CLASSIFIER_WEIGHT = "W_fc"
CLASSIFIER_BIAS = "b_fc"


def split_evenly(total: int, parts: int) -> list[int]:
    """Near-equal partition of ``total`` into ``parts``, remainder first."""
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


@dataclass
class NetworkSpec:
    """Declarative architecture description.

    ``channels`` is a single int for constant-width families or a per-section
    expansion pattern. ``regulators`` holds 1-based section indices whose
    residual blocks each receive one unshared 1x1 conv + BN + ReLU block.
    ``section_layers`` optionally pins the per-section body layer counts
    (defaults to the near-equal split); it is what lets ``free`` specs
    reproduce reference layouts whose depth is deliberately lopsided.
    """

    family: str
    depth: int
    channels: int | tuple[int, ...]
    num_classes: int
    sections: int = 4
    regulators: frozenset[int] = field(default_factory=frozenset)
    input_shape: tuple[int, int, int] = (3, 32, 32)
    section_layers: tuple[int, ...] | None = None
    batchnorm: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.depth < 3:
            raise SpecError(f"depth must be >= 3, got {self.depth}")
        if self.num_classes < 2:
            raise SpecError(f"need at least 2 classes, got {self.num_classes}")
        if self.sections < 1:
            raise SpecError(f"sections must be >= 1, got {self.sections}")

        if isinstance(self.channels, int):
            if self.family in ("mixed", "mixed_residual"):
                raise SpecError(f"family {self.family!r} needs a channel expansion pattern")
            if self.channels < 1:
                raise SpecError(f"channel count must be >= 1, got {self.channels}")
        else:
            self.channels = tuple(int(c) for c in self.channels)
            if self.family in ("plain", "plain_residual"):
                raise SpecError(f"family {self.family!r} needs a single constant channel count")
            if len(self.channels) != self.sections:
                raise SpecError(
                    f"channel pattern length {len(self.channels)} != sections {self.sections}"
                )
            if any(c < 1 for c in self.channels):
                raise SpecError("channel pattern entries must be >= 1")

        if self.depth > MAX_NONRESIDUAL_DEPTH and self.family in ("plain", "mixed"):
            raise SpecError(
                f"depth {self.depth} exceeds {MAX_NONRESIDUAL_DEPTH}; use the residual variant"
            )

        self.input_shape = tuple(int(x) for x in self.input_shape)
        if len(self.input_shape) != 3:
            raise SpecError(f"input_shape must be (C, H, W), got {self.input_shape}")
        cin, h, w = self.input_shape
        if cin != 3:
            raise SpecError(f"input must be 3-channel, got {cin}")
        if h < 1 or w < 1:
            raise SpecError(f"invalid input extent {h}x{w}")
        if self.sections > int(math.floor(math.log2(min(h, w)))):
            raise SpecError(
                f"{self.sections} sections exceed floor(log2({min(h, w)})) for {h}x{w} input"
            )
        step = 2 ** (self.sections - 1)
        if h % step or w % step:
            raise SpecError(f"input {h}x{w} not divisible by 2^(sections-1)={step}")

        self.regulators = frozenset(int(s) for s in self.regulators)
        if self.regulators and not self.residual_topology:
            raise SpecError("regulators attach to residual blocks; use a residual family")
        bad = [s for s in self.regulators if not (1 <= s <= self.sections)]
        if bad:
            raise SpecError(f"regulator section indices out of range: {sorted(bad)}")

        if self.section_layers is not None:
            self.section_layers = tuple(int(n) for n in self.section_layers)
            if len(self.section_layers) != self.sections:
                raise SpecError(
                    f"section_layers length {len(self.section_layers)} != sections {self.sections}"
                )
            if any(n < 0 for n in self.section_layers):
                raise SpecError("section_layers entries must be >= 0")
            if sum(self.section_layers) != self.depth:
                raise SpecError(
                    f"section_layers sum {sum(self.section_layers)} != depth {self.depth}"
                )

    @property
    def residual_topology(self) -> bool:
        if self.family in ("plain_residual", "mixed_residual"):
            return True
        # free specs mirror their shared counterpart at the same depth
        return self.family == "free" and self.depth > MAX_NONRESIDUAL_DEPTH

    @property
    def channel_pattern(self) -> tuple[int, ...]:
        if isinstance(self.channels, int):
            return (self.channels,) * self.sections
        return self.channels

    def body_split(self) -> list[int]:
        if self.section_layers is not None:
            return list(self.section_layers)
        return split_evenly(self.depth, self.sections)


# ---------------------------------------------------------------------------
# layers

class _StopForward(Exception):
    """Internal: raised once a requested conv activation has been captured."""

    def __init__(self, captured: Tensor):
        self.captured = captured


class _ForwardCtx:
    __slots__ = ("params", "mode", "capture_index", "_conv_cursor")

    def __init__(self, params: ParamStore, mode: str, capture_index: int | None = None):
        self.params = params
        self.mode = mode
        self.capture_index = capture_index
        self._conv_cursor = 0

    def note_conv(self, raw: Tensor) -> None:
        cursor = self._conv_cursor
        self._conv_cursor += 1
        if self.capture_index is not None and cursor == self.capture_index:
            raise _StopForward(raw)


class ConvUnit:
    """One convolution, optionally followed by batch norm and ReLU."""

    def __init__(
        self,
        kernel_name: str,
        bn: BNState | None,
        apply_relu: bool,
        stride: int = 1,
        padding: int = 1,
    ):
        self.kernel_name = kernel_name
        self.bn = bn
        self.apply_relu = apply_relu
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor, ctx: _ForwardCtx) -> Tensor:
        out = conv2d(x, ctx.params[self.kernel_name], self.stride, self.padding)
        ctx.note_conv(out)
        if self.bn is not None:
            self.bn.mode = ctx.mode
            out = batchnorm(out, self.bn)
        if self.apply_relu:
            out = relu(out)
        return out


class ResidualBlock:
    """Conv units plus a shortcut, added before the final ReLU.

    The shortcut is the identity unless the block expands channels, in which
    case it is a bare 1x1 projection convolution.
    """

    def __init__(self, units: list[ConvUnit], projection: ConvUnit | None = None):
        self.units = units
        self.projection = projection

    def forward(self, x: Tensor, ctx: _ForwardCtx) -> Tensor:
        out = x
        for unit in self.units:
            out = unit.forward(out, ctx)
        shortcut = self.projection.forward(x, ctx) if self.projection is not None else x
        return relu(add(out, shortcut))


class MaxPool:
    def forward(self, x: Tensor, ctx: _ForwardCtx) -> Tensor:
        return maxpool2(x)


class GlobalPool:
    def forward(self, x: Tensor, ctx: _ForwardCtx) -> Tensor:
        return global_avg_pool(x)


class Classifier:
    def __init__(self, weight_name: str, bias_name: str):
        self.weight_name = weight_name
        self.bias_name = bias_name

    def forward(self, x: Tensor, ctx: _ForwardCtx) -> Tensor:
        return linear(x, ctx.params[self.weight_name], ctx.params[self.bias_name])


def _iter_conv_units(layers):
    for layer in layers:
        if isinstance(layer, ConvUnit):
            yield layer
        elif isinstance(layer, ResidualBlock):
            yield from layer.units
            if layer.projection is not None:
                yield layer.projection


# ---------------------------------------------------------------------------
# parameter reporting

@dataclass
class ParamGroup:
    name: str
    shapes: list[tuple[int, ...]]
    count: int
    shared_use_count: int


@dataclass
class ParamReport:
    groups: list[ParamGroup]
    total: int
    total_millions: float

    def format_table(self) -> str:
        lines = [f"{'group':<18} {'shape':<24} {'params':>10} {'uses':>6}"]
        for g in self.groups:
            shape = "+".join("x".join(str(d) for d in s) for s in g.shapes)
            lines.append(f"{g.name:<18} {shape:<24} {g.count:>10} {g.shared_use_count:>6}")
        lines.append(f"{'total':<18} {'':<24} {self.total:>10}")
        lines.append(f"total (M) = {self.total / 1e6:.4f}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# network and builders

class Network:
    """A built network: executable layer list over a ParamStore."""

    def __init__(self, spec: NetworkSpec, params: ParamStore, layers: list, param_groups):
        self.spec = spec
        self.params = params
        self.layers = layers
        self.param_groups = param_groups  # [(group name, [entry names])] in creation order
        self.num_conv_layers = sum(1 for _ in _iter_conv_units(layers))

    def forward(self, batch: Tensor, mode: str) -> Tensor:
        """Run the network; returns logits of shape (N, num_classes).

        With an active Graph the pass is recorded for backward and the
        store's use counts are refreshed. Train mode additionally updates
        batch-norm running statistics.
        """
        if mode not in ("train", "eval"):
            raise ShapeError(f"mode must be 'train' or 'eval', got {mode!r}")
        if batch.data.ndim != 4 or batch.shape[1:] != self.spec.input_shape:
            raise ShapeError(
                f"batch shape {list(batch.shape)} incompatible with input {self.spec.input_shape}"
            )
        ctx = _ForwardCtx(self.params, mode)
        out = batch
        for layer in self.layers:
            out = layer.forward(out, ctx)
        g = Graph.current()
        if g is not None:
            self.params.record_use_counts(g)
        return out

    def conv_activation(self, batch: Tensor, conv_index: int, mode: str = "eval") -> Tensor:
        """Raw (pre-norm, pre-activation) output map of one convolution.

        ``conv_index`` counts convolutions in execution order, 0-based,
        projections and regulators included.
        """
        if not (0 <= conv_index < self.num_conv_layers):
            raise ShapeError(
                f"conv index {conv_index} out of range [0, {self.num_conv_layers})"
            )
        ctx = _ForwardCtx(self.params, mode, capture_index=conv_index)
        out = batch
        try:
            for layer in self.layers:
                out = layer.forward(out, ctx)
        except _StopForward as stop:
            return stop.captured
        raise AssertionError("capture index validated but never reached")

    def static_use_counts(self) -> dict[str, int]:
        """Use-sites per entry from the topology alone (no forward needed)."""
        counts = dict.fromkeys(self.params.entries, 0)
        for unit in _iter_conv_units(self.layers):
            counts[unit.kernel_name] += 1
        for group_name, members in self.param_groups:
            for m in members:
                if counts[m] == 0:
                    counts[m] = 1  # BN and classifier entries have one site each
        return counts


class _Assembler:
    """Tracks parameter creation, naming, grouping, and seeded init."""

    def __init__(self, init_seed: int, use_batchnorm: bool):
        self.store = ParamStore()
        self.groups: list[tuple[str, list[str]]] = []
        self.use_batchnorm = use_batchnorm
        self._init_seed = init_seed
        self._draws = 0
        self._bn_index = 0

    def _next_seed(self) -> int:
        self._draws += 1
        return self._init_seed * 1_000_003 + self._draws

    def conv_kernel(self, name: str, cout: int, cin: int, kh: int, kw: int) -> str:
        scale = math.sqrt(2.0 / (cin * kh * kw))
        self.store.add_param(name, randn((cout, cin, kh, kw), self._next_seed(), scale))
        self.groups.append((name, [name]))
        return name

    def bn(self, channels: int) -> BNState | None:
        if not self.use_batchnorm:
            return None
        self._bn_index += 1
        prefix = f"W_bn_{self._bn_index}"
        gamma = self.store.add_param(f"{prefix}.gamma", Tensor(np.ones(channels)))
        beta = self.store.add_param(f"{prefix}.beta", zeros((channels,)))
        rmean = self.store.add_buffer(f"{prefix}.running_mean", Tensor(np.zeros(channels)))
        rvar = self.store.add_buffer(f"{prefix}.running_var", Tensor(np.ones(channels)))
        self.groups.append((prefix, [f"{prefix}.gamma", f"{prefix}.beta"]))
        return BNState(gamma, beta, rmean, rvar)

    def classifier(self, features: int, classes: int) -> Classifier:
        scale = math.sqrt(2.0 / features)
        self.store.add_param(CLASSIFIER_WEIGHT, randn((classes, features), self._next_seed(), scale))
        self.store.add_param(CLASSIFIER_BIAS, zeros((classes,)))
        self.groups.append(("classifier", [CLASSIFIER_WEIGHT, CLASSIFIER_BIAS]))
        return Classifier(CLASSIFIER_WEIGHT, CLASSIFIER_BIAS)

    def unit(self, kernel_name: str, channels: int, apply_relu: bool, padding: int = 1) -> ConvUnit:
        return ConvUnit(kernel_name, self.bn(channels), apply_relu, padding=padding)


def _body_kernel_provider(asm: _Assembler, spec: NetworkSpec):
    """Returns section -> callable giving the kernel name for the next body conv."""
    free = spec.family == "free"
    pattern = spec.channel_pattern
    mixed_shape = not isinstance(spec.channels, int)
    next_free_index = [2]  # body convolutions are numbered from 2, after the expansion

    def for_section(s: int):
        c = pattern[s - 1]
        if free:
            def fresh() -> str:
                name = f"W_conv_{next_free_index[0]}"
                next_free_index[0] += 1
                return asm.conv_kernel(name, c, c, 3, 3)
            return fresh
        if mixed_shape:
            name = f"W_conv_S{s}"
        else:
            name = SHARED_KERNEL
        created = [False]

        def shared() -> str:
            if not created[0] and name not in asm.store:
                asm.conv_kernel(name, c, c, 3, 3)
            created[0] = True
            return name

        return shared

    return for_section


def _assemble(spec: NetworkSpec, init_seed: int) -> Network:
    asm = _Assembler(init_seed, spec.batchnorm)
    pattern = spec.channel_pattern
    counts = spec.body_split()
    residual = spec.residual_topology
    mixed_shape = not isinstance(spec.channels, int)
    provider = _body_kernel_provider(asm, spec)

    layers: list = []
    if not mixed_shape:
        # single expansion from the 3-channel image to the working width
        c = pattern[0]
        asm.conv_kernel(EXPANSION_KERNEL, c, 3, 3, 3)
        layers.append(asm.unit(EXPANSION_KERNEL, c, apply_relu=True))

    cin = pattern[0] if not mixed_shape else 3
    for s in range(1, spec.sections + 1):
        c = pattern[s - 1]
        n = counts[s - 1]
        next_kernel = provider(s)
        reg_index = 0

        def regulator() -> ConvUnit:
            nonlocal reg_index
            reg_index += 1
            name = asm.conv_kernel(f"W_conv_R{s}_{reg_index}", c, c, 1, 1)
            return asm.unit(name, c, apply_relu=True, padding=0)

        remaining = n
        if mixed_shape:
            if residual and remaining >= 1:
                # the expanding transition lives inside the section's first
                # block, so its shortcut needs a 1x1 projection
                asm.conv_kernel(f"W_conv_T{s}", c, cin, 3, 3)
                proj_name = asm.conv_kernel(f"W_conv_P{s}", c, cin, 1, 1)
                block = ResidualBlock(
                    [
                        asm.unit(f"W_conv_T{s}", c, apply_relu=True),
                        asm.unit(next_kernel(), c, apply_relu=False),
                    ],
                    projection=ConvUnit(proj_name, None, False, padding=0),
                )
                layers.append(block)
                if s in spec.regulators:
                    layers.append(regulator())
                remaining -= 1
            else:
                asm.conv_kernel(f"W_conv_T{s}", c, cin, 3, 3)
                layers.append(asm.unit(f"W_conv_T{s}", c, apply_relu=True))

        if residual:
            while remaining >= 2:
                block = ResidualBlock(
                    [
                        asm.unit(next_kernel(), c, apply_relu=True),
                        asm.unit(next_kernel(), c, apply_relu=False),
                    ]
                )
                layers.append(block)
                if s in spec.regulators:
                    layers.append(regulator())
                remaining -= 2
            if remaining == 1:
                layers.append(asm.unit(next_kernel(), c, apply_relu=True))
        else:
            for _ in range(remaining):
                layers.append(asm.unit(next_kernel(), c, apply_relu=True))

        if s < spec.sections:
            layers.append(MaxPool())
        cin = c

    layers.append(GlobalPool())
    layers.append(asm.classifier(pattern[-1], spec.num_classes))
    return Network(spec, asm.store, layers, asm.groups)


def build_plain(spec: NetworkSpec, init_seed: int = 0) -> Network:
    """Constant-width network whose body convolutions all share W_conv_G."""
    if spec.family not in ("plain", "plain_residual"):
        raise SpecError(f"build_plain got family {spec.family!r}")
    return _assemble(spec, init_seed)


def build_mixed(spec: NetworkSpec, init_seed: int = 0) -> Network:
    """Section-shared network with a transition convolution per expansion."""
    if spec.family not in ("mixed", "mixed_residual"):
        raise SpecError(f"build_mixed got family {spec.family!r}")
    return _assemble(spec, init_seed)


def build_free(spec: NetworkSpec, init_seed: int = 0) -> Network:
    """Same topology as the shared counterpart, one kernel per convolution."""
    if spec.family != "free":
        raise SpecError(f"build_free got family {spec.family!r}")
    return _assemble(spec, init_seed)


def build_network(spec: NetworkSpec, init_seed: int = 0) -> Network:
    if spec.family in ("plain", "plain_residual"):
        return build_plain(spec, init_seed)
    if spec.family in ("mixed", "mixed_residual"):
        return build_mixed(spec, init_seed)
    return build_free(spec, init_seed)


def count_params(net: Network) -> ParamReport:
    """Deterministic per-group parameter audit; shared entries appear once."""
    uses = net.static_use_counts()
    groups = []
    total = 0
    for group_name, members in net.param_groups:
        shapes = [net.params.entries[m].shape for m in members]
        count = sum(net.params.entries[m].size for m in members)
        shared_uses = uses[members[0]] if len(members) == 1 else 1
        groups.append(ParamGroup(group_name, shapes, count, shared_uses))
        total += count
    assert total == net.params.total_params()
    return ParamReport(groups, total, round(total / 1e6, 2))


# ---------------------------------------------------------------------------
# line-oriented "key = value" config text

_SPEC_KEYS = (
    "family",
    "depth",
    "channels",
    "classes",
    "sections",
    "regulators",
    "input_size",
    "section_layers",
    "batchnorm",
)


def _parse_int_list(value: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(part.strip()) for part in value.split(","))
    except ValueError as exc:
        raise SpecError(f"{key}: expected comma-separated integers, got {value!r}") from exc


def parse_spec_text(text: str) -> NetworkSpec:
    """Parse the ``key = value`` network description format.

    Blank lines and ``#`` comments are ignored. Unknown keys and malformed
    values are rejected with the offending line number.
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise SpecError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _SPEC_KEYS:
            raise SpecError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise SpecError(f"line {lineno}: duplicate key {key!r}")
        if not value:
            raise SpecError(f"line {lineno}: empty value for {key!r}")
        raw[key] = value

    for required in ("family", "depth", "channels", "classes"):
        if required not in raw:
            raise SpecError(f"missing required key {required!r}")

    def as_int(key: str) -> int:
        try:
            return int(raw[key])
        except ValueError as exc:
            raise SpecError(f"{key}: expected an integer, got {raw[key]!r}") from exc

    family = raw["family"]
    depth = as_int("depth")
    classes = as_int("classes")
    sections = as_int("sections") if "sections" in raw else 4

    channels_text = raw["channels"]
    channels: int | tuple[int, ...]
    if "," in channels_text:
        channels = _parse_int_list(channels_text, "channels")
    else:
        try:
            channels = int(channels_text)
        except ValueError as exc:
            raise SpecError(f"channels: expected integer or list, got {channels_text!r}") from exc

    regulators: frozenset[int] = frozenset()
    if "regulators" in raw:
        value = raw["regulators"]
        if value == "all":
            regulators = frozenset(range(1, sections + 1))
        elif value != "none":
            regulators = frozenset(_parse_int_list(value, "regulators"))

    input_shape = (3, 32, 32)
    if "input_size" in raw:
        parts = raw["input_size"].lower().split("x")
        if len(parts) != 3:
            raise SpecError(f"input_size: expected CxHxW, got {raw['input_size']!r}")
        try:
            input_shape = tuple(int(p) for p in parts)  # type: ignore[assignment]
        except ValueError as exc:
            raise SpecError(f"input_size: expected integers, got {raw['input_size']!r}") from exc

    section_layers = None
    if "section_layers" in raw and raw["section_layers"] != "none":
        section_layers = _parse_int_list(raw["section_layers"], "section_layers")

    batchnorm = True
    if "batchnorm" in raw:
        value = raw["batchnorm"].lower()
        if value in ("on", "true", "yes", "1"):
            batchnorm = True
        elif value in ("off", "false", "no", "0"):
            batchnorm = False
        else:
            raise SpecError(f"batchnorm: expected on/off, got {raw['batchnorm']!r}")

    return NetworkSpec(
        family=family,
        depth=depth,
        channels=channels,
        num_classes=classes,
        sections=sections,
        regulators=regulators,
        input_shape=input_shape,
        section_layers=section_layers,
        batchnorm=batchnorm,
    )


def parse_spec_file(path) -> NetworkSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_spec_text(fh.read())


def format_spec(spec: NetworkSpec) -> str:
    """Serialize a NetworkSpec back to the config text format."""
    if isinstance(spec.channels, int):
        channels = str(spec.channels)
    else:
        channels = ",".join(str(c) for c in spec.channels)
    if not spec.regulators:
        regulators = "none"
    elif spec.regulators == frozenset(range(1, spec.sections + 1)):
        regulators = "all"
    else:
        regulators = ",".join(str(s) for s in sorted(spec.regulators))
    lines = [
        f"family = {spec.family}",
        f"depth = {spec.depth}",
        f"channels = {channels}",
        f"classes = {spec.num_classes}",
        f"sections = {spec.sections}",
        f"regulators = {regulators}",
        f"input_size = {spec.input_shape[0]}x{spec.input_shape[1]}x{spec.input_shape[2]}",
    ]
    if spec.section_layers is not None:
        lines.append("section_layers = " + ",".join(str(n) for n in spec.section_layers))
    if not spec.batchnorm:
        lines.append("batchnorm = off")
    return "\n".join(lines) + "\n"


def without_batchnorm(spec: NetworkSpec) -> NetworkSpec:
    """The same architecture with every batch-norm layer removed."""
    return replace(spec, batchnorm=False)
