"""VGG-style encoder, decoder configurations (presets + mNp grammar) and network assembly."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .blocks import BlockSpec, D5Spec, NonBottleneckSpec, build_block
from .graph import GraphError, NetworkGraph, NodeSpec, infer_shapes
from .ops import ConvParams, same_padding
from .tensor import GeometryError


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class AssemblyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# encoder


@dataclass(frozen=True)
class EncoderSpec:
    input_shape: tuple[int, int, int] = (3, 48, 160)
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    convs_per_stage: tuple[int, ...] = (2, 2, 2, 4)
    kernel: int = 5
    first_conv_stride: int = 2

    def __post_init__(self):
        for name in ("input_shape", "stage_channels", "convs_per_stage"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.stage_channels) != len(self.convs_per_stage):
            raise ValueError("stage_channels and convs_per_stage must have equal length")
        if min(self.convs_per_stage) < 1:
            raise ValueError("every stage needs at least one conv")

    @property
    def downsampling(self) -> int:
        return self.first_conv_stride * 2 ** (len(self.stage_channels) - 1)

    @property
    def num_convs(self) -> int:
        return sum(self.convs_per_stage)

    def with_input(self, shape) -> "EncoderSpec":
        return replace(self, input_shape=tuple(shape))


VGG10 = EncoderSpec()
# D7 upsamples five times; this variant keeps 10 convs and adds a fifth stage.
VGG10_5STAGE = EncoderSpec(stage_channels=(32, 64, 128, 256, 256), convs_per_stage=(2, 2, 2, 2, 2))


def encoder_for_stages(stages: int, input_shape=None) -> EncoderSpec:
    base = {4: VGG10, 5: VGG10_5STAGE}.get(stages)
    if base is None:
        raise AssemblyError(f"no encoder preset with {stages} downsampling stages")
    if input_shape is None:
        # 48 rows do not divide by 32
        input_shape = (3, 48, 160) if stages == 4 else (3, 64, 160)
    return base.with_input(input_shape)


@dataclass(frozen=True)
class Tap:
    node: str
    channels: int
    factor: int  # spatial downsampling relative to the network input


@dataclass(frozen=True)
class Fragment:
    nodes: tuple[NodeSpec, ...]
    output: str
    taps: dict[str, Tap] = field(default_factory=dict)


def build_encoder(spec: EncoderSpec) -> Fragment:
    c, h, w = spec.input_shape
    d = spec.downsampling
    if h % d or w % d:
        raise GeometryError(f"input {h}x{w} is not divisible by the encoder downsampling {d}")
    nodes = [NodeSpec("input", "input", channels=c)]
    cur, cin, factor = "input", c, 1
    conv_outs: list[Tap] = []
    pad = same_padding(spec.kernel)
    for s, (cout, nconv) in enumerate(zip(spec.stage_channels, spec.convs_per_stage), start=1):
        if s > 1:
            nodes.append(NodeSpec(f"stage{s}.pool", "maxpool", (cur,), section="encoder"))
            cur, factor = f"stage{s}.pool", factor * 2
        for m in range(1, nconv + 1):
            stride = spec.first_conv_stride if (s == 1 and m == 1) else 1
            factor *= stride
            p = ConvParams(cin, cout, kernel=spec.kernel, stride=stride, padding=pad)
            nodes += [
                NodeSpec(f"stage{s}.conv{m}", "conv", (cur,), conv=p, section="encoder"),
                NodeSpec(f"stage{s}.bn{m}", "bn", (f"stage{s}.conv{m}",), channels=cout, section="encoder"),
                NodeSpec(f"stage{s}.relu{m}", "relu", (f"stage{s}.bn{m}",), section="encoder"),
            ]
            cur, cin = f"stage{s}.relu{m}", cout
            conv_outs.append(Tap(cur, cout, factor))
    taps = {"out": conv_outs[-1]}
    if len(conv_outs) >= 2:
        taps["skip1"] = conv_outs[-2]
    if len(conv_outs) >= 3:
        taps["skip2"] = conv_outs[-3]
    return Fragment(tuple(nodes), cur, taps)


# ---------------------------------------------------------------------------
# decoder configuration


@dataclass(frozen=True)
class BlockFlags:
    pre_1x1: bool = True
    post_1x1: bool = True
    oned_pairs: int = 1
    parallel_kernels: tuple[int, ...] = (3, 5)
    dilation: int = 1
    skip_mode: str = "cascaded"
    batch_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "parallel_kernels", tuple(int(k) for k in self.parallel_kernels))

    def block(self, type_number: int, channels: int) -> NonBottleneckSpec:
        return NonBottleneckSpec(
            variant=f"type{type_number}", channels=channels, use_pre_1x1=self.pre_1x1,
            use_post_1x1=self.post_1x1, oned_pairs=self.oned_pairs, parallel_kernels=self.parallel_kernels,
            dilation=self.dilation if type_number == 2 else 1, skip_mode=self.skip_mode,
            batch_norm=self.batch_norm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["parallel_kernels"] = list(self.parallel_kernels)
        return d


@dataclass(frozen=True)
class DecoderConfig:
    groups: tuple[tuple[BlockSpec, ...], ...]
    deconv_kernels: tuple[int, ...] = (2, 2, 2, 2)
    num_classes: int = 4
    skip_count: int = 2
    flags: BlockFlags = BlockFlags()
    name: str | None = None
    # D3/D5 differ from D2/D6 only by training batch size
    batch_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))
        object.__setattr__(self, "deconv_kernels", tuple(int(k) for k in self.deconv_kernels))
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.skip_count not in (0, 1, 2):
            raise ValueError(f"skip_count must be 0, 1 or 2, got {self.skip_count}")
        if len(self.deconv_kernels) != len(self.groups):
            raise ValueError(f"{len(self.groups)} groups but {len(self.deconv_kernels)} deconv kernels")

    @property
    def stages(self) -> int:
        return len(self.groups)

    def with_flags(self, flags: BlockFlags) -> "DecoderConfig":
        """Rebuild every non-bottleneck item under new flags (D5 items are untouched)."""
        groups = tuple(
            tuple(flags.block(b.type_number, self.num_classes) if isinstance(b, NonBottleneckSpec) else b
                  for b in g)
            for g in self.groups)
        return replace(self, groups=groups, flags=flags)

    def with_classes(self, num_classes: int) -> "DecoderConfig":
        groups = tuple(tuple(replace(b, channels=num_classes) for b in g) for g in self.groups)
        return replace(self, groups=groups, num_classes=num_classes)


def _parse_int(text: str, i: int) -> tuple[int, int]:
    j = i
    while j < len(text) and text[j].isdigit():
        j += 1
    if j == i:
        raise ParseError(f"expected a number, found {text[i:i + 1]!r}", i)
    return int(text[i:j]), j


def parse_grammar(text: str) -> list[list[int]]:
    """Parse ``(mNp-mNp)(...)`` into per-group lists of block types."""
    groups: list[list[int]] = []
    i = 0
    if not text:
        raise ParseError("empty configuration", 0)
    while i < len(text):
        if text[i] != "(":
            raise ParseError(f"expected '(', found {text[i]!r}", i)
        i += 1
        group: list[int] = []
        if i < len(text) and text[i] == ")":
            groups.append(group)
            i += 1
            continue
        while True:
            count, j = _parse_int(text, i)
            if count < 1:
                raise ParseError("repeat count must be >= 1", i)
            if j >= len(text) or text[j] != "N":
                raise ParseError(f"expected 'N', found {text[j:j + 1]!r}", j)
            btype, k = _parse_int(text, j + 1)
            if btype not in (1, 2):
                raise ParseError(f"block type {btype} is not 1 or 2", j + 1)
            group += [btype] * count
            if k >= len(text):
                raise ParseError("unterminated group, expected ')'", k)
            if text[k] == "-":
                i = k + 1
                continue
            if text[k] == ")":
                i = k + 1
                break
            raise ParseError(f"expected '-' or ')', found {text[k]!r}", k)
        groups.append(group)
    return groups


def render_groups(groups) -> str:
    """Canonical mNp form: runs merged, trailing empty groups dropped."""
    types = [[b if isinstance(b, int) else b.type_number for b in g] for g in groups]
    while types and not types[-1]:
        types.pop()
    parts = []
    for g in types:
        items: list[list[int]] = []
        for t in g:
            if items and items[-1][1] == t:
                items[-1][0] += 1
            else:
                items.append([1, t])
        parts.append("(" + "-".join(f"{m}N{t}" for m, t in items) + ")")
    return "".join(parts)


def render(config: DecoderConfig) -> str:
    if any(isinstance(b, D5Spec) for g in config.groups for b in g):
        if config.name is None:
            raise ValueError("D5-style decoders have no grammar form")
        return config.name
    return render_groups(config.groups)


OPTIMAL_LAYOUT = "(2N1)(2N2)(1N2)"

TABLE1_GRAMMAR = (
    "(2N1)(2N1)(2N2)(2N2)",
    "(2N2)(2N2)(2N2)(2N2)",
    "(2N2)(2N2)(2N2)",
    "(2N1)(2N1)(2N1)(2N1)",
    "(1N1-1N2)(1N1-1N2)(1N1-1N2)(1N1-1N2)",
)
PRESET_NAMES = ("D1", "D2", "D3", "D4", "D5", "D6", "D7", "D8", "Optimal")
TABLE1_CONFIGS = PRESET_NAMES[:8] + TABLE1_GRAMMAR + ("Optimal",)


def _from_grammar(text, stages, num_classes, flags, skip_count=2, deconv_kernels=None, name=None, batch_size=None):
    types = parse_grammar(text)
    types += [[] for _ in range(stages - len(types))]
    groups = [[flags.block(t, num_classes) for t in g] for g in types]
    kernels = deconv_kernels or (2,) * len(groups)
    return DecoderConfig(groups, kernels, num_classes, skip_count, flags, name, batch_size)


def preset(name: str, num_classes: int = 4) -> DecoderConfig:
    key = name.strip().lower()
    base = BlockFlags()
    if key == "optimal":
        return _from_grammar(OPTIMAL_LAYOUT, 4, num_classes, base, name="Optimal")
    if key in ("d1", "d2", "d3", "d4"):
        flags = replace(base, post_1x1=False, pre_1x1=key != "d4")
        return _from_grammar(OPTIMAL_LAYOUT, 4, num_classes, flags, skip_count=2 if key == "d1" else 1,
                             name=name.upper(), batch_size=8 if key in ("d3", "d4") else None)
    if key in ("d5", "d6"):
        groups = [[D5Spec(i, num_classes)] for i in (1, 2, 3, 4)]
        return DecoderConfig(groups, (2, 2, 2, 2), num_classes, 2, base, name.upper(), 8 if key == "d5" else None)
    if key == "d7":
        return _from_grammar(OPTIMAL_LAYOUT, 5, num_classes, base, deconv_kernels=(2, 2, 3, 3, 5), name="D7")
    if key == "d8":
        flags = replace(base, parallel_kernels=(1,), post_1x1=False)
        return _from_grammar(OPTIMAL_LAYOUT, 4, num_classes, flags, name="D8")
    raise KeyError(name)


def parse_decoder_config(text: str, stages: int = 4, num_classes: int = 4,
                         flags: BlockFlags | None = None) -> DecoderConfig:
    """A preset name (D1..D8, Optimal) or an mNp grammar string.

    Grammar groups map to deconvolution stages in order; missing trailing
    groups are empty. Extra groups are kept and rejected at assembly.
    """
    try:
        cfg = preset(text, num_classes)
    except KeyError:
        cfg = None
    if cfg is not None:
        return cfg.with_flags(flags) if flags is not None else cfg
    return _from_grammar(text.strip(), stages, num_classes, flags or BlockFlags())


# ---------------------------------------------------------------------------
# decoder + assembly


def _deconv_geometry(k: int, channels: int) -> ConvParams:
    pad = (k - 1) // 2
    # output = 2 * input exactly
    return ConvParams(channels, channels, kernel=k, stride=2, padding=pad, output_padding=2 + 2 * pad - k)


def build_decoder(config: DecoderConfig, encoder_taps: dict[str, Tap]) -> Fragment:
    """1x1 collapse to num_classes, projected skips fused where resolutions match,
    then per stage a x2 transposed conv followed by the stage's blocks."""
    K = config.num_classes
    out_tap = encoder_taps["out"]
    nodes = [NodeSpec("decoder.collapse", "conv", (out_tap.node,),
                      conv=ConvParams(out_tap.channels, K, kernel=1), section="decoder")]
    skips = [encoder_taps[k] for k in ("skip1", "skip2")[:config.skip_count]]
    if len(skips) < config.skip_count:
        raise GraphError(f"decoder wants {config.skip_count} skips, encoder provides {len(skips)}")
    pending: dict[int, list[str]] = {}
    for i, tap in enumerate(skips, start=1):
        nodes.append(NodeSpec(f"decoder.skip{i}", "conv", (tap.node,), conv=ConvParams(tap.channels, K, kernel=1),
                              section="decoder"))
        pending.setdefault(tap.factor, []).append(f"decoder.skip{i}")

    def fuse(cur: str, factor: int, label: str) -> str:
        srcs = pending.pop(factor, [])
        if not srcs:
            return cur
        nodes.append(NodeSpec(f"decoder.{label}", "add", (cur, *srcs), section="decoder"))
        return f"decoder.{label}"

    cur, factor = "decoder.collapse", out_tap.factor
    cur = fuse(cur, factor, "skip_fuse")
    for i, (k, group) in enumerate(zip(config.deconv_kernels, config.groups), start=1):
        name = f"decoder.up{i}"
        nodes.append(NodeSpec(name, "deconv", (cur,), conv=_deconv_geometry(k, K), section="decoder"))
        cur, factor = name, factor // 2
        cur = fuse(cur, factor, f"up{i}.skip_fuse")
        for j, spec in enumerate(group, start=1):
            sub = build_block(spec, cur, f"{name}.nb{j}")
            nodes.extend(sub.nodes)
            cur = sub.output
    if pending:
        raise GraphError(f"skip taps at downsampling {sorted(pending)} match no decoder resolution")
    return Fragment(tuple(nodes), cur, {"logits": Tap(cur, K, factor)})


def assemble_network(enc: EncoderSpec, dec: DecoderConfig) -> NetworkGraph:
    stages = int(round(math.log2(enc.downsampling)))
    if 2 ** stages != enc.downsampling or stages != dec.stages:
        raise AssemblyError(
            f"encoder downsamples by {enc.downsampling} but the decoder has {dec.stages} deconvolution stages")
    encoder = build_encoder(enc)
    decoder = build_decoder(dec, encoder.taps)
    taps = {"encoder_out": encoder.taps["out"].node, "logits": decoder.output}
    taps.update({k: t.node for k, t in encoder.taps.items() if k != "out"})
    graph = NetworkGraph(encoder.nodes + decoder.nodes, decoder.output, taps)
    shapes = infer_shapes(graph, enc.input_shape)
    out = shapes[graph.output]
    if out[1:] != (dec.num_classes, *enc.input_shape[1:]):
        raise AssemblyError(f"network output {out[1:]} != ({dec.num_classes}, {enc.input_shape[1:]})")
    return graph


# ---------------------------------------------------------------------------
# architecture config files


@dataclass(frozen=True)
class ArchConfig:
    encoder: EncoderSpec
    decoder: DecoderConfig
    source: str = ""  # preset name or grammar string as written

    def build(self) -> NetworkGraph:
        return assemble_network(self.encoder, self.decoder)

    def to_dict(self) -> dict:
        enc = asdict(self.encoder)
        enc = {k: list(v) if isinstance(v, tuple) else v for k, v in enc.items()}
        dec = self.decoder
        return {
            "encoder": enc,
            "decoder": {
                "config": self.source or render(dec),
                "num_classes": dec.num_classes,
                "skips": dec.skip_count,
                "deconv_kernels": list(dec.deconv_kernels),
                "batch_size": dec.batch_size,
                "flags": dec.flags.to_dict(),
            },
        }


def arch_from_dict(doc: dict, input_shape=None) -> ArchConfig:
    d = doc.get("decoder", {})
    text = d.get("config", "Optimal")
    num_classes = int(d.get("num_classes", 4))
    flags = BlockFlags(**d["flags"]) if "flags" in d else None
    base = parse_decoder_config(text, stages=len(doc.get("encoder", {}).get("stage_channels", VGG10.stage_channels)),
                                num_classes=num_classes, flags=flags)
    if "skips" in d:
        base = replace(base, skip_count=int(d["skips"]))
    if d.get("deconv_kernels"):
        base = replace(base, deconv_kernels=tuple(d["deconv_kernels"]))
    if "batch_size" in d:
        base = replace(base, batch_size=d["batch_size"])
    if "encoder" in doc:
        enc = EncoderSpec(**doc["encoder"])
    else:
        enc = encoder_for_stages(base.stages, input_shape)
    if input_shape is not None:
        enc = enc.with_input(input_shape)
    return ArchConfig(enc, base, text)


def resolve_arch(ref: str, input_shape=None) -> ArchConfig:
    """A preset name, an mNp string, or a path to a JSON architecture file."""
    path = Path(ref)
    if path.suffix == ".json" or path.exists():
        return arch_from_dict(json.loads(path.read_text()), input_shape)
    dec = parse_decoder_config(ref)
    enc = encoder_for_stages(dec.stages, input_shape)
    return ArchConfig(enc, dec, ref)
