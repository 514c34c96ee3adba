"""Non-bottleneck decoder blocks (type-1 / type-2) and their ablation variants.

Canonical block, channel- and shape-preserving throughout:

1. optional 1x1 entry conv
2. ``oned_pairs`` stages of 3x1 conv, relu, 1x3 conv, relu
3. one branch per kernel k in ``parallel_kernels``: kxk conv (dilated for
   type-2), relu, optional linear 1x1
4. branches summed, then the 1D-stage output added (first skip), then the
   block input added (second skip), then relu

``skip_mode="single"`` drops the first skip.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .graph import GraphError, NodeSpec, Subgraph
from .ops import ConvParams, same_padding


class BlockSpecError(ValueError):
    pass


@dataclass(frozen=True)
class NonBottleneckSpec:
    variant: str = "type1"
    channels: int = 4
    use_pre_1x1: bool = True
    use_post_1x1: bool = True
    oned_pairs: int = 1
    parallel_kernels: tuple[int, ...] = (3, 5)
    dilation: int = 1
    skip_mode: str = "cascaded"
    batch_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "parallel_kernels", tuple(self.parallel_kernels))
        if self.variant not in ("type1", "type2"):
            raise BlockSpecError(f"variant must be type1 or type2, got {self.variant!r}")
        if self.variant == "type1" and self.dilation != 1:
            raise BlockSpecError("type1 blocks have dilation fixed at 1")
        if self.dilation < 1:
            raise BlockSpecError(f"dilation must be >= 1, got {self.dilation}")
        if not self.parallel_kernels:
            raise BlockSpecError("parallel_kernels must not be empty")
        even = [k for k in self.parallel_kernels if k % 2 == 0 or k < 1]
        if even:
            raise BlockSpecError(f"parallel kernels must be odd (same padding), got {even}")
        if self.channels < 1:
            raise BlockSpecError("channels must be >= 1")
        if self.oned_pairs < 0:
            raise BlockSpecError("oned_pairs must be >= 0")
        if self.skip_mode not in ("cascaded", "single"):
            raise BlockSpecError(f"skip_mode must be cascaded or single, got {self.skip_mode!r}")

    @property
    def type_number(self) -> int:
        return 1 if self.variant == "type1" else 2


@dataclass(frozen=True)
class D5Spec:
    """The factorized block used by the D5/D6 decoders after deconvolution ``index``."""

    index: int
    channels: int = 4

    def __post_init__(self):
        if self.index not in (1, 2, 3, 4):
            raise BlockSpecError(f"D5 block index must be in 1..4, got {self.index}")


BlockSpec = NonBottleneckSpec | D5Spec


@dataclass
class _Builder:
    prefix: str
    channels: int
    section: str
    batch_norm: bool = False
    nodes: list[NodeSpec] = field(default_factory=list)

    def conv(self, name, src, kernel, dilation=1, activate=True) -> str:
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        p = ConvParams(self.channels, self.channels, kernel=(kh, kw), dilation=dilation,
                       padding=(same_padding(kh, dilation), same_padding(kw, dilation)))
        full = f"{self.prefix}.{name}"
        self.nodes.append(NodeSpec(full, "conv", (src,), conv=p, section=self.section))
        out = full
        if activate:
            if self.batch_norm:
                self.nodes.append(NodeSpec(f"{full}.bn", "bn", (out,), channels=self.channels, section=self.section))
                out = f"{full}.bn"
            self.nodes.append(NodeSpec(f"{full}.relu", "relu", (out,), section=self.section))
            out = f"{full}.relu"
        return out

    def add(self, name, srcs, role="") -> str:
        full = f"{self.prefix}.{name}"
        self.nodes.append(NodeSpec(full, "add", tuple(srcs), role=role, section=self.section))
        return full

    def relu(self, name, src) -> str:
        full = f"{self.prefix}.{name}"
        self.nodes.append(NodeSpec(full, "relu", (src,), section=self.section))
        return full

    def oned_pair(self, tag, src) -> str:
        h = self.conv(f"{tag}.3x1", src, (3, 1))
        return self.conv(f"{tag}.1x3", h, (1, 3))


def build_nonbottleneck(spec: NonBottleneckSpec, src: str = "x", prefix: str = "nb",
                        section: str = "decoder") -> Subgraph:
    b = _Builder(prefix, spec.channels, section, spec.batch_norm)
    cur = src
    if spec.use_pre_1x1:
        cur = b.conv("entry1x1", cur, 1)
    for i in range(spec.oned_pairs):
        cur = b.oned_pair(f"oned{i + 1}", cur)
    oned_out = cur

    branches = []
    dil = spec.dilation if spec.variant == "type2" else 1
    for k in spec.parallel_kernels:
        out = b.conv(f"k{k}", oned_out, k, dilation=dil)
        if spec.use_post_1x1:
            out = b.conv(f"k{k}.post1x1", out, 1, activate=False)
        branches.append(out)
    fused = branches[0] if len(branches) == 1 else b.add("branch_fuse", branches, role="branch_fuse")

    if spec.skip_mode == "cascaded":
        fused = b.add("skip_oned", [fused, oned_out])
    fused = b.add("skip_input", [fused, src])
    out = b.relu("out", fused)
    return Subgraph(tuple(b.nodes), src, out)


def build_d5_block(after_deconv_index: int, channels: int = 4, src: str = "x", prefix: str = "d5",
                   section: str = "decoder") -> Subgraph:
    """Index 1: two (3x1, 1x3) pairs with one residual add from the block input.
    Index 2: a 3x3 conv (dilation 1) then the index-1 block. Indices 3, 4: a lone 3x3 conv."""
    spec = D5Spec(after_deconv_index, channels)
    b = _Builder(prefix, channels, section)
    cur = src
    if spec.index in (2, 3, 4):
        cur = b.conv("dil3x3", cur, 3, dilation=1)
    if spec.index in (1, 2):
        inner = cur
        for i in range(2):
            cur = b.oned_pair(f"oned{i + 1}", cur)
        cur = b.relu("out", b.add("skip_input", [cur, inner]))
    return Subgraph(tuple(b.nodes), src, cur)


def build_block(spec: BlockSpec, src: str, prefix: str, section: str = "decoder") -> Subgraph:
    if isinstance(spec, D5Spec):
        return build_d5_block(spec.index, spec.channels, src, prefix, section)
    return build_nonbottleneck(spec, src, prefix, section)


def gradient_fanout(sub: Subgraph | NodeSpec) -> int:
    """Number of distinct backward routes from block output to block input.

    Parallel kernel branches between one fork and their ``branch_fuse`` merge
    form a single trunk route, so that merge takes the max instead of the sum.
    """
    if isinstance(sub, NodeSpec):
        return 1
    paths = {sub.input: 1}
    for node in sub.nodes:
        counts = [paths.get(s, 0) for s in node.inputs]
        if not counts:
            raise GraphError(f"node {node.name!r} has no inputs inside the block")
        paths[node.name] = max(counts) if node.role == "branch_fuse" else sum(counts)
    return paths[sub.output]
