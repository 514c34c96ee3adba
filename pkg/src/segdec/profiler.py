"""Static cost model of a network graph: parameters, MACs, receptive field, activation memory.

MAC conventions:
    conv    kh*kw*cin*cout*hout*wout
    deconv  kh*kw*cin*cout*hin*win
    bn/relu/add  one MAC-equivalent per output element
    maxpool 0
Conv and deconv counts are per sample (the closed forms above carry no batch
factor); the per-element terms count every element and so scale with n.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .graph import NetworkGraph, infer_shapes

HEADER = ("MACs: conv k*k*cin*cout*out_px, deconv k*k*cin*cout*in_px, "
          "bn/relu/add 1 per output element, pool 0; rf merges take the per-axis max")


def count_params(graph: NetworkGraph) -> tuple[dict[str, int], int]:
    per = {n.name: sum(math.prod(s) for s in n.param_shapes().values()) for n in graph.nodes}
    return per, sum(per.values())


def count_macs(graph: NetworkGraph, input_shape) -> tuple[dict[str, int], int]:
    shapes = infer_shapes(graph, input_shape)
    per: dict[str, int] = {}
    for node in graph.nodes:
        out = shapes[node.name]
        if node.op in ("conv", "deconv"):
            p = node.conv
            kk = p.kernel[0] * p.kernel[1] * p.in_channels * p.out_channels
            src = shapes[node.inputs[0]]
            px = out[2] * out[3] if node.op == "conv" else src[2] * src[3]
            per[node.name] = kk * px
        elif node.op in ("bn", "relu", "add"):
            per[node.name] = math.prod(out)
        else:
            per[node.name] = 0
    return per, sum(per.values())


@dataclass(frozen=True)
class Field:
    rf: tuple[Fraction, Fraction]
    jump: tuple[Fraction, Fraction]


def receptive_field(graph: NetworkGraph) -> dict[str, Field]:
    """rf' = rf + d*(k-1)*j, j' = j*s along each path; merges take the max.

    A transposed conv divides the jump by its stride and widens the field by
    (ceil(extent/s) - 1) input steps, the number of extra inputs one output
    pixel can see.
    """
    one = Fraction(1)
    table: dict[str, Field] = {}
    for node in graph.nodes:
        if node.op == "input":
            table[node.name] = Field((one, one), (one, one))
            continue
        ins = [table[s] for s in node.inputs]
        rf = tuple(max(f.rf[a] for f in ins) for a in (0, 1))
        jump = tuple(max(f.jump[a] for f in ins) for a in (0, 1))
        if node.op == "conv":
            p = node.conv
            rf = tuple(rf[a] + p.dilation[a] * (p.kernel[a] - 1) * jump[a] for a in (0, 1))
            jump = tuple(jump[a] * p.stride[a] for a in (0, 1))
        elif node.op == "deconv":
            p = node.conv
            rf = tuple(rf[a] + (math.ceil(p.extent[a] / p.stride[a]) - 1) * jump[a] for a in (0, 1))
            jump = tuple(jump[a] / p.stride[a] for a in (0, 1))
        elif node.op == "maxpool":
            rf = tuple(r + j for r, j in zip(rf, jump))
            jump = tuple(2 * j for j in jump)
        table[node.name] = Field(rf, jump)
    return table


@dataclass
class ProfileRow:
    name: str
    op: str
    section: str
    params: int
    macs: int
    out_shape: list[int]
    rf: list[float]
    act_bytes: int


@dataclass
class ProfileReport:
    nodes: list[ProfileRow]
    input_shape: list[int]
    bytes_per_element: int = 8
    totals: dict[str, int] = field(default_factory=dict)
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.totals:
            self.totals = {k: sum(getattr(r, k) for r in self.nodes) for k in ("params", "macs", "act_bytes")}
        if not self.split:
            parts = {}
            for sec in ("encoder", "decoder"):
                rows = [r for r in self.nodes if r.section == sec]
                parts[sec] = {"params": sum(r.params for r in rows), "macs": sum(r.macs for r in rows)}
            macs = parts["encoder"]["macs"] + parts["decoder"]["macs"]
            parts["encoder_mac_share"] = parts["encoder"]["macs"] / macs if macs else 0.0
            self.split = parts

    @property
    def encoder_mac_share(self) -> float:
        return self.split["encoder_mac_share"]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "bytes_per_element": self.bytes_per_element,
            "nodes": [asdict(r) for r in self.nodes],
            "totals": dict(self.totals),
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProfileReport":
        rows = [ProfileRow(**r) for r in doc["nodes"]]
        return cls(rows, doc["input_shape"], doc["bytes_per_element"], doc["totals"], doc["split"])


def profile(graph: NetworkGraph, input_shape, bytes_per_element: int = 8) -> ProfileReport:
    shape = tuple(input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    shapes = infer_shapes(graph, shape)
    params, _ = count_params(graph)
    macs, _ = count_macs(graph, shape)
    fields = receptive_field(graph)
    rows = [
        ProfileRow(
            name=n.name, op=n.op, section=n.section, params=params[n.name], macs=macs[n.name],
            out_shape=list(shapes[n.name]), rf=[float(v) for v in fields[n.name].rf],
            act_bytes=math.prod(shapes[n.name]) * bytes_per_element)
        for n in graph.nodes
    ]
    return ProfileReport(rows, list(shape), bytes_per_element)


def emit_report(report: ProfileReport, format: str = "text") -> str:
    if format == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if format != "text":
        raise ValueError(f"format must be text or json, got {format!r}")
    name_w = max([len("node")] + [len(r.name) for r in report.nodes])
    head = f"{'node':<{name_w}}  {'op':<8} {'params':>10} {'MACs':>14} {'output':>20} {'rf':>11} {'act bytes':>12}"
    lines = [f"# {HEADER}", f"# input {'x'.join(map(str, report.input_shape))}", head, "-" * len(head)]
    for r in report.nodes:
        rf = f"{r.rf[0]:g}x{r.rf[1]:g}"
        shape = "x".join(map(str, r.out_shape))
        lines.append(f"{r.name:<{name_w}}  {r.op:<8} {r.params:>10,} {r.macs:>14,} {shape:>20} {rf:>11} {r.act_bytes:>12,}")
    t, s = report.totals, report.split
    lines += [
        "-" * len(head),
        f"{'total':<{name_w}}  {'':<8} {t['params']:>10,} {t['macs']:>14,} {'':>20} {'':>11} {t['act_bytes']:>12,}",
        f"encoder: {s['encoder']['params']:,} params, {s['encoder']['macs']:,} MACs",
        f"decoder: {s['decoder']['params']:,} params, {s['decoder']['macs']:,} MACs",
        f"encoder MAC share: {s['encoder_mac_share']:.4f}",
    ]
    return "\n".join(lines)
