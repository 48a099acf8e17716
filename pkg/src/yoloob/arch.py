"""Declarative detector graphs: DarkNet53 backbone, SPP, BiSPFPN neck, heads.

A graph is a flat list of :class:`LayerSpec` records.  Shapes, learnable
parameter counts and multiply-accumulate counts are all derived from that
list, so accounting never needs weights.  :class:`Network` attaches weights
to a graph and runs it.

Head outputs are ordered coarse to fine (stride 32, 16, 8).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

KINDS = ("input", "conv", "bn", "silu", "add", "maxpool", "upsample", "concat", "head")
HEAD_KINDS = ("objectbox", "anchor")
MODELS = ("yolo-ob", "yolov3-baseline")

# Standard YOLOv3 anchors in pixels at 416 input, coarse scale first.
ANCHORS_416 = (
    ((116, 90), (156, 198), (373, 326)),
    ((30, 61), (62, 45), (59, 119)),
    ((10, 13), (16, 30), (33, 23)),
)

OBJ_PRIOR_BIAS = -4.5


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: str
    name: str
    inputs: tuple[int, ...] = ()
    kernel: int = 0
    stride: int = 1
    out_channels: int = 0
    padding: int = 0


@dataclass(frozen=True)
class Preset:
    name: str
    width: float
    repeats: tuple[int, ...]
    input_size: int


PRESETS = {
    "full": Preset("full", 1.0, (1, 2, 8, 8, 4), 416),
    "reduced": Preset("reduced", 1 / 8, (1, 1, 2, 2, 1), 128),
}


@dataclass
class NetworkGraph:
    layers: list[LayerSpec]
    taps: dict[str, int]
    heads: tuple[int, ...]
    head_kind: str
    input_size: int
    in_channels: int = 3
    num_classes: int = 1
    anchors: tuple = ()
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        for spec in self.layers:
            if spec.kind not in KINDS:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            for i in spec.inputs:
                if not 0 <= i < spec.id:
                    raise ValueError(f"layer {spec.name} references non-prior layer {i}")
        self._shapes: list[tuple[int, int, int]] | None = None

    def shapes(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) of every layer output at ``input_size``."""
        if self._shapes is not None:
            return self._shapes
        out: list[tuple[int, int, int]] = []
        for spec in self.layers:
            ins = [out[i] for i in spec.inputs]
            if spec.kind == "input":
                out.append((self.in_channels, self.input_size, self.input_size))
            elif spec.kind in ("conv", "head"):
                c, h, w = ins[0]
                ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
                wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
                out.append((spec.out_channels, ho, wo))
            elif spec.kind in ("bn", "silu", "maxpool"):
                out.append(ins[0])
            elif spec.kind == "add":
                if ins[0] != ins[1]:
                    raise ShapeError(f"residual {spec.name} joins {ins[0]} and {ins[1]}")
                out.append(ins[0])
            elif spec.kind == "upsample":
                c, h, w = ins[0]
                out.append((c, 2 * h, 2 * w))
            elif spec.kind == "concat":
                if len({s[1:] for s in ins}) != 1:
                    raise ShapeError(f"concat {spec.name} spatial mismatch {ins}")
                out.append((sum(s[0] for s in ins), ins[0][1], ins[0][2]))
        self._shapes = out
        return out

    def tap_shape(self, name: str) -> tuple[int, int, int]:
        return self.shapes()[self.taps[name]]

    def signature(self) -> list[tuple[str, str, int, int, int]]:
        return [(s.name, s.kind, s.kernel, s.stride, s.out_channels) for s in self.layers]

    def __len__(self) -> int:
        return len(self.layers)


class GraphBuilder:
    """Appends layers; every method returns the id of the layer it produced."""

    def __init__(self, width: float = 1.0):
        self.layers: list[LayerSpec] = []
        self.taps: dict[str, int] = {}
        self.width = width
        self._scope: list[str] = []

    def ch(self, c: int) -> int:
        return max(1, int(round(c * self.width)))

    def _add(self, kind: str, name: str, inputs=(), **kw) -> int:
        lid = len(self.layers)
        full = ".".join(self._scope + [name]) if name else ".".join(self._scope)
        self.layers.append(LayerSpec(lid, kind, full, tuple(inputs), **kw))
        return lid

    def scope(self, name: str) -> "_Scope":
        return _Scope(self, name)

    def input(self) -> int:
        return self._add("input", "input")

    def cbs(self, x: int, c: int, k: int, stride: int = 1, name: str = "cbs") -> int:
        """conv (no bias) -> batch norm -> SiLU, with ``c`` scaled by the width."""
        conv = self._add("conv", f"{name}.conv", (x,), kernel=k, stride=stride,
                         out_channels=self.ch(c), padding=(k - 1) // 2)
        bn = self._add("bn", f"{name}.bn", (conv,))
        return self._add("silu", f"{name}.act", (bn,))

    def residual(self, a: int, b: int, name: str = "add") -> int:
        return self._add("add", name, (a, b))

    def maxpool(self, x: int, k: int, name: str) -> int:
        return self._add("maxpool", name, (x,), kernel=k, padding=k // 2)

    def upsample(self, x: int, name: str = "up") -> int:
        return self._add("upsample", name, (x,))

    def concat(self, xs: Sequence[int], name: str = "concat") -> int:
        return self._add("concat", name, tuple(xs))

    def head(self, x: int, channels: int, name: str) -> int:
        return self._add("head", name, (x,), kernel=1, stride=1, out_channels=channels)

    def tap(self, label: str, lid: int) -> int:
        self.taps[label] = lid
        return lid


class _Scope:
    def __init__(self, b: GraphBuilder, name: str):
        self.b, self.name = b, name

    def __enter__(self):
        self.b._scope.append(self.name)
        return self.b

    def __exit__(self, *exc):
        self.b._scope.pop()


# -------------------------------------------------------------------- pieces

def build_backbone(b: GraphBuilder, x: int, repeats: Sequence[int] = (1, 2, 8, 8, 4)) -> tuple[int, int, int]:
    """DarkNet53 without its classifier.  Returns the (F52, F26, F13) taps."""
    if len(repeats) != 5:
        raise ValueError("backbone needs five residual repeat counts")
    with b.scope("backbone"):
        y = b.cbs(x, 32, 3, name="stem")
        c = 32
        taps = []
        for stage, n in enumerate(repeats):
            c *= 2
            with b.scope(f"stage{stage}"):
                y = b.cbs(y, c, 3, stride=2, name="down")
                for r in range(n):
                    with b.scope(f"res{r}"):
                        h = b.cbs(y, c // 2, 1, name="cbs1")
                        h = b.cbs(h, c, 3, name="cbs2")
                        y = b.residual(y, h)
            taps.append(y)
    b.tap("F52", taps[2])
    b.tap("F26", taps[3])
    b.tap("F13", taps[4])
    return taps[2], taps[3], taps[4]


def build_spp(b: GraphBuilder, f13: int) -> int:
    """Bottleneck to 512, parallel 5/9/13 max-pools, concat to 2048, back to 1024."""
    with b.scope("spp"):
        y = b.cbs(f13, 512, 1, name="reduce1")
        y = b.cbs(y, 1024, 3, name="expand")
        y = b.cbs(y, 512, 1, name="reduce2")
        pools = [b.maxpool(y, k, name=f"pool{k}") for k in (5, 9, 13)]
        cat = b.tap("SPP.concat", b.concat([y, *pools]))
        y = b.cbs(cat, 512, 1, name="compress1")
        y = b.cbs(y, 1024, 3, name="compress2")
    return b.tap("SPP", y)


def _fusion_node(b: GraphBuilder, x: int, c: int, n: int, name: str) -> int:
    """1x1 to c/2, then ``n`` alternating 3x3 (to c) / 1x1 (to c/2) stages ending on a 3x3."""
    with b.scope(name):
        y = b.cbs(x, c // 2, 1, name="cbs0")
        for i in range(n):
            y = b.cbs(y, c, 3, name=f"cbs{2 * i + 1}")
            if i < n - 1:
                y = b.cbs(y, c // 2, 1, name=f"cbs{2 * i + 2}")
    return y


def build_bispfpn_layer(b: GraphBuilder, p13: int, p26: int, p52: int, index: int = 0) -> tuple[int, int, int]:
    """One bidirectional fusion layer; channel counts in == channel counts out.

    Deep-to-shallow: halve channels with a 1x1, upsample, concat, fuse.
    Shallow-to-deep: 3x3 stride-2 downsample to half width, concat, fuse.
    The 26-level output also receives the layer input (skip connection).
    The 13-level top-down node has a single input and is omitted.
    """
    with b.scope(f"bispfpn{index}"):
        lat = b.cbs(p13, 512, 1, name="lat13")
        cat = b.concat([b.upsample(lat, name="up13"), p26], name="cat_td26")
        td26 = _fusion_node(b, cat, 512, 2, "td26")
        lat = b.cbs(td26, 256, 1, name="lat26")
        cat = b.concat([b.upsample(lat, name="up26"), p52], name="cat_out52")
        o52 = _fusion_node(b, cat, 256, 3, "out52")
        down = b.cbs(o52, 128, 3, stride=2, name="down52")
        cat = b.concat([down, td26, p26], name="cat_out26")
        o26 = _fusion_node(b, cat, 512, 3, "out26")
        down = b.cbs(o26, 256, 3, stride=2, name="down26")
        cat = b.concat([down, p13], name="cat_out13")
        o13 = _fusion_node(b, cat, 1024, 3, "out13")
    return o13, o26, o52


def build_bispfpn(b: GraphBuilder, f13: int, f26: int, f52: int, num_layers: int = 1) -> tuple[int, int, int]:
    """SPP on the deepest tap followed by ``num_layers`` stacked fusion layers."""
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    p13 = build_spp(b, f13)
    p26, p52 = f26, f52
    for i in range(num_layers):
        p13, p26, p52 = build_bispfpn_layer(b, p13, p26, p52, index=i)
    b.tap("F'13", p13)
    b.tap("F'26", p26)
    b.tap("F'52", p52)
    return p13, p26, p52


def _five(b: GraphBuilder, x: int, c: int) -> int:
    y = b.cbs(x, c, 1, name="cbs0")
    y = b.cbs(y, 2 * c, 3, name="cbs1")
    y = b.cbs(y, c, 1, name="cbs2")
    y = b.cbs(y, 2 * c, 3, name="cbs3")
    return b.cbs(y, c, 1, name="cbs4")


def build_yolov3_neck(b: GraphBuilder, f13: int, f26: int, f52: int) -> tuple[int, int, int]:
    """The unmodified YOLOv3 neck (five-conv blocks, upsample + concat)."""
    with b.scope("yolov3neck"):
        with b.scope("s13"):
            y = _five(b, f13, 512)
            t13 = b.cbs(y, 1024, 3, name="out")
            z = b.cbs(y, 256, 1, name="lat")
        with b.scope("s26"):
            z = b.concat([b.upsample(z), f26])
            y = _five(b, z, 256)
            t26 = b.cbs(y, 512, 3, name="out")
            z = b.cbs(y, 128, 1, name="lat")
        with b.scope("s52"):
            z = b.concat([b.upsample(z), f52])
            y = _five(b, z, 128)
            t52 = b.cbs(y, 256, 3, name="out")
    b.tap("F'13", t13)
    b.tap("F'26", t26)
    b.tap("F'52", t52)
    return t13, t26, t52


def head_channels(kind: str, num_classes: int = 1) -> int:
    if kind == "objectbox":
        return 4 + 1 + num_classes
    if kind == "anchor":
        return 3 * (4 + 1 + num_classes)
    raise ValueError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")


def build_head(b: GraphBuilder, taps: Sequence[int], kind: str = "objectbox", num_classes: int = 1) -> tuple[int, ...]:
    ch = head_channels(kind, num_classes)
    with b.scope("head"):
        heads = tuple(b.head(t, ch, name=f"out{lvl}") for t, lvl in zip(taps, ("13", "26", "52")))
    for h, lvl in zip(heads, ("13", "26", "52")):
        b.tap(f"head{lvl}", h)
    return heads


def build_network(model: str = "yolo-ob", bispfpn_layers: int = 1, head: str = "objectbox",
                  preset: str = "full", input_size: int | None = None) -> NetworkGraph:
    """Assemble a full detector graph.

    Args:
        model: ``"yolo-ob"`` (SPP + BiSPFPN) or ``"yolov3-baseline"``.
        bispfpn_layers: number of stacked fusion layers (yolo-ob only).
        head: ``"objectbox"`` (6 channels per cell) or ``"anchor"`` (3 x 6).
        preset: ``"full"`` or ``"reduced"`` width/depth preset.
        input_size: overrides the preset's square input resolution.
    """
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {tuple(PRESETS)}")
    head_channels(head)
    p = PRESETS[preset]
    size = input_size or p.input_size
    if size % 32:
        raise ValueError(f"input size must be a multiple of 32, got {size}")
    b = GraphBuilder(width=p.width)
    x = b.input()
    f52, f26, f13 = build_backbone(b, x, p.repeats)
    if model == "yolo-ob":
        t13, t26, t52 = build_bispfpn(b, f13, f26, f52, bispfpn_layers)
    else:
        t13, t26, t52 = build_yolov3_neck(b, f13, f26, f52)
    heads = build_head(b, (t13, t26, t52), head)
    scale = size / 416.0
    anchors = tuple(tuple((w * scale, h * scale) for w, h in lvl) for lvl in ANCHORS_416)
    return NetworkGraph(b.layers, b.taps, heads, head, size,
                        anchors=anchors if head == "anchor" else (),
                        description=dict(model=model, bispfpn_layers=bispfpn_layers if model == "yolo-ob" else 0,
                                         head=head, preset=preset, input_size=size))


# ---------------------------------------------------------------- accounting

@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    multi_adds: int


@dataclass
class AccountingReport:
    learnable_params: int
    multi_adds: int
    batch: int
    per_layer: list[LayerCost]

    @property
    def params_m(self) -> float:
        return self.learnable_params / 1e6

    @property
    def multi_adds_g(self) -> float:
        return self.multi_adds / 1e9


def _costs(graph: NetworkGraph, batch: int) -> list[LayerCost]:
    shapes = graph.shapes()
    rows = []
    for spec in graph.layers:
        params = madds = 0
        if spec.kind in ("conv", "head"):
            cin = shapes[spec.inputs[0]][0]
            cout, ho, wo = shapes[spec.id]
            weights = cin * spec.kernel * spec.kernel * cout
            params = weights + (cout if spec.kind == "head" else 0)
            madds = weights * ho * wo * batch
        elif spec.kind == "bn":
            params = 2 * shapes[spec.id][0]
        rows.append(LayerCost(spec.name, spec.kind, params, madds))
    return rows


def count_params(graph: NetworkGraph) -> AccountingReport:
    """Learnable parameters: conv weights, head biases, BN scale and shift."""
    rows = _costs(graph, 1)
    return AccountingReport(sum(r.params for r in rows), sum(r.multi_adds for r in rows), 1, rows)


def count_multiadds(graph: NetworkGraph, batch: int = 1) -> AccountingReport:
    """Convolution multiply-accumulates only, for ``batch`` images."""
    rows = _costs(graph, batch)
    return AccountingReport(sum(r.params for r in rows), sum(r.multi_adds for r in rows), batch, rows)


def summary_table(graph: NetworkGraph) -> str:
    """Layer table in the Layer / Filter size / Stride / Output layout."""
    shapes = graph.shapes()
    tap_at = {v: k for k, v in graph.taps.items()}
    lines = [f"{'Layer':<44} {'Filter size':<14} {'Stride':>6}  {'Output':<18} Remarks"]
    for spec in graph.layers:
        if spec.kind in ("bn", "input"):
            continue
        c, h, w = shapes[spec.id]
        label = {"conv": "Convolutional", "head": "Head", "add": "Residual", "maxpool": "MaxPool",
                 "upsample": "Upsample", "concat": "Concat", "silu": "SiLU"}[spec.kind]
        if spec.kind == "silu":
            # Collapse CBS into its conv row; only surface taps.
            if spec.id not in tap_at:
                continue
        if spec.kind in ("conv", "head"):
            filt = f"{spec.kernel}x{spec.kernel}x{c}"
            stride = str(spec.stride)
        elif spec.kind == "maxpool":
            filt, stride = f"{spec.kernel}x{spec.kernel}", "1"
        else:
            filt, stride = "", ""
        lines.append(f"{label + ' ' + spec.name:<44} {filt:<14} {stride:>6}  {f'{h}x{w}x{c}':<18} "
                     f"{tap_at.get(spec.id, '')}")
    return "\n".join(lines)


# ------------------------------------------------------------------- network

def _kaiming(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Network:
    """Weights plus an executor for a :class:`NetworkGraph`."""

    def __init__(self, graph: NetworkGraph, seed: int = 0):
        self.graph = graph
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        shapes = graph.shapes()
        for spec in graph.layers:
            if spec.kind == "conv":
                cin = shapes[spec.inputs[0]][0]
                w = _kaiming(rng, (spec.out_channels, cin, spec.kernel, spec.kernel))
                self.params[f"{spec.name}.weight"] = Tensor(w, requires_grad=True, name=f"{spec.name}.weight")
            elif spec.kind == "head":
                cin = shapes[spec.inputs[0]][0]
                w = (rng.standard_normal((spec.out_channels, cin, 1, 1)) * 0.01).astype(np.float32)
                bias = self._head_bias(spec.out_channels)
                self.params[f"{spec.name}.weight"] = Tensor(w, requires_grad=True, name=f"{spec.name}.weight")
                self.params[f"{spec.name}.bias"] = Tensor(bias, requires_grad=True, name=f"{spec.name}.bias")
            elif spec.kind == "bn":
                c = shapes[spec.id][0]
                self.params[f"{spec.name}.gamma"] = Tensor(np.ones(c, np.float32), requires_grad=True,
                                                           name=f"{spec.name}.gamma")
                self.params[f"{spec.name}.beta"] = Tensor(np.zeros(c, np.float32), requires_grad=True,
                                                          name=f"{spec.name}.beta")
                self.buffers[f"{spec.name}.running_mean"] = np.zeros(c, np.float32)
                self.buffers[f"{spec.name}.running_var"] = np.ones(c, np.float32)
        self._last_use = self._compute_last_use()

    def _head_bias(self, channels: int) -> np.ndarray:
        bias = np.zeros(channels, np.float32)
        per = 4 + 1 + self.graph.num_classes
        bias[4::per] = OBJ_PRIOR_BIAS
        return bias

    def _compute_last_use(self) -> list[int]:
        last = list(range(len(self.graph.layers)))
        for spec in self.graph.layers:
            for i in spec.inputs:
                last[i] = max(last[i], spec.id)
        for lid in list(self.graph.taps.values()) + list(self.graph.heads):
            last[lid] = len(self.graph.layers)
        return last

    def state(self) -> dict[str, np.ndarray]:
        """Ordered name -> array mapping of every weight and BN statistic."""
        out: dict[str, np.ndarray] = {}
        for spec in self.graph.layers:
            for suffix in ("weight", "bias", "gamma", "beta"):
                key = f"{spec.name}.{suffix}"
                if key in self.params:
                    out[key] = self.params[key].data
            for suffix in ("running_mean", "running_var"):
                key = f"{spec.name}.{suffix}"
                if key in self.buffers:
                    out[key] = self.buffers[key]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for key, arr in state.items():
            if key in self.params:
                self.params[key].data = np.array(arr, dtype=np.float32)
            elif key in self.buffers:
                self.buffers[key] = np.array(arr, dtype=np.float32)
            else:
                raise KeyError(f"unexpected state entry {key}")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, images, train: bool = False, return_taps: bool = False):
        """Run the graph on ``(B, 3, H, W)`` images; returns raw head logits.

        With ``return_taps`` a ``(heads, taps)`` pair is returned where
        ``taps`` maps tap names to their output tensors.
        """
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        g = self.graph
        want = (g.in_channels, g.input_size, g.input_size)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != want:
            raise ShapeError(f"expected images shaped (B, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")
        outs: list[Tensor | None] = [None] * len(g.layers)
        P = self.params
        for spec in g.layers:
            ins = [outs[i] for i in spec.inputs]
            k = spec.kind
            if k == "input":
                y = x
            elif k == "conv":
                y = T.conv2d(ins[0], P[f"{spec.name}.weight"], None, spec.stride, spec.padding)
            elif k == "head":
                y = T.conv2d(ins[0], P[f"{spec.name}.weight"], P[f"{spec.name}.bias"], 1, 0)
            elif k == "bn":
                y = T.batch_norm(ins[0], P[f"{spec.name}.gamma"], P[f"{spec.name}.beta"],
                                 self.buffers[f"{spec.name}.running_mean"],
                                 self.buffers[f"{spec.name}.running_var"], train=train)
            elif k == "silu":
                y = T.silu(ins[0])
            elif k == "add":
                y = T.add(ins[0], ins[1])
            elif k == "maxpool":
                y = T.max_pool(ins[0], spec.kernel, 1, spec.padding)
            elif k == "upsample":
                y = T.upsample_nearest2x(ins[0])
            elif k == "concat":
                y = T.concat_channels(*ins)
            outs[spec.id] = y
            for i in spec.inputs:
                if self._last_use[i] == spec.id:
                    outs[i] = None
        heads = [outs[h] for h in g.heads]
        if return_taps:
            return heads, {name: outs[lid] for name, lid in g.taps.items()}
        return heads

    __call__ = forward
