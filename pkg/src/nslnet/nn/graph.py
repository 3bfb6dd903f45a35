"""Layer graphs: a linear chain with optional parallel branches joined by concat."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import FormatError, ParameterError, ShapeError
from ..nsl import NslConfig
from . import layers as L

KINDS = ("conv", "relu", "maxpool", "nsl", "nin", "concat", "flatten", "fc", "softmax")
INPUT = "input"


@dataclass
class LayerSpec:
    """One node of the graph.

    ``inputs`` names upstream layer ids; empty means "the previous layer".
    ``params`` holds kind-specific integers/floats (see :func:`make_layer`).
    """

    id: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: tuple = ()

    def to_line(self) -> str:
        parts = [self.id, self.kind]
        parts += [f"{k}={_fmt(v)}" for k, v in self.params.items()]
        if self.inputs:
            parts.append("inputs=" + ",".join(self.inputs))
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "LayerSpec":
        tokens = line.split()
        if len(tokens) < 2:
            raise FormatError(f"bad layer line {line!r}")
        lid, kind, *rest = tokens
        if kind not in KINDS:
            raise FormatError(f"unknown layer kind {kind!r}")
        params, inputs = {}, ()
        for tok in rest:
            key, sep, val = tok.partition("=")
            if not sep:
                raise FormatError(f"bad layer parameter {tok!r}")
            if key == "inputs":
                inputs = tuple(val.split(","))
            else:
                params[key] = _parse(val)
        return cls(lid, kind, params, inputs)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _parse(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def make_layer(spec: LayerSpec, workers: int = 1) -> L.Layer:
    p = spec.params
    k = spec.kind
    if k == "conv":
        return L.Conv2D(p["in"], p["out"], p["k"])
    if k == "nin":
        return L.NiN(p["in"], p["out"])
    if k == "relu":
        return L.ReLU()
    if k == "maxpool":
        return L.MaxPool(p.get("window", 2), p.get("stride", 2))
    if k == "nsl":
        eps = p.get("eps")
        return L.NSLLayer(NslConfig.square(p["side"], None if eps in (None, "auto") else float(eps)), workers)
    if k == "concat":
        return L.Concat(len(spec.inputs))
    if k == "flatten":
        return L.Flatten()
    if k == "fc":
        return L.Dense(p["in"], p["out"])
    if k == "softmax":
        return L.Softmax()
    raise ParameterError(f"unknown layer kind {k!r}")


class LayerGraph:
    """Executable network over (channels, height, width) inputs.

    Layers run in declaration order. Parameter blocks are exposed flat as
    ``"<layer id>.<name>"`` through :attr:`params` and :attr:`grads`.
    """

    def __init__(self, specs, input_shape, precision="single", workers: int = 1):
        self.specs = list(specs)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(np.float32 if precision == "single" else np.float64)
        self.layers = [make_layer(s, workers) for s in self.specs]
        self._wiring = self._resolve_inputs()
        self.shapes = self._infer_shapes()
        for layer in self.layers:
            for name, arr in layer.params.items():
                layer.params[name] = arr.astype(self.dtype)

    @property
    def workers(self) -> int:
        return next((l.workers for l in self.layers if isinstance(l, L.NSLLayer)), 1)

    @workers.setter
    def workers(self, n: int) -> None:
        for layer in self.layers:
            if isinstance(layer, L.NSLLayer):
                layer.workers = n

    def _resolve_inputs(self):
        seen = [INPUT]
        wiring = []
        ids = set()
        for spec in self.specs:
            if spec.id in ids or spec.id == INPUT:
                raise ShapeError(f"duplicate layer id {spec.id!r}")
            srcs = spec.inputs or (seen[-1],)
            for s in srcs:
                if s not in seen:
                    raise ShapeError(f"layer {spec.id!r} reads {s!r}, which is not defined before it")
            wiring.append(srcs)
            seen.append(spec.id)
            ids.add(spec.id)
        return wiring

    def _infer_shapes(self):
        shapes = {INPUT: self.input_shape}
        for spec, layer, srcs in zip(self.specs, self.layers, self._wiring):
            ins = [shapes[s] for s in srcs]
            try:
                shapes[spec.id] = layer.out_shape(ins if layer.n_inputs > 1 else ins[0])
            except ShapeError as exc:
                raise ShapeError(f"layer {spec.id!r}: {exc}") from None
        return shapes

    @property
    def output_shape(self):
        return self.shapes[self.specs[-1].id]

    @property
    def params(self) -> dict:
        return {f"{s.id}.{n}": a for s, l in zip(self.specs, self.layers) for n, a in l.params.items()}

    @property
    def grads(self) -> dict:
        return {f"{s.id}.{n}": a for s, l in zip(self.specs, self.layers) for n, a in l.grads.items()}

    def set_param(self, name: str, value: np.ndarray) -> None:
        lid, _, pname = name.rpartition(".")
        layer = self.layers[[s.id for s in self.specs].index(lid)]
        if layer.params[pname].shape != value.shape:
            raise ShapeError(f"{name}: expected {layer.params[pname].shape}, got {value.shape}")
        layer.params[pname] = value.astype(self.dtype)

    def parameter_count(self) -> int:
        return sum(a.size for a in self.params.values())

    def init_params(self, rng: np.random.Generator, mode: str = "average") -> None:
        """Xavier-initialize every block in declaration order (see :func:`layers.xavier_init`)."""
        for layer in self.layers:
            layer.init_params(rng, self.dtype, mode)

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"network expects (batch, {self.input_shape}) input, got {x.shape}")
        return np.ascontiguousarray(x, dtype=self.dtype)

    def _n_logit_layers(self):
        n = len(self.layers)
        return n - 1 if self.layers and self.layers[-1].kind == "softmax" else n

    def _run(self, x, n_layers):
        outs = {INPUT: self._check_input(x)}
        for spec, layer, srcs in list(zip(self.specs, self.layers, self._wiring))[:n_layers]:
            ins = [outs[s] for s in srcs]
            outs[spec.id] = layer.forward(ins if layer.n_inputs > 1 else ins[0])
        return outs

    def logits(self, x) -> np.ndarray:
        """Output of the last layer before a trailing softmax."""
        n = self._n_logit_layers()
        return self._run(x, n)[self.specs[n - 1].id]

    def forward(self, x) -> np.ndarray:
        return self._run(x, len(self.layers))[self.specs[-1].id]

    def activations(self, x, ids) -> dict:
        """Outputs of the named layers for input ``x``."""
        last = max([s.id for s in self.specs].index(i) for i in ids)
        outs = self._run(x, last + 1)
        return {i: outs[i] for i in ids}

    def backward(self, d_logits) -> np.ndarray:
        """Backpropagate from the logits (output of :meth:`logits`); returns d(loss)/d(input)."""
        n = self._n_logit_layers()
        grads = {self.specs[n - 1].id: d_logits}
        for idx in range(n - 1, -1, -1):
            spec, layer, srcs = self.specs[idx], self.layers[idx], self._wiring[idx]
            d_in = layer.backward(grads.pop(spec.id))
            d_in = d_in if layer.n_inputs > 1 else [d_in]
            for s, d in zip(srcs, d_in):
                grads[s] = grads[s] + d if s in grads else d
        return grads[INPUT]

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        out = [self.logits(x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def descriptor(self) -> str:
        lines = ["input " + " ".join(str(d) for d in self.input_shape)]
        lines += [s.to_line() for s in self.specs]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_descriptor(cls, text: str, precision="single", workers: int = 1) -> "LayerGraph":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("input "):
            raise FormatError("architecture descriptor must start with an 'input' line")
        try:
            input_shape = tuple(int(t) for t in lines[0].split()[1:])
        except ValueError:
            raise FormatError(f"bad input line {lines[0]!r}") from None
        return cls([LayerSpec.from_line(ln) for ln in lines[1:]], input_shape, precision, workers)


def digit_net_specs(with_nsl: bool = True, with_nin: bool = False, nsl_side: int = 11,
                    maps: int | None = None, nin_maps: int = 25) -> list[LayerSpec]:
    """Layer list of the two-conv, three-fc digit classifier.

    The first conv width defaults to side**2 - 1 so the second conv sees the
    same number of channels with or without the similarity layer.
    """
    m = nsl_side * nsl_side - 1
    maps = m if maps is None else maps
    specs = [
        LayerSpec("conv1", "conv", {"in": 1, "out": maps, "k": 5}),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool", {"window": 2, "stride": 2}),
    ]
    trunk = "pool1"
    channels = maps
    if with_nsl:
        specs.append(LayerSpec("nsl", "nsl", {"side": nsl_side}))
        trunk, channels = "nsl", m
    if with_nin:
        specs.append(LayerSpec("nin", "nin", {"in": maps, "out": nin_maps}, ("pool1",)))
        specs.append(LayerSpec("cat", "concat", {}, (trunk, "nin")))
        channels += nin_maps
    specs += [
        LayerSpec("conv2", "conv", {"in": channels, "out": 48, "k": 5}),
        LayerSpec("relu2", "relu"),
        LayerSpec("pool2", "maxpool", {"window": 2, "stride": 2}),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc1", "fc", {"in": 48 * 4 * 4, "out": 100}),
        LayerSpec("relu3", "relu"),
        LayerSpec("fc2", "fc", {"in": 100, "out": 100}),
        LayerSpec("relu4", "relu"),
        LayerSpec("fc3", "fc", {"in": 100, "out": 10}),
        LayerSpec("softmax", "softmax"),
    ]
    return specs


def build_digit_net(with_nsl: bool = True, with_nin: bool = False, nsl_side: int = 11,
                    precision="single", workers: int = 1, seed: int | None = 0,
                    init: str = "average") -> LayerGraph:
    """Digit classifier for 1x28x28 inputs, Xavier-initialized from ``seed`` (None leaves zeros)."""
    graph = LayerGraph(digit_net_specs(with_nsl, with_nin, nsl_side), (1, 28, 28), precision, workers)
    if seed is not None:
        graph.init_params(np.random.default_rng(seed), init)
    return graph
