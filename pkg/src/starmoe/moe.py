"""Expandable mixture of adapter experts on top of a frozen random backbone.

Every weight lives in a float64 numpy array.  Forward passes bind the arrays to
an autodiff :class:`~starmoe.autodiff.Tape` (trainable ones as parameters,
the rest as constants), so the same code path serves inference and training.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import SeededRng

INIT_STD = 0.01


@dataclass
class AdapterExpert:
    w_down: np.ndarray  # d x r
    w_up: np.ndarray  # r x d
    frozen: bool = False


@dataclass
class Router:
    w_router: np.ndarray  # d x E

    @property
    def e_total(self) -> int:
        return self.w_router.shape[1]

    def logits(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.w_router


@dataclass
class MoELayer:
    mlp_w1: np.ndarray  # d x 2d, frozen
    mlp_w2: np.ndarray  # 2d x d, frozen
    experts: list[AdapterExpert]
    router: Router
    k: int
    expandable: bool = True

    @property
    def d(self) -> int:
        return self.mlp_w1.shape[0]


@dataclass
class Network:
    stem: np.ndarray  # input_dim x d, frozen
    layers: list[MoELayer]
    classifier: np.ndarray  # d x classes_seen
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.stem.shape[1]

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[1]

    @property
    def moe_layers(self) -> list[int]:
        """Indices of layers that expand (and carry routing regularizers)."""
        return [i for i, layer in enumerate(self.layers) if layer.expandable]


@dataclass
class LayerTrace:
    z: np.ndarray  # router input, B x d
    h: np.ndarray  # routing logits, B x E
    P: np.ndarray  # dense distribution
    K: np.ndarray  # boolean selection mask
    G: np.ndarray  # sparse gate


# construction -------------------------------------------------------------------

def new_expert(d: int, r: int, rng: SeededRng, std: float = INIT_STD) -> AdapterExpert:
    return AdapterExpert(rng.normal((d, r)) * std, rng.normal((r, d)) * std)


def init_network(input_dim: int, d: int, r: int, n_layers: int, k: int, n_classes: int,
                 rng: SeededRng, expand_start_layer: int = 1) -> Network:
    """Random frozen stem and base blocks, one expert per layer.

    Layers numbered below ``expand_start_layer`` (1-based) hold a single
    non-expanding adapter.
    """
    if min(input_dim, d, r, k) < 1 or n_layers < 0:
        raise ValueError("dimensions and k must be >= 1")
    stem = rng.normal((input_dim, d)) / np.sqrt(input_dim)
    layers = []
    for i in range(n_layers):
        w1 = rng.normal((d, 2 * d)) * np.sqrt(2.0 / d)
        w2 = rng.normal((2 * d, d)) / np.sqrt(2 * d)
        expert = new_expert(d, r, rng)
        router = Router(rng.normal((d, 1)) * INIT_STD)
        layers.append(MoELayer(w1, w2, [expert], router, k, expandable=i + 1 >= expand_start_layer))
    classifier = rng.normal((d, n_classes)) * INIT_STD
    return Network(stem, layers, classifier, seed=rng.seed)


def expand_layer(layer: MoELayer, rng: SeededRng) -> MoELayer:
    """Freeze existing experts, append one fresh expert and router column."""
    for expert in layer.experts:
        expert.frozen = True
    layer.experts.append(new_expert(layer.d, layer.experts[0].w_down.shape[1], rng))
    column = rng.normal((layer.d, 1)) * INIT_STD
    layer.router.w_router = np.concatenate([layer.router.w_router, column], axis=1)
    return layer


def freeze_layer(layer: MoELayer) -> MoELayer:
    for expert in layer.experts:
        expert.frozen = True
    return layer


def expand_classifier(net: Network, new_class_count: int, rng: SeededRng) -> Network:
    if new_class_count < 1:
        raise ValueError("new_class_count must be >= 1")
    cols = rng.normal((net.d, new_class_count)) * INIT_STD
    net.classifier = np.concatenate([net.classifier, cols], axis=1)
    return net


# parameters -----------------------------------------------------------------------

def named_weights(net: Network) -> dict[str, np.ndarray]:
    out = {"stem": net.stem}
    for i, layer in enumerate(net.layers):
        out[f"layer{i}.mlp1"] = layer.mlp_w1
        out[f"layer{i}.mlp2"] = layer.mlp_w2
        out[f"layer{i}.router"] = layer.router.w_router
        for j, expert in enumerate(layer.experts):
            out[f"layer{i}.expert{j}.down"] = expert.w_down
            out[f"layer{i}.expert{j}.up"] = expert.w_up
    out["classifier"] = net.classifier
    return out


def trainable_parameters(net: Network) -> list[str]:
    """Routers, non-frozen experts and the full classifier."""
    names = []
    for i, layer in enumerate(net.layers):
        names.append(f"layer{i}.router")
        for j, expert in enumerate(layer.experts):
            if not expert.frozen:
                names += [f"layer{i}.expert{j}.down", f"layer{i}.expert{j}.up"]
    names.append("classifier")
    return names


def set_weight(net: Network, name: str, value: np.ndarray) -> None:
    if name == "classifier":
        net.classifier = value
        return
    head, _, rest = name.partition(".")
    layer = net.layers[int(head[len("layer"):])]
    if rest == "router":
        layer.router.w_router = value
        return
    if rest.startswith("expert"):
        ename, _, which = rest.partition(".")
        expert = layer.experts[int(ename[len("expert"):])]
        if expert.frozen:
            raise ValueError(f"{name} is frozen")
        if which == "down":
            expert.w_down = value
        else:
            expert.w_up = value
        return
    raise ValueError(f"{name} is not trainable")


def bind(net: Network, tape: ad.Tape, trainable=()) -> dict[str, ad.Node]:
    trainable = set(trainable)
    return {name: tape.param(w, name) if name in trainable else tape.const(w)
            for name, w in named_weights(net).items()}


def frozen_digest(net: Network) -> dict[str, str]:
    """sha256 of every frozen array: stem, base blocks and frozen experts."""
    out = {"stem": hashlib.sha256(net.stem.tobytes()).hexdigest()}
    for i, layer in enumerate(net.layers):
        out[f"layer{i}.mlp"] = hashlib.sha256(layer.mlp_w1.tobytes() + layer.mlp_w2.tobytes()).hexdigest()
        for j, expert in enumerate(layer.experts):
            if expert.frozen:
                blob = expert.w_down.tobytes() + expert.w_up.tobytes()
                out[f"layer{i}.expert{j}"] = hashlib.sha256(blob).hexdigest()
    return out


# forward -----------------------------------------------------------------------------

def topk_mask(h: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the min(k, E) largest logits per row; ties go to lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    h = np.atleast_2d(h)
    order = np.argsort(-h, axis=-1, kind="stable")[:, : min(k, h.shape[-1])]
    mask = np.zeros(h.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def route_topk(z, router: Router, k: int):
    """Selected index set and sparse gate for a single router input."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (router.w_router.shape[0],):
        raise ValueError("router input has wrong length")
    h = router.logits(z)[None, :]
    mask = topk_mask(h, k)
    gate = ad.masked_softmax(ad.Tape().const(h), mask).value[0]
    return np.flatnonzero(mask[0]), gate


def adapter_forward(x, expert: AdapterExpert) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != expert.w_down.shape[0]:
        raise ValueError("input width does not match expert")
    return np.maximum(x @ expert.w_down, 0.0) @ expert.w_up


def layer_forward_nodes(x: ad.Node, layer: MoELayer, w: dict, i: int):
    if x.shape[-1] != layer.d:
        raise ValueError(f"layer {i} expects width {layer.d}, got {x.shape[-1]}")
    base = ad.matmul(ad.relu(ad.matmul(x, w[f"layer{i}.mlp1"])), w[f"layer{i}.mlp2"])
    h = ad.matmul(x, w[f"layer{i}.router"])
    mask = topk_mask(h.value, layer.k)
    gate = ad.masked_softmax(h, mask)
    out = base
    for j in range(len(layer.experts)):
        if not mask[:, j].any():
            continue
        a = ad.matmul(ad.relu(ad.matmul(x, w[f"layer{i}.expert{j}.down"])), w[f"layer{i}.expert{j}.up"])
        gj = ad.gather(gate, np.full((x.shape[0], 1), j))
        out = out + gj * a
    trace = LayerTrace(z=x.value, h=h.value, P=_dense(h.value), K=mask, G=gate.value)
    return out, h, trace


def _dense(h):
    e = np.exp(h - h.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward_nodes(net: Network, w: dict, X: ad.Node):
    """Logits node plus per-layer router-input nodes and traces."""
    if X.shape[-1] != net.stem.shape[0]:
        raise ValueError(f"input dimension {X.shape[-1]} != {net.stem.shape[0]}")
    x = ad.matmul(X, w["stem"])
    router_inputs, logits_nodes, traces = [], [], []
    for i, layer in enumerate(net.layers):
        router_inputs.append(x)
        x, h, trace = layer_forward_nodes(x, layer, w, i)
        logits_nodes.append(h)
        traces.append(trace)
    return ad.matmul(x, w["classifier"]), router_inputs, logits_nodes, traces


def moe_layer_forward(x, layer: MoELayer):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    tape = ad.Tape()
    w = {f"layer0.{k}": tape.const(v) for k, v in _layer_weights(layer).items()}
    out, _, trace = layer_forward_nodes(tape.const(np.atleast_2d(x)), layer, w, 0)
    return (out.value[0] if single else out.value), trace


def _layer_weights(layer: MoELayer) -> dict:
    out = {"mlp1": layer.mlp_w1, "mlp2": layer.mlp_w2, "router": layer.router.w_router}
    for j, e in enumerate(layer.experts):
        out[f"expert{j}.down"] = e.w_down
        out[f"expert{j}.up"] = e.w_up
    return out


def network_forward(x, net: Network):
    """Class logits and the per-layer routing trace (no gradient recording)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    tape = ad.Tape()
    logits, _, _, traces = forward_nodes(net, bind(net, tape), tape.const(np.atleast_2d(x)))
    return (logits.value[0] if single else logits.value), traces


def router_inputs(X, net: Network) -> list[np.ndarray]:
    tape = ad.Tape()
    _, zs, _, _ = forward_nodes(net, bind(net, tape), tape.const(np.atleast_2d(X)))
    return [z.value for z in zs]


# checkpoints -----------------------------------------------------------------------------

def save_checkpoint(net: Network, path) -> None:
    """npz archive: every named weight plus a JSON header with shapes and flags."""
    weights = named_weights(net)
    header = {
        "format": "starmoe-checkpoint/1",
        "seed": net.seed,
        "meta": net.meta,
        "layers": [
            {"k": layer.k, "expandable": layer.expandable,
             "frozen": [e.frozen for e in layer.experts]}
            for layer in net.layers
        ],
        "shapes": {name: list(w.shape) for name, w in weights.items()},
    }
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
             **weights)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Network:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        arrays = {name: data[name].copy() for name in header["shapes"]}
    layers = []
    for i, spec in enumerate(header["layers"]):
        experts = [AdapterExpert(arrays[f"layer{i}.expert{j}.down"], arrays[f"layer{i}.expert{j}.up"], frozen)
                   for j, frozen in enumerate(spec["frozen"])]
        layers.append(MoELayer(arrays[f"layer{i}.mlp1"], arrays[f"layer{i}.mlp2"], experts,
                               Router(arrays[f"layer{i}.router"]), spec["k"], spec["expandable"]))
    return Network(arrays["stem"], layers, arrays["classifier"], seed=header["seed"], meta=header["meta"])
