"""Heterogeneous message-passing network with hand-written backprop and Adam.

Layer structure (hidden size d):

* lift: ``h_c = relu(b_c W + b)``, ``h_v = relu([c_v, x_v] W + b)``, ``h_g = 0``;
* message along an edge with weight e from source embedding h:
  ``relu([e h, e] W_msg + b_msg)``, aggregated by sum (or by degree-normalized
  mean when ``aggr="mean"``); global edges use e = 1;
* update: ``relu([h_prev, agg_1, agg_2, ...] W_upd + b_upd)``;
* receiver order constraints, global, variables. In ``async`` mode later
  receivers see senders already updated in this layer; ``sync`` mode feeds
  every receiver the previous layer;
* head: ``relu(h_v W1 + b1) W2 + b2`` per variable node.

The ``ipm`` mode uses the global node, the ``feas`` mode does not.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import GraphBatch

MODES = ("ipm", "feas")

# incoming edge types per receiver, in concatenation order
_INCOMING = {
    "ipm": {"c": ("vc", "gc"), "g": ("vg", "cg"), "v": ("vv", "cv", "gv")},
    "feas": {"c": ("vc",), "v": ("vv", "cv")},
}
_ORDER = {"ipm": ("c", "g", "v"), "feas": ("c", "v")}


def _relu(z):
    return np.maximum(z, 0.0)


@dataclass
class MpnnModel:
    mode: str = "feas"
    sync_mode: str = "async"
    L: int = 4
    d: int = 32
    aggr: str = "sum"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.sync_mode not in ("async", "sync"):
            raise ValueError(f"unknown sync mode {self.sync_mode!r}")
        if self.aggr not in ("sum", "mean"):
            raise ValueError(f"unknown aggregation {self.aggr!r}")
        if self.L < 1 or self.d < 1:
            raise ValueError("L and d must be positive")

    @property
    def has_global(self) -> bool:
        return self.mode == "ipm"

    def param_shapes(self) -> dict:
        d = self.d
        shapes = {"lift_c.W": (1, d), "lift_c.b": (d,), "lift_v.W": (2, d), "lift_v.b": (d,)}
        for l in range(self.L):
            for recv, ets in _INCOMING[self.mode].items():
                for et in ets:
                    shapes[f"layer{l}.msg_{et}.W"] = (d + 1, d)
                    shapes[f"layer{l}.msg_{et}.b"] = (d,)
                shapes[f"layer{l}.upd_{recv}.W"] = ((1 + len(ets)) * d, d)
                shapes[f"layer{l}.upd_{recv}.b"] = (d,)
        shapes.update({"head.W1": (d, d), "head.b1": (d,), "head.W2": (d, 1), "head.b2": (1,)})
        return shapes

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def copy(self) -> "MpnnModel":
        return MpnnModel(self.mode, self.sync_mode, self.L, self.d, self.aggr,
                         {k: v.copy() for k, v in self.params.items()})

    # serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        def pack(keys):
            return {k: {"shape": list(self.params[k].shape),
                        "data": self.params[k].ravel().tolist()} for k in keys}
        layer_keys = [[k for k in self.params if k.startswith(f"layer{l}.")] for l in range(self.L)]
        return {"mode": self.mode, "sync_mode": self.sync_mode, "L": self.L, "d": self.d,
                "aggr": self.aggr,
                "lift": pack([k for k in self.params if k.startswith("lift_")]),
                "layers": [pack(ks) for ks in layer_keys],
                "head": pack([k for k in self.params if k.startswith("head.")])}

    @classmethod
    def from_dict(cls, obj: dict) -> "MpnnModel":
        params = {}
        for group in [obj["lift"], *obj["layers"], obj["head"]]:
            for k, v in group.items():
                params[k] = np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
        model = cls(obj["mode"], obj["sync_mode"], int(obj["L"]), int(obj["d"]),
                    obj.get("aggr", "sum"), params)
        expected = model.param_shapes()
        if set(expected) != set(params) or any(params[k].shape != s for k, s in expected.items()):
            raise ValueError("model file does not match its declared architecture")
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MpnnModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_model(mode: str = "feas", L: int = 4, d: int = 32, seed: int = 0,
               sync_mode: str = "async", aggr: str = "sum") -> MpnnModel:
    """Glorot-uniform weights and zero biases, drawn from ``numpy.random.default_rng(seed)``."""
    model = MpnnModel(mode, sync_mode, L, d, aggr)
    rng = np.random.default_rng(seed)
    for k, shape in model.param_shapes().items():
        if len(shape) == 2:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            model.params[k] = rng.uniform(-lim, lim, size=shape)
        else:
            model.params[k] = np.zeros(shape)
    return model


def _as_batch(graph) -> GraphBatch:
    return graph if isinstance(graph, GraphBatch) else GraphBatch([graph])


def _check_graph(model: MpnnModel, batch: GraphBatch):
    if batch.has_global != model.has_global:
        raise ValueError(f"mode {model.mode!r} expects has_global={model.has_global}")


# ---------------------------------------------------------------- forward with tape

class _Tape:
    """Records forward values so that :func:`_backward` can replay them in reverse."""

    def __init__(self):
        self.ops = []
        self.vals = {}


def _dense(tape, P, prefix, in_keys, out_key, relu=True):
    X = np.hstack([tape.vals[k] for k in in_keys]) if len(in_keys) > 1 else tape.vals[in_keys[0]]
    Z = X @ P[prefix + ".W"] + P[prefix + ".b"]
    H = _relu(Z) if relu else Z
    tape.vals[out_key] = H
    tape.ops.append(("dense", prefix, in_keys, out_key, X, Z, relu))


def _message(tape, P, prefix, edges, scatter, src_key, out_key, d):
    H = tape.vals[src_key]
    wH = edges.gather @ H
    F = np.hstack([wH, edges.w[:, None]])
    Z = F @ P[prefix + ".W"] + P[prefix + ".b"]
    M = _relu(Z)
    tape.vals[out_key] = scatter @ M
    tape.ops.append(("msg", prefix, src_key, out_key, edges, scatter, F, Z))


def _embed(model: MpnnModel, batch: GraphBatch, x_prev, tape: _Tape) -> dict:
    P = model.params
    tape.vals["in_c"] = batch.cons_feat[:, None].astype(np.float64)
    tape.vals["in_v"] = np.column_stack([batch.var_feat, x_prev]).astype(np.float64)
    _dense(tape, P, "lift_c", ["in_c"], ("c", 0))
    _dense(tape, P, "lift_v", ["in_v"], ("v", 0))
    cur = {"c": ("c", 0), "v": ("v", 0)}
    if model.has_global:
        tape.vals[("g", 0)] = np.zeros((batch.num_graphs, model.d))
        cur["g"] = ("g", 0)
    return cur


def _layer(model: MpnnModel, batch: GraphBatch, tape: _Tape, cur: dict, l: int) -> dict:
    P = model.params
    prev = dict(cur)
    cur = dict(cur)
    mean = model.aggr == "mean"
    for recv in _ORDER[model.mode]:
        in_keys = [prev[recv]]
        for et in _INCOMING[model.mode][recv]:
            src = et[0]
            src_key = prev[src] if model.sync_mode == "sync" else cur[src]
            edges = batch.edges[et]
            agg_key = ("agg", l, et)
            _message(tape, P, f"layer{l}.msg_{et}", edges, edges.scatter(mean),
                     src_key, agg_key, model.d)
            in_keys.append(agg_key)
        _dense(tape, P, f"layer{l}.upd_{recv}", in_keys, (recv, l + 1))
        cur[recv] = (recv, l + 1)
    return cur


def _forward(model: MpnnModel, batch: GraphBatch, x_prev) -> tuple[np.ndarray, _Tape, dict]:
    _check_graph(model, batch)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if x_prev.shape != (batch.n,):
        raise ValueError(f"x_prev has shape {x_prev.shape}, expected ({batch.n},)")
    tape = _Tape()
    cur = _embed(model, batch, x_prev, tape)
    for l in range(model.L):
        cur = _layer(model, batch, tape, cur, l)
    P = model.params
    Hv = tape.vals[cur["v"]]
    Z1 = Hv @ P["head.W1"] + P["head.b1"]
    A1 = _relu(Z1)
    out = (A1 @ P["head.W2"]).ravel() + P["head.b2"][0]
    tape.ops.append(("head", cur["v"], Hv, Z1, A1))
    return out, tape, cur


@dataclass
class Embeddings:
    h_c: np.ndarray
    h_v: np.ndarray
    h_g: np.ndarray | None = None


def init_embeddings(model: MpnnModel, graph, x_prev) -> Embeddings:
    batch = _as_batch(graph)
    _check_graph(model, batch)
    tape = _Tape()
    cur = _embed(model, batch, np.asarray(x_prev, dtype=np.float64), tape)
    return Embeddings(tape.vals[cur["c"]], tape.vals[cur["v"]],
                      tape.vals[cur["g"]] if "g" in cur else None)


def forward_layer(model: MpnnModel, graph, emb: Embeddings, layer_index: int) -> Embeddings:
    batch = _as_batch(graph)
    _check_graph(model, batch)
    tape = _Tape()
    l = layer_index
    tape.vals[("c", l)] = emb.h_c
    tape.vals[("v", l)] = emb.h_v
    cur = {"c": ("c", l), "v": ("v", l)}
    if model.has_global:
        tape.vals[("g", l)] = emb.h_g
        cur["g"] = ("g", l)
    cur = _layer(model, batch, tape, cur, l)
    return Embeddings(tape.vals[cur["c"]], tape.vals[cur["v"]],
                      tape.vals[cur["g"]] if "g" in cur else None)


def predict(model: MpnnModel, graph, x_prev) -> np.ndarray:
    """Per-variable output: next point (ipm mode) or displacement (feas mode)."""
    out, _, _ = _forward(model, _as_batch(graph), x_prev)
    return out


def loss_mse(pred, target) -> float:
    """Sum of squared differences."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    diff = target - pred
    return float(diff @ diff)


# ---------------------------------------------------------------- backward

def _acc(grads: dict, key, g):
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _backward(model: MpnnModel, tape: _Tape, d_out: np.ndarray, pgrads: dict) -> None:
    P = model.params
    g = {}
    for op in reversed(tape.ops):
        kind = op[0]
        if kind == "head":
            _, hv_key, Hv, Z1, A1 = op
            pgrads["head.W2"] += A1.T @ d_out[:, None]
            pgrads["head.b2"] += np.array([d_out.sum()])
            dZ1 = (d_out[:, None] @ P["head.W2"].T) * (Z1 > 0)
            pgrads["head.W1"] += Hv.T @ dZ1
            pgrads["head.b1"] += dZ1.sum(axis=0)
            _acc(g, hv_key, dZ1 @ P["head.W1"].T)
        elif kind == "dense":
            _, prefix, in_keys, out_key, X, Z, relu = op
            gout = g.pop(out_key, None)
            if gout is None:
                continue
            dZ = gout * (Z > 0) if relu else gout
            pgrads[prefix + ".W"] += X.T @ dZ
            pgrads[prefix + ".b"] += dZ.sum(axis=0)
            dX = dZ @ P[prefix + ".W"].T
            col = 0
            for k in in_keys:
                w = tape.vals[k].shape[1]
                if not (isinstance(k, str) and k.startswith("in_")):
                    _acc(g, k, dX[:, col:col + w])
                col += w
        elif kind == "msg":
            _, prefix, src_key, out_key, edges, scatter, F, Z = op
            gout = g.pop(out_key, None)
            if gout is None:
                continue
            dZ = (scatter.T @ gout) * (Z > 0)
            pgrads[prefix + ".W"] += F.T @ dZ
            pgrads[prefix + ".b"] += dZ.sum(axis=0)
            dwH = dZ @ P[prefix + ".W"][:-1].T
            _acc(g, src_key, edges.gather_t @ dwH)


def zero_grads(model: MpnnModel) -> dict:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def value_and_grad(model: MpnnModel, graph, x_prev, target, weight: float = 1.0,
                   grads: dict | None = None):
    """``weight * ||target - predict||^2``, its parameter gradient, and the prediction.

    Gradients are accumulated into ``grads`` when given.
    """
    batch = _as_batch(graph)
    out, tape, _ = _forward(model, batch, x_prev)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != out.shape:
        raise ValueError("target length mismatch")
    diff = out - target
    grads = zero_grads(model) if grads is None else grads
    _backward(model, tape, 2.0 * weight * diff, grads)
    return weight * float(diff @ diff), grads, out


def backward(model: MpnnModel, graph, x_prev, target) -> dict:
    """Gradient of ``loss_mse(predict(model, graph, x_prev), target)`` w.r.t. every parameter."""
    return value_and_grad(model, graph, x_prev, target)[1]


def backward_from_output(model: MpnnModel, graph, x_prev, d_out) -> tuple[np.ndarray, dict]:
    """Prediction and the parameter gradient for an arbitrary output cotangent ``d_out``."""
    batch = _as_batch(graph)
    out, tape, _ = _forward(model, batch, x_prev)
    grads = zero_grads(model)
    _backward(model, tape, np.asarray(d_out, dtype=np.float64), grads)
    return out, grads


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(model: MpnnModel, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[MpnnModel, AdamState]:
    """Bias-corrected Adam update, applied in place and returned for convenience."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k in sorted(model.params):
        gk = grads[k]
        mk = state.m.get(k)
        if mk is None:
            mk = np.zeros_like(gk)
            state.v[k] = np.zeros_like(gk)
        mk = beta1 * mk + (1.0 - beta1) * gk
        vk = beta2 * state.v[k] + (1.0 - beta2) * gk * gk
        state.m[k], state.v[k] = mk, vk
        model.params[k] = model.params[k] - lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
    return model, state


def flat_params(model: MpnnModel) -> np.ndarray:
    return np.concatenate([model.params[k].ravel() for k in sorted(model.params)])


def forward_tape(model: MpnnModel, graph, x_prev):
    """Prediction plus the recorded tape needed by :func:`accumulate_grad`."""
    out, tape, _ = _forward(model, _as_batch(graph), x_prev)
    return out, tape


def accumulate_grad(model: MpnnModel, tape, d_out, grads: dict) -> dict:
    """Add the parameter gradient for output cotangent ``d_out`` into ``grads``."""
    _backward(model, tape, np.asarray(d_out, dtype=np.float64), grads)
    return grads
