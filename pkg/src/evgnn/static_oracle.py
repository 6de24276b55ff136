"""Reference GNN execution over fully materialized static directed graphs.

The static graph inherits the dynamic builder's semantics exactly
(retention, canonical scan order, d_max truncation), so comparisons against
the event-driven engine isolate the execution schedule, not the topology.

Supported forward paths:
    eq7_int8        -- integer simplified conv, bit-exact vs the engine
    eq7_fp          -- the same conv in float (relu(max_j W (x_j,|dx|,|dy|) + b))
    gcn_eq5_fp      -- degree-normalized sum conv, self-inclusive
    pointnet_eq6_fp -- MLP message/update conv with relative positions
plus a generic message-passing framework with pluggable phi / aggregator /
gamma that reproduces the dedicated layers when specialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .engine import build_adjacency, encoded_inputs
from .event_io import EventStream
from .graph_builder import (Adjacency, SearchParams, brute_force_neighbors)
from .model import QuantizedModel


class IncompatibleModel(TypeError):
    pass


@dataclass
class StaticGraph:
    stream: EventStream
    adjacency: Adjacency
    params: SearchParams

    def __len__(self) -> int:
        return len(self.stream)

    def neighbors(self, i: int):
        return self.adjacency.neighbors(i)


def build_static_graph(stream: EventStream, params: SearchParams,
                       queue_depth: int | None = None) -> StaticGraph:
    """Materialize adjacency[i] == brute_force_neighbors(prefix(i), ev_i).

    Queue-backed shapes reuse the compiled dynamic replay (proven equal to
    the brute-force reference by the oracle-equivalence suite); the other
    shapes run the brute-force reference directly.
    """
    if queue_depth is not None and queue_depth != params.queue_depth:
        params = SearchParams(shape=params.shape, r_s=params.r_s,
                              r_t=params.r_t, r=params.r, beta=params.beta,
                              d_max=params.d_max, queue_depth=queue_depth)
    if params.shape in ("prism", "cylinder"):
        adj = build_adjacency(stream, params)
        return StaticGraph(stream, adj, params)
    n = len(stream)
    deg = np.zeros(n, dtype=np.int64)
    shape = (n, params.d_max)
    nbr_n = np.zeros(shape, dtype=np.int64)
    nbr_dx = np.zeros(shape, dtype=np.int64)
    nbr_dy = np.zeros(shape, dtype=np.int64)
    nbr_dt = np.zeros(shape, dtype=np.int64)
    for i, ev in enumerate(stream.events):
        nbs = brute_force_neighbors(stream.events[:i], ev, params)
        deg[i] = len(nbs)
        for k, nb in enumerate(nbs):
            nbr_n[i, k] = nb.n
            nbr_dx[i, k] = nb.dx
            nbr_dy[i, k] = nb.dy
            nbr_dt[i, k] = nb.dt
    adj = Adjacency(deg, nbr_n, nbr_dx, nbr_dy, nbr_dt,
                    np.zeros(n, dtype=np.int64), d_max=params.d_max)
    return StaticGraph(stream, adj, params)


@dataclass
class StaticForwardResult:
    """Per-node per-layer features plus the per-event prediction trace."""

    feats: list[np.ndarray]        # one [N, C_out_l] array per layer
    logits: np.ndarray | None      # [N, classes]
    cls: np.ndarray | None         # [N]
    readout: np.ndarray | None     # final flattened readout state


# ---------------------------------------------------------------- FP model

@dataclass
class FPLayer:
    """Float conv layer; weights (C_out, C_in+2), optional batchnorm block."""

    weights: np.ndarray
    bias: np.ndarray
    bn: dict | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1] - 2


@dataclass
class FPModel:
    width: int
    height: int
    layers: list[FPLayer]
    fc_weights: np.ndarray
    fc_bias: np.ndarray
    search: SearchParams = field(default_factory=SearchParams)
    patch: int = 16
    classes: list[str] = field(default_factory=lambda: ["0", "1"])
    empty_aggregation: str = "zero"

    def __post_init__(self):
        self.fc_weights = np.asarray(self.fc_weights, dtype=np.float64)
        self.fc_bias = np.asarray(self.fc_bias, dtype=np.float64)

    @property
    def n_cells_x(self) -> int:
        return -(-self.width // self.patch)

    @property
    def n_cells_y(self) -> int:
        return -(-self.height // self.patch)


def _fp_inputs(stream: EventStream) -> np.ndarray:
    """Polarity to float feature: 0 -> -1.0, 1 -> +1.0."""
    return np.array([1.0 if ev.p else -1.0 for ev in stream.events])


def forward_eq7_fp(graph: StaticGraph, model: FPModel) -> StaticForwardResult:
    n = len(graph)
    adj = graph.adjacency
    x0 = _fp_inputs(graph.stream)
    prev = x0.reshape(n, 1)
    feats: list[np.ndarray] = []
    neg_inf = model.empty_aggregation == "neg_inf"
    for layer in model.layers:
        cur = np.zeros((n, layer.c_out))
        for i in range(n):
            d = int(adj.deg[i])
            if d == 0:
                agg = (np.full(layer.c_out, -np.inf) if neg_inf
                       else np.zeros(layer.c_out))
            else:
                idx = adj.nbr_n[i, :d]
                inp = np.empty((d, layer.c_in + 2))
                inp[:, :layer.c_in] = prev[idx]
                inp[:, layer.c_in] = np.abs(adj.nbr_dx[i, :d])
                inp[:, layer.c_in + 1] = np.abs(adj.nbr_dy[i, :d])
                agg = (inp @ layer.weights.T).max(axis=0)
            cur[i] = np.maximum(agg + layer.bias, 0.0)
        feats.append(cur)
        prev = cur
    # cumulative readout / FC prediction trace
    cells = np.zeros((model.n_cells_y, model.n_cells_x,
                      model.layers[-1].c_out))
    logits = np.zeros((n, len(model.fc_bias)))
    cls = np.zeros(n, dtype=np.int64)
    for i, ev in enumerate(graph.stream.events):
        cell = cells[ev.y // model.patch, ev.x // model.patch]
        np.maximum(cell, feats[-1][i], out=cell)
        logits[i] = model.fc_weights @ cells.reshape(-1) + model.fc_bias
        cls[i] = int(np.argmax(logits[i]))
    return StaticForwardResult(feats, logits, cls, cells.reshape(-1))


def forward_eq7_int8(graph: StaticGraph,
                     model: QuantizedModel) -> StaticForwardResult:
    xs, ys, _, _ = graph.stream.to_arrays()
    adj = graph.adjacency
    packed = model.packed()
    feats, logits, cls, readout = kernels.forward_static_int8(
        adj.deg, adj.nbr_n, adj.nbr_dx, adj.nbr_dy,
        *packed,
        encoded_inputs(graph.stream, model), xs, ys,
        model.patch, model.n_cells_x, model.n_cells_y,
        model.fc.weights, model.fc.bias,
        model.empty_aggregation == "neg_inf")
    per_layer = [feats[:, l, :lp.c_out]
                 for l, lp in enumerate(model.layers)]
    return StaticForwardResult(per_layer, logits, cls, readout)


def forward_gcn_eq5_fp(graph: StaticGraph,
                       weight_mats: list[np.ndarray],
                       x0: np.ndarray | None = None) -> StaticForwardResult:
    """Degree-normalized sum conv: x'_i = W^T sum_{j in N(i) u {i}}
    x_j / sqrt((d_j+1)(d_i+1)), with degree = in-neighbor count."""
    n = len(graph)
    adj = graph.adjacency
    deg = adj.deg.astype(np.float64)
    if x0 is None:
        x0 = _fp_inputs(graph.stream).reshape(n, 1)
    prev = np.asarray(x0, dtype=np.float64)
    feats = []
    for w in weight_mats:
        w = np.asarray(w, dtype=np.float64)
        if w.shape[1] != prev.shape[1]:
            raise IncompatibleModel(
                f"gcn weights expect C_in {w.shape[1]}, got {prev.shape[1]}")
        cur = np.zeros((n, w.shape[0]))
        for i in range(n):
            s = prev[i] / (deg[i] + 1.0)  # self term, d_i == d_j
            for k in range(int(adj.deg[i])):
                j = int(adj.nbr_n[i, k])
                s = s + prev[j] / np.sqrt((deg[j] + 1.0) * (deg[i] + 1.0))
            cur[i] = w @ s
        feats.append(cur)
        prev = cur
    return StaticForwardResult(feats, None, None, None)


def _mlp(x: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    return w2 @ np.maximum(w1 @ x + b1, 0.0) + b2


@dataclass
class PointNetLayer:
    """phi and gamma MLPs, each one hidden layer of width C_out with ReLU."""

    phi_w1: np.ndarray
    phi_b1: np.ndarray
    phi_w2: np.ndarray
    phi_b2: np.ndarray
    gamma_w1: np.ndarray
    gamma_b1: np.ndarray
    gamma_w2: np.ndarray
    gamma_b2: np.ndarray

    @property
    def c_out(self) -> int:
        return self.phi_w2.shape[0]


def forward_pointnet_eq6_fp(graph: StaticGraph,
                            layers: list[PointNetLayer],
                            x0: np.ndarray | None = None
                            ) -> StaticForwardResult:
    """x'_i = gamma(max_{j in N(i) u {i}} phi(x_j, pos_j - pos_i))."""
    n = len(graph)
    adj = graph.adjacency
    if x0 is None:
        x0 = _fp_inputs(graph.stream).reshape(n, 1)
    prev = np.asarray(x0, dtype=np.float64)
    feats = []
    for layer in layers:
        if layer.phi_w1.shape[1] != prev.shape[1] + 2:
            raise IncompatibleModel("pointnet phi expects C_in + 2 inputs")
        cur = np.zeros((n, layer.c_out))
        for i in range(n):
            # self message with zero relative position
            best = _mlp(np.concatenate([prev[i], [0.0, 0.0]]),
                        layer.phi_w1, layer.phi_b1,
                        layer.phi_w2, layer.phi_b2)
            for k in range(int(adj.deg[i])):
                j = int(adj.nbr_n[i, k])
                rel = np.array([-adj.nbr_dx[i, k], -adj.nbr_dy[i, k]],
                               dtype=np.float64)  # pos_j - pos_i
                m = _mlp(np.concatenate([prev[j], rel]),
                         layer.phi_w1, layer.phi_b1,
                         layer.phi_w2, layer.phi_b2)
                best = np.maximum(best, m)
            cur[i] = _mlp(best, layer.gamma_w1, layer.gamma_b1,
                          layer.gamma_w2, layer.gamma_b2)
        feats.append(cur)
        prev = cur
    return StaticForwardResult(feats, None, None, None)


def forward_static(graph: StaticGraph, model, conv_type: str
                   ) -> StaticForwardResult:
    if conv_type == "eq7_int8":
        if not isinstance(model, QuantizedModel):
            raise IncompatibleModel("eq7_int8 needs a QuantizedModel")
        return forward_eq7_int8(graph, model)
    if conv_type == "eq7_fp":
        if not isinstance(model, FPModel):
            raise IncompatibleModel("eq7_fp needs an FPModel")
        return forward_eq7_fp(graph, model)
    if conv_type == "gcn_eq5_fp":
        return forward_gcn_eq5_fp(graph, model)
    if conv_type == "pointnet_eq6_fp":
        return forward_pointnet_eq6_fp(graph, model)
    raise IncompatibleModel(f"unknown conv_type {conv_type!r}")


# ----------------------------------------------- generic message passing

@dataclass
class GenericConvSpec:
    """Eq-style pluggable conv: x'_i = gamma(x_i, agg_j phi(x_i, x_j, rel))."""

    phi: Callable[[np.ndarray, np.ndarray, tuple[int, int, int]], np.ndarray]
    aggregator: str  # sum | mean | max
    gamma: Callable[[np.ndarray, np.ndarray], np.ndarray]
    out_dim: int
    include_self: bool = False
    empty_aggregation: str = "zero"  # zero | neg_inf (max only)


def message_passing_generic(graph: StaticGraph, spec: GenericConvSpec,
                            features: np.ndarray) -> np.ndarray:
    if spec.aggregator not in ("sum", "mean", "max"):
        raise ValueError(f"unknown aggregator {spec.aggregator!r}")
    n = len(graph)
    adj = graph.adjacency
    features = np.asarray(features, dtype=np.float64)
    out = []
    for i in range(n):
        msgs = []
        if spec.include_self:
            msgs.append(np.asarray(
                spec.phi(features[i], features[i], (0, 0, 0)),
                dtype=np.float64))
        for k in range(int(adj.deg[i])):
            j = int(adj.nbr_n[i, k])
            rel = (int(adj.nbr_dx[i, k]), int(adj.nbr_dy[i, k]),
                   int(adj.nbr_dt[i, k]))
            msgs.append(np.asarray(spec.phi(features[i], features[j], rel),
                                   dtype=np.float64))
        if not msgs:
            if spec.aggregator == "max" and spec.empty_aggregation == "neg_inf":
                agg = np.full(spec.out_dim, -np.inf)
            else:
                agg = np.zeros(spec.out_dim)
        elif spec.aggregator == "sum":
            agg = np.sum(msgs, axis=0)
        elif spec.aggregator == "mean":
            agg = np.mean(msgs, axis=0)
        else:
            agg = np.max(msgs, axis=0)
        out.append(np.asarray(spec.gamma(features[i], agg), dtype=np.float64))
    return np.stack(out)


def trace_lines(result: StaticForwardResult) -> list[str]:
    lines = []
    for i in range(len(result.cls)):
        vals = " ".join(str(v) for v in np.asarray(result.logits[i]).tolist())
        lines.append(f"{i} {int(result.cls[i])} {vals}")
    return lines
