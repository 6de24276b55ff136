"""Event-driven integer GNN inference.

Two granularities are provided:

    - process_event / process_event_layer_sequential: one event at a time
      against explicit EngineState, built from the per-op primitives below
      (message_matvec, aggregate_max, baq, readout_update, fc_forward).
    - run_stream: whole-stream execution through the compiled kernels,
      bit-identical to the per-event path.

All arithmetic is integer-only; requantization rounds to nearest even.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .event_io import Event, EventStream
from .graph_builder import (Adjacency, EventQueueGrid, Neighbor,
                            new_queue_grid, search_neighbors)
from .model import QuantizedModel

ACC_LIMIT = 2**31  # accumulators must stay in 32-bit signed range


class AccOverflow(ArithmeticError):
    pass


class LengthMismatch(ValueError):
    pass


class DimMismatch(ValueError):
    pass


class StoreError(RuntimeError):
    """Write-once violation or read of an unwritten feature slot."""


def rne_mulshift(v: int, mult: int, shift: int) -> int:
    """Round-to-nearest-even of (v * mult) / 2**shift for v >= 0."""
    prod = int(v) * int(mult)
    if shift == 0:
        return prod
    q = prod >> shift
    rem = prod & ((1 << shift) - 1)
    half = 1 << (shift - 1)
    if rem > half or (rem == half and q & 1):
        q += 1
    return q


def encode_input(p: int, encoding: dict[int, int] | None = None) -> int:
    """Polarity bit to INT8 input feature; default map {0:-127, 1:+127}."""
    if encoding is None:
        encoding = {0: -127, 1: 127}
    return encoding[p]


def quantize_position(offset: int, pos_requant: tuple[int, int]) -> int:
    """Non-negative pixel offset into the layer's input activation scale."""
    return min(rne_mulshift(abs(int(offset)), *pos_requant), 32767)


def message_matvec(layer, x_j: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """acc[c] = sum_k weights[c][k] * (x_j, q_pos|dx|, q_pos|dy|)[k]."""
    x_j = np.asarray(x_j, dtype=np.int64)
    if x_j.shape != (layer.c_in,):
        raise DimMismatch(f"input length {x_j.shape} != ({layer.c_in},)")
    qdx = quantize_position(dx, layer.pos_requant)
    qdy = quantize_position(dy, layer.pos_requant)
    inp = np.concatenate([x_j, np.array([qdx, qdy], dtype=np.int64)])
    acc = layer.weights @ inp
    if np.any(np.abs(acc) >= ACC_LIMIT):
        raise AccOverflow("accumulator escaped 32-bit range")
    return acc


def aggregate_max(messages, width: int,
                  empty_aggregation: str = "zero") -> np.ndarray:
    """Elementwise max over messages; empty input yields the identity."""
    messages = list(messages)
    if not messages:
        if empty_aggregation == "zero":
            return np.zeros(width, dtype=np.int64)
        return np.full(width, kernels.NEG_IDENTITY, dtype=np.int64)
    out = np.asarray(messages[0], dtype=np.int64).copy()
    for m in messages[1:]:
        m = np.asarray(m, dtype=np.int64)
        if m.shape != out.shape:
            raise LengthMismatch("aggregated vectors differ in length")
        np.maximum(out, m, out=out)
    return out


def baq(acc: np.ndarray, layer) -> np.ndarray:
    """Bias add, ReLU, requantize (RNE), clamp to [0, 127]."""
    mult, shift = layer.requant
    v = np.maximum(np.asarray(acc, dtype=np.int64) + layer.bias, 0)
    out = np.array([rne_mulshift(int(x), mult, shift) for x in v],
                   dtype=np.int64)
    return np.minimum(out, 127)


@dataclass
class Prediction:
    logits: np.ndarray  # int32-range, len num_classes
    cls: int

    @staticmethod
    def from_logits(logits: np.ndarray) -> "Prediction":
        return Prediction(np.asarray(logits, dtype=np.int64),
                          int(np.argmax(logits)))  # argmax ties -> lowest


class FeatureStore:
    """Per-event, per-layer INT8 feature vectors (DRAM stand-in).

    Slot (n, l) is write-once; reading an unwritten slot is an error.
    Layer 0 is the encoded input polarity (length 1).
    """

    def __init__(self, num_events: int, layer_dims: list[int]):
        self.layer_dims = [1] + list(layer_dims)
        self._data = [np.zeros((num_events, d), dtype=np.int64)
                      for d in self.layer_dims]
        self._written = np.zeros((num_events, len(self.layer_dims)),
                                 dtype=bool)

    @property
    def num_events(self) -> int:
        return self._written.shape[0]

    @property
    def num_levels(self) -> int:
        return len(self.layer_dims)

    def write(self, n: int, l: int, feat: np.ndarray) -> None:
        if self._written[n, l]:
            raise StoreError(f"slot ({n},{l}) already written")
        feat = np.asarray(feat, dtype=np.int64)
        if feat.shape != (self.layer_dims[l],):
            raise StoreError(f"feature length mismatch at ({n},{l})")
        self._data[l][n] = feat
        self._written[n, l] = True

    def read(self, n: int, l: int) -> np.ndarray:
        if not self._written[n, l]:
            raise StoreError(f"slot ({n},{l}) not yet written")
        return self._data[l][n]

    def dump(self) -> bytes:
        """Debug dump: (n:u32, l:u8, len:u16, payload int8*len), LE."""
        chunks = []
        for n in range(self.num_events):
            for l in range(self.num_levels):
                if not self._written[n, l]:
                    continue
                payload = self._data[l][n].astype(np.int8).tobytes()
                chunks.append(struct.pack("<IBH", n, l, len(payload)))
                chunks.append(payload)
        return b"".join(chunks)


class ReadoutState:
    """Grid of per-patch elementwise-max cells over final-layer features."""

    def __init__(self, model: QuantizedModel):
        self.patch = model.patch
        self.n_cells_x = model.n_cells_x
        self.n_cells_y = model.n_cells_y
        self.c_last = model.c_last
        self.cells = np.zeros((self.n_cells_y, self.n_cells_x, self.c_last),
                              dtype=np.int64)
        self._width = model.width
        self._height = model.height

    def update(self, x: int, y: int, feat: np.ndarray) -> None:
        if not (0 <= x < self._width and 0 <= y < self._height):
            raise DimMismatch(f"({x},{y}) outside sensor")
        feat = np.asarray(feat, dtype=np.int64)
        if feat.shape != (self.c_last,):
            raise DimMismatch("readout feature length mismatch")
        cell = self.cells[y // self.patch, x // self.patch]
        np.maximum(cell, feat, out=cell)

    def flatten(self) -> np.ndarray:
        """Row-major by (gy, gx), channels contiguous per cell."""
        return self.cells.reshape(-1)


def readout_update(readout: ReadoutState, x: int, y: int,
                   feat: np.ndarray) -> None:
    readout.update(x, y, feat)


def fc_forward(readout: ReadoutState, fc) -> Prediction:
    flat = readout.flatten()
    if flat.shape != (fc.in_dim,):
        raise DimMismatch(f"readout size {flat.shape} != fc in_dim")
    return Prediction.from_logits(fc.weights @ flat + fc.bias)


@dataclass
class EngineState:
    grid: EventQueueGrid
    store: FeatureStore
    readout: ReadoutState
    next_n: int = 0

    @staticmethod
    def new(model: QuantizedModel, num_events: int) -> "EngineState":
        grid = new_queue_grid(model.width, model.height,
                              model.search.queue_depth)
        store = FeatureStore(num_events, [l.c_out for l in model.layers])
        return EngineState(grid, store, ReadoutState(model))


def _finish_event(state: EngineState, model: QuantizedModel, ev: Event,
                  outs: list[np.ndarray]) -> Prediction:
    state.store.write(ev.n, 0,
                      np.array([model.encode_input(ev.p)], dtype=np.int64))
    for l, out in enumerate(outs, start=1):
        state.store.write(ev.n, l, out)
    state.readout.update(ev.x, ev.y, outs[-1])
    pred = fc_forward(state.readout, model.fc)
    state.grid.push_event(ev)
    state.next_n = ev.n + 1
    return pred


def _layer_output(model: QuantizedModel, layer, level: int,
                  neighbors: list[Neighbor],
                  store: FeatureStore) -> np.ndarray:
    msgs = [message_matvec(layer, store.read(nb.n, level), nb.dx, nb.dy)
            for nb in neighbors]
    agg = aggregate_max(msgs, layer.c_out, model.empty_aggregation)
    return baq(agg, layer)


def process_event(state: EngineState, model: QuantizedModel,
                  ev: Event) -> Prediction:
    """Layer-parallel schedule: one NeighborSet feeds every layer.

    All layers read only stored (past) features, so the per-layer outputs
    are computed independently from the same neighbor list.
    """
    if ev.n != state.next_n:
        raise StoreError(f"events must arrive in stream order (got {ev.n})")
    neighbors = search_neighbors(state.grid, ev, model.search)
    # gather every layer's neighbor inputs first, then compute all layers
    gathered = [
        [(state.store.read(nb.n, level), nb.dx, nb.dy) for nb in neighbors]
        for level in range(len(model.layers))
    ]
    outs = []
    for level, layer in enumerate(model.layers):
        msgs = [message_matvec(layer, x_j, dx, dy)
                for x_j, dx, dy in gathered[level]]
        agg = aggregate_max(msgs, layer.c_out, model.empty_aggregation)
        outs.append(baq(agg, layer))
    return _finish_event(state, model, ev, outs)


def process_event_layer_sequential(state: EngineState, model: QuantizedModel,
                                   ev: Event) -> Prediction:
    """Reference schedule: layers executed one after another."""
    if ev.n != state.next_n:
        raise StoreError(f"events must arrive in stream order (got {ev.n})")
    neighbors = search_neighbors(state.grid, ev, model.search)
    outs = []
    for level, layer in enumerate(model.layers):
        outs.append(_layer_output(model, layer, level, neighbors,
                                  state.store))
    return _finish_event(state, model, ev, outs)


@dataclass
class RunResult:
    """Whole-stream outputs from the batch kernels."""

    adjacency: Adjacency
    feats: np.ndarray    # int64[N, L, max_cout]; valid channels per layer
    logits: np.ndarray   # int64[N, classes]
    cls: np.ndarray      # int64[N]
    readout: np.ndarray  # flattened final readout state
    macs: np.ndarray     # conv MACs actually executed per event

    def feature(self, feats_layer_dims: list[int], n: int,
                l: int) -> np.ndarray:
        """Valid channels of the layer-l (1-based) feature of event n."""
        return self.feats[n, l - 1, :feats_layer_dims[l - 1]]


def build_adjacency(stream: EventStream,
                    model_or_params) -> Adjacency:
    """Replay the queue grid over a stream with the compiled kernel."""
    params = getattr(model_or_params, "search", model_or_params)
    if params.shape not in ("prism", "cylinder"):
        raise ValueError("kernel replay supports prism/cylinder only")
    xs, ys, ts, _ = stream.to_arrays()
    deg, nbr_n, nbr_dx, nbr_dy, nbr_dt, scanned = kernels.replay_build(
        xs, ys, ts, stream.width, stream.height, params.queue_depth,
        params.r_s, params.r_t, params.d_max, params.shape == "cylinder")
    return Adjacency(deg, nbr_n, nbr_dx, nbr_dy, nbr_dt, scanned,
                     d_max=params.d_max)


def encoded_inputs(stream: EventStream, model: QuantizedModel) -> np.ndarray:
    ps = np.array([ev.p for ev in stream.events], dtype=np.int64)
    feats0 = np.empty(len(ps), dtype=np.int64)
    for p, v in model.input_encoding.items():
        feats0[ps == p] = v
    return feats0


def run_stream(model: QuantizedModel, stream: EventStream,
               sequential: bool = False,
               adjacency: Adjacency | None = None) -> RunResult:
    """Process a whole stream through the batch kernels."""
    if stream.width != model.width or stream.height != model.height:
        raise DimMismatch("stream geometry != model sensor geometry")
    adj = adjacency if adjacency is not None else build_adjacency(stream, model)
    xs, ys, _, _ = stream.to_arrays()
    packed = model.packed()
    feats, logits, cls, readout, macs = kernels.forward_stream(
        adj.deg, adj.nbr_n, adj.nbr_dx, adj.nbr_dy,
        *packed,
        encoded_inputs(stream, model), xs, ys,
        model.patch, model.n_cells_x, model.n_cells_y,
        model.fc.weights, model.fc.bias,
        model.empty_aggregation == "neg_inf", sequential)
    return RunResult(adj, feats, logits, cls, readout, macs)


def prediction_trace_lines(model: QuantizedModel, result: RunResult) -> list[str]:
    """UTF-8 trace: one "n class logit0 logit1 ..." line per event."""
    lines = []
    for i in range(len(result.cls)):
        vals = " ".join(str(int(v)) for v in result.logits[i])
        lines.append(f"{i} {int(result.cls[i])} {vals}")
    return lines


@dataclass
class OpCount:
    per_event: np.ndarray
    total: int
    mean: float
    percentiles: dict[int, float]
    mflops_per_event: float


def count_ops(model: QuantizedModel, neighbor_counts: np.ndarray) -> OpCount:
    """Arithmetic ops per event (1 MAC = 2 OPs) from per-event degrees.

    conv: 2*(C_in+2)*C_out*deg MACs-as-ops plus 2*C_out BAQ ops per layer;
    readout: C_last max-compares; FC: 2*(Gx*Gy*C_last)*num_classes.
    """
    deg = np.asarray(neighbor_counts, dtype=np.int64)
    per_nbr = sum(2 * (l.c_in + 2) * l.c_out for l in model.layers)
    baq_ops = sum(2 * l.c_out for l in model.layers)
    fixed = baq_ops + model.c_last + 2 * model.fc.in_dim * model.fc.out_dim
    per_event = per_nbr * deg + fixed
    mean = float(per_event.mean()) if len(per_event) else 0.0
    pct = {p: float(np.percentile(per_event, p)) if len(per_event) else 0.0
           for p in (50, 90, 99)}
    return OpCount(per_event=per_event, total=int(per_event.sum()),
                   mean=mean, percentiles=pct,
                   mflops_per_event=mean / 1e6)
