"""Hot numeric kernels: full-stream graph replay and integer GNN forward.

Every kernel is written in nopython-compatible numpy and compiled with
numba @njit when available. Setting the environment variable
EVGNN_NO_NUMBA=1 before import selects the pure-Python fallback path
(identical code, uncompiled); see benchmarks/benchmark_kernels.py for a
side-by-side throughput comparison.

Integer conventions:
    - features and weights are INT8 values carried in int64 arrays,
    - accumulators are 32-bit range (guarded by dimension limits),
    - requantization is multiply / right-shift with round-to-nearest-even,
    - all arithmetic is exact; no floating point on the inference path.
"""

from __future__ import annotations

import os

import numpy as np

USE_NUMBA = os.environ.get("EVGNN_NO_NUMBA", "0").lower() not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

if USE_NUMBA:
    def _jit(fn):
        return njit(cache=True)(fn)
else:
    def _jit(fn):
        return fn


@_jit
def _rne_mulshift(v, mult, shift):
    """Round-to-nearest-even of (v * mult) / 2**shift, v >= 0."""
    prod = v * mult
    if shift == 0:
        return prod
    q = prod >> shift
    rem = prod & ((np.int64(1) << shift) - 1)
    half = np.int64(1) << (shift - 1)
    if rem > half or (rem == half and (q & 1) == 1):
        q += 1
    return q


@_jit
def _baq_scalar(acc, bias, mult, shift):
    """Bias add, ReLU, requantize, clamp to [0, 127]."""
    v = acc + bias
    if v < 0:
        v = np.int64(0)
    q = _rne_mulshift(v, mult, shift)
    if q > 127:
        q = np.int64(127)
    return q


@_jit
def _qpos(offset, mult, shift):
    """Requantize a non-negative pixel offset into the input feature scale.

    Output is wider than INT8 (the positional column is not clamped to the
    activation range); capped at 2**15-1 to bound the accumulator.
    """
    q = _rne_mulshift(offset, mult, shift)
    if q > 32767:
        q = np.int64(32767)
    return q


@_jit
def replay_build(xs, ys, ts, width, height, depth, r_s, r_t, d_max, use_l2):
    """Replay search-then-push over a whole stream (prism or cylinder).

    Returns (deg, nbr_n, nbr_dx, nbr_dy, nbr_dt, entries_scanned), where the
    nbr_* arrays are [N, d_max] in canonical scan order and entries_scanned
    counts queue entries inspected up to the d_max early stop.
    """
    n_ev = xs.shape[0]
    nq = width * height
    q_t = np.zeros((nq, depth), dtype=np.int64)
    q_n = np.zeros((nq, depth), dtype=np.int64)
    q_cnt = np.zeros(nq, dtype=np.int64)
    q_head = np.full(nq, depth - 1, dtype=np.int64)

    deg = np.zeros(n_ev, dtype=np.int64)
    scanned = np.zeros(n_ev, dtype=np.int64)
    nbr_n = np.zeros((n_ev, d_max), dtype=np.int64)
    nbr_dx = np.zeros((n_ev, d_max), dtype=np.int64)
    nbr_dy = np.zeros((n_ev, d_max), dtype=np.int64)
    nbr_dt = np.zeros((n_ev, d_max), dtype=np.int64)

    for i in range(n_ev):
        x = xs[i]
        y = ys[i]
        t = ts[i]
        cnt = 0
        sc = 0
        full = False
        for dy in range(-r_s, r_s + 1):
            if full:
                break
            yj = y - dy
            if yj < 0 or yj >= height:
                continue
            for dx in range(-r_s, r_s + 1):
                if full:
                    break
                if use_l2:
                    if dx * dx + dy * dy > r_s * r_s:
                        continue
                else:
                    if abs(dx) + abs(dy) > r_s:
                        continue
                xj = x - dx
                if xj < 0 or xj >= width:
                    continue
                qi = yj * width + xj
                head = q_head[qi]
                for k in range(q_cnt[qi]):
                    slot = (head - k) % depth
                    sc += 1
                    dt = t - q_t[qi, slot]
                    if dt >= 0 and dt <= r_t:
                        nbr_n[i, cnt] = q_n[qi, slot]
                        nbr_dx[i, cnt] = dx
                        nbr_dy[i, cnt] = dy
                        nbr_dt[i, cnt] = dt
                        cnt += 1
                        if cnt == d_max:
                            full = True
                            break
        deg[i] = cnt
        scanned[i] = sc
        # search-then-push: the new event enters its queue only now
        qi = y * width + x
        slot = (q_head[qi] + 1) % depth
        q_t[qi, slot] = t
        q_n[qi, slot] = i
        q_head[qi] = slot
        if q_cnt[qi] < depth:
            q_cnt[qi] += 1
    return deg, nbr_n, nbr_dx, nbr_dy, nbr_dt, scanned


NEG_IDENTITY = np.int64(-(2**62))  # "-inf" empty-aggregation identity


@_jit
def _readout_fc(readout_flat, feats_last, gx, gy, n_cells_x, c_last,
                fc_w, fc_b, logits_row):
    """Max-update one readout cell, then dense logits over the flat readout."""
    base = (gy * n_cells_x + gx) * c_last
    for c in range(c_last):
        v = feats_last[c]
        if v > readout_flat[base + c]:
            readout_flat[base + c] = v
    n_classes = fc_w.shape[0]
    flat_len = readout_flat.shape[0]
    best = 0
    for cc in range(n_classes):
        s = fc_b[cc]
        for k in range(flat_len):
            s += fc_w[cc, k] * readout_flat[k]
        logits_row[cc] = s
        if logits_row[cc] > logits_row[best]:
            best = cc
    return best


@_jit
def forward_stream(deg, nbr_n, nbr_dx, nbr_dy,
                   weights, c_in, c_out, bias, mult, shift, pos_mult, pos_shift,
                   feats0, xs, ys, patch, n_cells_x, n_cells_y,
                   fc_w, fc_b, neg_identity, sequential):
    """Event-driven forward over a whole stream.

    weights is packed [L, max_cout, max_cin + 2]; per-layer dims come from
    c_in / c_out. feats0 holds the encoded input polarity per event.
    sequential selects layer-outer scheduling; otherwise all layers are
    computed from the same neighbor pass (layer-parallel). Both schedules
    are bit-identical by construction of the causal feature store.

    Returns (feats[N, L, max_cout], logits[N, classes], cls[N],
             readout_flat, macs[N]).
    """
    n_ev = deg.shape[0]
    n_layers = c_in.shape[0]
    max_cout = weights.shape[1]
    c_last = c_out[n_layers - 1]
    n_classes = fc_w.shape[0]

    feats = np.zeros((n_ev, n_layers, max_cout), dtype=np.int64)
    logits = np.zeros((n_ev, n_classes), dtype=np.int64)
    cls = np.zeros(n_ev, dtype=np.int64)
    macs = np.zeros(n_ev, dtype=np.int64)
    readout_flat = np.zeros(n_cells_x * n_cells_y * c_last, dtype=np.int64)

    acc = np.zeros((n_layers, max_cout), dtype=np.int64)

    for i in range(n_ev):
        d = deg[i]
        # running max starts at -inf; the configured identity applies only
        # to empty neighborhoods (applied after the neighbor loop)
        for l in range(n_layers):
            for c in range(c_out[l]):
                acc[l, c] = NEG_IDENTITY

        if sequential:
            # layer-outer: finish layer l over all neighbors, then move on
            for l in range(n_layers):
                for k in range(d):
                    j = nbr_n[i, k]
                    qdx = _qpos(abs(nbr_dx[i, k]), pos_mult[l], pos_shift[l])
                    qdy = _qpos(abs(nbr_dy[i, k]), pos_mult[l], pos_shift[l])
                    ci = c_in[l]
                    for c in range(c_out[l]):
                        s = np.int64(0)
                        if l == 0:
                            s += weights[l, c, 0] * feats0[j]
                        else:
                            for m in range(ci):
                                s += weights[l, c, m] * feats[j, l - 1, m]
                        s += weights[l, c, ci] * qdx
                        s += weights[l, c, ci + 1] * qdy
                        if s > acc[l, c]:
                            acc[l, c] = s
                    macs[i] += (ci + 2) * c_out[l]
        else:
            # layer-parallel: one pass over neighbors feeds all layers
            for k in range(d):
                j = nbr_n[i, k]
                adx = abs(nbr_dx[i, k])
                ady = abs(nbr_dy[i, k])
                for l in range(n_layers):
                    qdx = _qpos(adx, pos_mult[l], pos_shift[l])
                    qdy = _qpos(ady, pos_mult[l], pos_shift[l])
                    ci = c_in[l]
                    for c in range(c_out[l]):
                        s = np.int64(0)
                        if l == 0:
                            s += weights[l, c, 0] * feats0[j]
                        else:
                            for m in range(ci):
                                s += weights[l, c, m] * feats[j, l - 1, m]
                        s += weights[l, c, ci] * qdx
                        s += weights[l, c, ci + 1] * qdy
                        if s > acc[l, c]:
                            acc[l, c] = s
                    macs[i] += (ci + 2) * c_out[l]

        for l in range(n_layers):
            for c in range(c_out[l]):
                a = acc[l, c]
                if d == 0 and not neg_identity:
                    a = np.int64(0)
                feats[i, l, c] = _baq_scalar(a, bias[l, c],
                                             mult[l], shift[l])

        gx = xs[i] // patch
        gy = ys[i] // patch
        cls[i] = _readout_fc(readout_flat, feats[i, n_layers - 1],
                             gx, gy, n_cells_x, c_last, fc_w, fc_b, logits[i])
    return feats, logits, cls, readout_flat, macs


@_jit
def forward_static_int8(deg, nbr_n, nbr_dx, nbr_dy,
                        weights, c_in, c_out, bias, mult, shift,
                        pos_mult, pos_shift,
                        feats0, xs, ys, patch, n_cells_x, n_cells_y,
                        fc_w, fc_b, neg_identity):
    """Whole-graph layer-sequential forward (static schedule).

    Layer l is completed for *all* nodes before layer l+1 starts; the
    readout / FC prediction trace is then replayed cumulatively per event.
    Must be bit-identical to forward_stream on causal adjacency.
    """
    n_ev = deg.shape[0]
    n_layers = c_in.shape[0]
    max_cout = weights.shape[1]
    c_last = c_out[n_layers - 1]
    n_classes = fc_w.shape[0]

    feats = np.zeros((n_ev, n_layers, max_cout), dtype=np.int64)

    for l in range(n_layers):
        ci = c_in[l]
        for i in range(n_ev):
            for c in range(c_out[l]):
                a = NEG_IDENTITY
                for k in range(deg[i]):
                    j = nbr_n[i, k]
                    qdx = _qpos(abs(nbr_dx[i, k]), pos_mult[l], pos_shift[l])
                    qdy = _qpos(abs(nbr_dy[i, k]), pos_mult[l], pos_shift[l])
                    s = np.int64(0)
                    if l == 0:
                        s += weights[l, c, 0] * feats0[j]
                    else:
                        for m in range(ci):
                            s += weights[l, c, m] * feats[j, l - 1, m]
                    s += weights[l, c, ci] * qdx
                    s += weights[l, c, ci + 1] * qdy
                    if s > a:
                        a = s
                if deg[i] == 0 and not neg_identity:
                    a = np.int64(0)
                feats[i, l, c] = _baq_scalar(a, bias[l, c], mult[l], shift[l])

    logits = np.zeros((n_ev, n_classes), dtype=np.int64)
    cls = np.zeros(n_ev, dtype=np.int64)
    readout_flat = np.zeros(n_cells_x * n_cells_y * c_last, dtype=np.int64)
    for i in range(n_ev):
        gx = xs[i] // patch
        gy = ys[i] // patch
        cls[i] = _readout_fc(readout_flat, feats[i, n_layers - 1],
                             gx, gy, n_cells_x, c_last, fc_w, fc_b, logits[i])
    return feats, logits, cls, readout_flat
