"""Batchnorm folding and post-training FP -> INT8 quantization.

Weight quantization is symmetric per-tensor (scale = max|w| / 127);
activation scales come from per-layer max-abs over a calibration forward
pass on the float reference path. Each requantizer (M, shift) approximates
its real scale with relative error <= 2^-24; positions are mapped into the
input activation scale the same way.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .event_io import EventStream
from .graph_builder import SearchParams
from .model import DenseParams, LayerParams, ModelConfigError, QuantizedModel
from .static_oracle import (FPLayer, FPModel, build_static_graph,
                            forward_eq7_fp)


class DegenerateVariance(ValueError):
    pass


class EmptyCalibration(ValueError):
    pass


def fold_batchnorm(weights: np.ndarray, bias: np.ndarray,
                   gamma, beta, mean, var, eps: float
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Absorb a per-channel batchnorm into the preceding linear layer.

    W' = W * g, b' = (b - mean) * g + beta with g = gamma / sqrt(var + eps),
    so that the folded layer equals BN(conv(x)) exactly in real arithmetic.
    """
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    denom = var + eps
    if np.any(denom <= 0):
        raise DegenerateVariance("var + eps must be positive per channel")
    g = gamma / np.sqrt(denom)
    return weights * g[:, None], (bias - mean) * g + beta


def fold_model(model: FPModel) -> FPModel:
    """Return a copy with every layer's batchnorm block folded away."""
    layers = []
    for layer in model.layers:
        if layer.bn is None:
            layers.append(FPLayer(layer.weights.copy(), layer.bias.copy()))
            continue
        bn = layer.bn
        w, b = fold_batchnorm(layer.weights, layer.bias,
                              bn["gamma"], bn["beta"], bn["mean"],
                              bn["var"], float(bn.get("eps", 1e-5)))
        layers.append(FPLayer(w, b))
    return FPModel(model.width, model.height, layers,
                   model.fc_weights.copy(), model.fc_bias.copy(),
                   model.search, model.patch, list(model.classes),
                   model.empty_aggregation)


def choose_requant(scale: float) -> tuple[int, int]:
    """31-bit multiplier and right shift with M * 2^-shift ~ scale.

    Relative error is <= 2^-30 for scale > 0; scale 0 maps to (0, 0).
    """
    if scale <= 0.0:
        return 0, 0
    m, e = math.frexp(scale)          # scale = m * 2^e, m in [0.5, 1)
    mult = round(m * (1 << 31))
    shift = 31 - e
    if mult == 1 << 31:
        mult >>= 1
        shift -= 1
    if shift < 0:
        raise ModelConfigError(f"requant scale {scale} too large")
    return mult, shift


@dataclass
class QuantizationReport:
    weight_scales: list[float]
    activation_scales: list[float]
    fc_weight_scale: float


def _weight_scale(w: np.ndarray) -> float:
    m = float(np.abs(w).max()) if w.size else 0.0
    return m / 127.0 if m > 0 else 1.0


def quantize_model(model_fp: FPModel, calib: EventStream
                   ) -> tuple[QuantizedModel, QuantizationReport]:
    """Quantize a BN-folded float model using a calibration stream.

    Input features are the encoded polarity (+-127 representing +-1.0, so
    the layer-1 input scale is 1/127); every subsequent input scale is the
    previous layer's output scale.
    """
    if len(calib) == 0:
        raise EmptyCalibration("calibration stream has no events")
    if any(l.bn is not None for l in model_fp.layers):
        model_fp = fold_model(model_fp)

    graph = build_static_graph(calib, model_fp.search)
    ref = forward_eq7_fp(graph, model_fp)

    act_scales = []
    for feat in ref.feats:
        m = float(np.abs(feat).max()) if feat.size else 0.0
        act_scales.append(m / 127.0 if m > 0 else 1.0)

    layers = []
    w_scales = []
    s_in = 1.0 / 127.0
    for layer, s_out in zip(model_fp.layers, act_scales):
        s_w = _weight_scale(layer.weights)
        w_scales.append(s_w)
        q_w = np.clip(np.round(layer.weights / s_w), -127, 127).astype(np.int64)
        # bias lives in the accumulator scale s_in * s_w
        q_b = np.round(layer.bias / (s_in * s_w)).astype(np.int64)
        layers.append(LayerParams(
            c_in=layer.c_in, c_out=layer.c_out,
            weights=q_w, bias=q_b,
            requant=choose_requant(s_in * s_w / s_out),
            pos_requant=choose_requant(1.0 / s_in),
            s_in=s_in))
        s_in = s_out

    s_last = act_scales[-1]
    s_wfc = _weight_scale(model_fp.fc_weights)
    q_fcw = np.clip(np.round(model_fp.fc_weights / s_wfc),
                    -127, 127).astype(np.int64)
    q_fcb = np.round(model_fp.fc_bias / (s_last * s_wfc)).astype(np.int64)
    fc = DenseParams(in_dim=model_fp.fc_weights.shape[1],
                     out_dim=model_fp.fc_weights.shape[0],
                     weights=q_fcw, bias=q_fcb)

    qm = QuantizedModel(
        width=model_fp.width, height=model_fp.height,
        layers=layers, fc=fc, search=model_fp.search,
        patch=model_fp.patch, classes=list(model_fp.classes),
        empty_aggregation=model_fp.empty_aggregation)
    return qm, QuantizationReport(w_scales, act_scales, s_wfc)


# ------------------------------------------------------- FP model on disk

def fp_model_to_json(model: FPModel) -> dict:
    def layer_doc(l: FPLayer) -> dict:
        doc = {"C_in": l.c_in, "C_out": l.c_out,
               "weights": l.weights.reshape(-1).tolist(),
               "bias": l.bias.tolist()}
        if l.bn is not None:
            doc["bn"] = {k: (np.asarray(v).tolist()
                             if not np.isscalar(v) else v)
                         for k, v in l.bn.items()}
        return doc

    return {
        "version": 1,
        "precision": "fp32",
        "sensor": {"W": model.width, "H": model.height},
        "search": {"shape": model.search.shape, "r_s": model.search.r_s,
                   "r_t": model.search.r_t, "D_max": model.search.d_max,
                   "queue_depth": model.search.queue_depth},
        "empty_aggregation": model.empty_aggregation,
        "layers": [layer_doc(l) for l in model.layers],
        "fc": {"in_dim": model.fc_weights.shape[1],
               "out_dim": model.fc_weights.shape[0],
               "weights": model.fc_weights.reshape(-1).tolist(),
               "bias": model.fc_bias.tolist()},
        "grid": {"patch": model.patch},
        "classes": list(model.classes),
    }


def fp_model_from_json(doc: dict) -> FPModel:
    try:
        layers = []
        for ld in doc["layers"]:
            co, ci = int(ld["C_out"]), int(ld["C_in"])
            bn = None
            if "bn" in ld:
                bn = {k: np.asarray(v, dtype=np.float64) if k != "eps" else v
                      for k, v in ld["bn"].items()}
            layers.append(FPLayer(
                np.asarray(ld["weights"],
                           dtype=np.float64).reshape(co, ci + 2),
                np.asarray(ld["bias"], dtype=np.float64), bn))
        fd = doc["fc"]
        sd = doc.get("search", {})
        return FPModel(
            width=int(doc["sensor"]["W"]), height=int(doc["sensor"]["H"]),
            layers=layers,
            fc_weights=np.asarray(fd["weights"], dtype=np.float64).reshape(
                int(fd["out_dim"]), int(fd["in_dim"])),
            fc_bias=np.asarray(fd["bias"], dtype=np.float64),
            search=SearchParams(shape=sd.get("shape", "prism"),
                                r_s=int(sd.get("r_s", 3)),
                                r_t=int(sd.get("r_t", 50_000)),
                                d_max=int(sd.get("D_max", 16)),
                                queue_depth=int(sd.get("queue_depth", 16))),
            patch=int(doc.get("grid", {}).get("patch", 16)),
            classes=[str(c) for c in doc.get("classes", ["0", "1"])],
            empty_aggregation=doc.get("empty_aggregation", "zero"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelConfigError(f"bad FP model config: {exc}") from None


def save_fp_model(model: FPModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(fp_model_to_json(model), fh)
        fh.write("\n")


def load_fp_model(path: str) -> FPModel:
    with open(path, encoding="utf-8") as fh:
        return fp_model_from_json(json.load(fh))


def random_fp_model(seed: int, width: int = 64, height: int = 48,
                    layer_dims: tuple[int, ...] = (8, 12, 12, 8),
                    n_classes: int = 2, patch: int = 16,
                    search: SearchParams | None = None,
                    with_bn: bool = False) -> FPModel:
    """Random float model with fan-in scaled weights (test/demo stimulus)."""
    rng = np.random.default_rng(seed)
    layers = []
    dims = (1,) + tuple(layer_dims)
    for ci, co in zip(dims, dims[1:]):
        w = rng.normal(0.0, 1.0 / math.sqrt(ci + 2), size=(co, ci + 2))
        b = rng.normal(0.0, 0.1, size=co)
        bn = None
        if with_bn:
            bn = {"gamma": rng.uniform(0.5, 1.5, size=co),
                  "beta": rng.normal(0.0, 0.1, size=co),
                  "mean": rng.normal(0.0, 0.2, size=co),
                  "var": rng.uniform(0.5, 2.0, size=co),
                  "eps": 1e-5}
        layers.append(FPLayer(w, b, bn))
    gx = -(-width // patch)
    gy = -(-height // patch)
    in_dim = gx * gy * dims[-1]
    fc_w = rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(n_classes, in_dim))
    fc_b = rng.normal(0.0, 0.1, size=n_classes)
    return FPModel(width, height, layers, fc_w, fc_b,
                   search or SearchParams(), patch,
                   [str(i) for i in range(n_classes)])
