"""The pure-Python fallback must match the compiled kernels bit for bit.

EVGNN_NO_NUMBA is read at import time, so the fallback runs in a
subprocess with the flag set; both modes dump their outputs and the parent
compares the files byte for byte.
"""

import os
import subprocess
import sys

import numpy as np

import evgnn.kernels as kernels

_DUMP = r"""
import sys
import numpy as np
from evgnn import engine, event_io, model

stream = event_io.gen_synthetic(
    "uniform_random",
    {"width": 48, "height": 32, "count": 800, "duration_us": 4_000}, seed=13)
m = model.random_model(21, width=48, height=32)
res = engine.run_stream(m, stream)
np.savez(sys.argv[1], deg=res.adjacency.deg, nbr_n=res.adjacency.nbr_n,
         scanned=res.adjacency.entries_scanned, feats=res.feats,
         logits=res.logits, cls=res.cls, readout=res.readout, macs=res.macs)
"""


def _run_mode(no_numba: bool, out_path: str) -> None:
    env = dict(os.environ, EVGNN_NO_NUMBA="1" if no_numba else "0")
    subprocess.run([sys.executable, "-c", _DUMP, out_path],
                   env=env, check=True, capture_output=True)


def test_fallback_matches_compiled(tmp_path):
    compiled = tmp_path / "compiled.npz"
    fallback = tmp_path / "fallback.npz"
    _run_mode(False, str(compiled))
    _run_mode(True, str(fallback))
    a = np.load(compiled)
    b = np.load(fallback)
    assert set(a.files) == set(b.files)
    for key in a.files:
        assert np.array_equal(a[key], b[key]), key


def test_flag_selects_mode():
    env = dict(os.environ, EVGNN_NO_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c",
         "import evgnn.kernels as k; print(k.USE_NUMBA)"],
        env=env, check=True, capture_output=True, text=True)
    assert out.stdout.strip() == "False"


def test_rne_mulshift_kernel_vs_python():
    from evgnn.engine import rne_mulshift
    rng = np.random.default_rng(3)
    for _ in range(2000):
        v = int(rng.integers(0, 2**31))
        mult = int(rng.integers(1, 2**31))
        shift = int(rng.integers(0, 41))
        assert int(kernels._rne_mulshift(
            np.int64(v), np.int64(mult), np.int64(shift))) == \
            rne_mulshift(v, mult, shift)
