"""Quick consistency checks runnable from the command line (a few seconds)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .arch import build_network, count_multiadds, count_params
from .boxcodec import assign_positive_cells, decode, encode, scales_for
from .loss import sdiou, sdiou_grad
from .metrics import nms
from .trainer import lr_schedule


def _check_conv_grad(rng: np.random.Generator) -> float:
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    xt, wt = T.Tensor(x, requires_grad=True), T.Tensor(w, requires_grad=True)
    T.sum_all(T.silu(T.conv2d(xt, wt))).backward()
    i = (1, 2, 1, 0)
    h = 1e-6

    def f(ww):
        return T.sum_all(T.silu(T.conv2d(T.Tensor(x), T.Tensor(ww)))).data

    wp, wm = w.copy(), w.copy()
    wp[i] += h
    wm[i] -= h
    num = (f(wp) - f(wm)) / (2 * h)
    return abs(num - wt.grad[i]) / max(abs(num), 1e-12)


def _check_sdiou_grad(rng: np.random.Generator) -> float:
    g = rng.uniform(0.6, 3.0, 4)
    p = rng.uniform(0.6, 3.0, 4)
    ana = sdiou_grad(p, g)
    num = np.empty(4)
    for k in range(4):
        e = np.zeros(4)
        e[k] = 1e-6
        num[k] = (sdiou(p + e, g)[0] - sdiou(p - e, g)[0]) / 2e-6
    return float(np.max(np.abs(num - ana) / np.maximum(np.abs(num), 1e-9)))


def _check_codec(rng: np.random.Generator) -> float:
    worst = 0.0
    scales = scales_for(416)
    for _ in range(50):
        x1, y1 = rng.uniform(0, 300, 2)
        box = (x1, y1, x1 + rng.uniform(20, 110), y1 + rng.uniform(20, 110))
        for cell in assign_positive_cells(box, scales):
            back = decode(encode(box, cell.scale), cell, clip=False)
            worst = max(worst, float(np.max(np.abs(np.subtract(back, box)))))
    return worst


def run(verbose: bool = False) -> bool:
    rng = np.random.default_rng(0)
    g = build_network()
    checks = [
        ("conv+silu gradient", _check_conv_grad(rng) < 1e-5),
        ("sdiou gradient", _check_sdiou_grad(rng) < 1e-5),
        ("sdiou exact match", abs(sdiou([1.5, 2.0, 1.2, 0.8], [1.5, 2.0, 1.2, 0.8])[0] - 1.0) < 1e-12),
        ("codec round trip", _check_codec(rng) < 1e-6),
        ("nms keeps top box", list(nms(np.array([[0, 0, 10, 10], [1, 1, 10, 10.0]]), np.array([0.9, 0.8]))) == [0]),
        ("lr schedule endpoints", abs(lr_schedule(100, 100) - 0.01 * 0.99 ** 300) < 1e-15),
        ("parameter count", abs(count_params(g).params_m - 78.01) / 78.01 < 0.02),
        ("multi-adds", abs(count_multiadds(g, 16).multi_adds_g - 593.68) / 593.68 < 0.03),
    ]
    for name, ok in checks:
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return all(ok for _, ok in checks)
