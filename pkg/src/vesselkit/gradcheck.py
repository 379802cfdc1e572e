"""Central finite-difference checks of every hand-written gradient (64-bit).

Relative error of an analytic value ``a`` against a numeric value ``n`` is
``|a - n| / max(|a|, |n|, floor)`` where ``floor = 1e-3 * max|a|`` over the
entries of that check, so exactly-zero or vanishing entries are judged on
the scale of the whole gradient instead of dividing by round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from vesselkit import loss as losses
from vesselkit import network as net
from vesselkit.convolution import (
    CrossHairKernel,
    Kernel3D,
    conv_layer_backward,
    conv_layer_forward,
    crosshair_backward,
    crosshair_forward,
)
from vesselkit.rng import substream

OP_TOL = 1e-4
NETWORK_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    tol: float
    max_rel_err: float
    n_checked: int
    worst: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tol)

    def as_dict(self) -> dict:
        return {"name": self.name, "tol": self.tol, "max_rel_err": self.max_rel_err,
                "n_checked": self.n_checked, "passed": self.passed,
                "worst": [list(w) for w in self.worst]}


def relative_errors(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = 1e-3 * float(np.max(np.abs(a))) if a.size else 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor, np.finfo(float).tiny))
    return np.abs(a - n) / den


def _result(name, tol, labels, analytic, numeric, keep=5) -> CheckResult:
    err = relative_errors(analytic, numeric)
    order = np.argsort(err)[::-1][:keep]
    worst = [(str(labels[i]), float(analytic[i]), float(numeric[i]), float(err[i])) for i in order]
    return CheckResult(name, tol, float(err.max()) if err.size else 0.0, int(err.size), worst)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, index, h: float) -> float:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` without mutating ``x``."""
    xp = x.copy()
    xp.flat[index] += h
    fp = f(xp)
    xp.flat[index] -= 2 * h
    fm = f(xp)
    return (fp - fm) / (2 * h)


def check_crosshair(seed: int = 0, h: float = 1e-6, backward=crosshair_backward) -> CheckResult:
    """Single-channel cross-hair operator: every kernel entry and 30 voxels."""
    rng = substream(seed, "gradcheck-crosshair")
    x = rng.normal(size=(6, 7, 5))
    kern = CrossHairKernel(rng.normal(size=(5, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 5)),
                           tuple(rng.uniform(0.5, 1.5, 3)))
    u = rng.normal(size=x.shape)
    gx, gk = backward(x, kern, u)
    labels, ana, num = [], [], []
    for p in range(3):
        plane = kern.planes[p]
        for idx in range(plane.size):
            def f(w, p=p):
                planes = list(kern.planes)
                planes[p] = w
                return float(np.sum(u * crosshair_forward(x, CrossHairKernel(*planes, kern.plane_weights))))
            labels.append(f"plane{p}[{idx}]")
            ana.append(gk.planes[p].flat[idx])
            num.append(central_difference(f, plane, idx, h))
    for idx in rng.choice(x.size, 30, replace=False):
        labels.append(f"x[{idx}]")
        ana.append(np.asarray(gx).flat[idx])
        num.append(central_difference(lambda v: float(np.sum(u * crosshair_forward(v, kern))), x, idx, h))
    return _result("crosshair_backward", OP_TOL, labels, np.array(ana), np.array(num))


def check_conv_layer(mode: str, seed: int = 0, h: float = 1e-6, backward=conv_layer_backward) -> CheckResult:
    """Multi-channel layer: 40 weights, all biases and 30 input entries."""
    rng = substream(seed, "gradcheck-layer", 0 if mode == "crosshair" else 1)
    cout, cin, dims = 3, 2, (3, 3, 5)
    feat = rng.normal(size=(cin, 5, 6, 7))
    if mode == "crosshair":
        kx, ky, kz = dims
        kern = CrossHairKernel(rng.normal(size=(cout, cin, ky, kz)), rng.normal(size=(cout, cin, kx, kz)),
                               rng.normal(size=(cout, cin, kx, ky)))
    else:
        kern = Kernel3D(rng.normal(size=(cout, cin) + dims))
    bias = rng.normal(size=cout)
    u = rng.normal(size=(cout,) + feat.shape[1:])
    gfeat, gkern, gbias = backward(feat, kern, u)
    params = net.Parameters([kern], [bias])
    gparams = net.Parameters([gkern], [gbias])
    vec, gvec = params.to_vector(), gparams.to_vector()

    def f_params(v):
        p = params.from_vector(v)
        return float(np.sum(u * conv_layer_forward(feat, p.kernels[0], p.biases[0])))

    labels, ana, num = [], [], []
    n_w = vec.size - cout
    for idx in list(rng.choice(n_w, 40, replace=False)) + list(range(n_w, vec.size)):
        labels.append(f"param[{idx}]")
        ana.append(gvec[idx])
        num.append(central_difference(f_params, vec, idx, h))
    for idx in rng.choice(feat.size, 30, replace=False):
        labels.append(f"feat[{idx}]")
        ana.append(gfeat.flat[idx])
        num.append(central_difference(lambda v: float(np.sum(u * conv_layer_forward(v, kern, bias))), feat, idx, h))
    return _result(f"conv_layer_backward[{mode}]", OP_TOL, labels, np.array(ana), np.array(num))


def check_loss(seed: int = 0, correction: bool = True, n: int = 30, h: float = 1e-5,
               threshold: float = 0.5, grad_fn=losses.balanced_fp_loss_grad) -> CheckResult:
    """Loss gradient w.r.t. probabilities, gammas and partition frozen.

    Voxels within ``1e-3`` of the threshold are skipped so the partition is
    locally stable under the step.
    """
    rng = substream(seed, "gradcheck-loss", int(correction))
    p = rng.uniform(0.02, 0.98, size=n)
    y = np.zeros(n, np.uint8)
    y[rng.choice(n, n // 3, replace=False)] = 1
    grad = grad_fn(p, y, threshold, correction)
    ref = losses.balanced_fp_loss(p, y, threshold)
    frozen = (ref.gamma1, ref.gamma2)

    def f(q):
        v = losses.balanced_fp_loss(q, y, threshold, gammas=frozen)
        return v.total if correction else v.l1

    labels, ana, num = [], [], []
    for i in range(n):
        if abs(p[i] - threshold) < 1e-3:
            continue
        labels.append(f"P[{i}]")
        ana.append(grad[i])
        num.append(central_difference(f, p, i, h))
    name = "balanced_fp_loss_grad" + ("" if correction else "[l1]")
    return _result(name, OP_TOL, labels, np.array(ana), np.array(num))


def check_network(seed: int = 0, n_params: int = 50, h: float = 1e-6, shape=(8, 8, 8),
                  spec: Optional[net.NetworkSpec] = None, loss: str = "l1l2") -> CheckResult:
    """End-to-end default network on a small volume.

    The numeric side perturbs one parameter and re-evaluates the loss with
    the per-voxel weights of the unperturbed step held fixed.
    """
    spec = spec or net.NetworkSpec.default()
    rng = substream(seed, "gradcheck-network")
    params = net.init_parameters(spec, seed, np.float64)
    x = rng.uniform(0, 1, size=shape)
    y = (rng.uniform(size=shape) < 0.2).astype(np.uint8)
    grads, _, probs = net.backward(spec, params, x, y, loss)
    a, b, _ = losses.loss_weights(probs, y, 0.5, correction=(loss == "l1l2"))

    def f(v):
        q = net.forward(spec, params.from_vector(v), x).ravel()
        return float(np.sum(a * -np.log(q)) + np.sum(b * -np.log1p(-q)))

    vec, gvec = params.to_vector(), grads.to_vector()
    labels, ana, num = [], [], []
    for idx in rng.choice(vec.size, n_params, replace=False):
        labels.append(f"param[{idx}]")
        ana.append(gvec[idx])
        num.append(central_difference(f, vec, idx, h))
    return _result(f"network[{loss}]", NETWORK_TOL, labels, np.array(ana), np.array(num))


def run_all(seed: int = 0) -> list[CheckResult]:
    return [
        check_crosshair(seed),
        check_conv_layer("crosshair", seed),
        check_conv_layer("full3d", seed),
        check_loss(seed, correction=True),
        check_loss(seed, correction=False),
        check_network(seed, loss="l1l2"),
        check_network(seed, loss="l1"),
    ]
