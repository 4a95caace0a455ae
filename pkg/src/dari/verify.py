"""Finite-difference gradient checks and the deduplication equivalence check."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .metric import MetricLayer, metric_backward, metric_forward
from .model import ArchConfig, NetworkParams, forward
from .tensor import make_rng
from .trainer import add_weight_decay, batch_gradients, naive_gradients
from .triplets import TripletBatch, generate_batch, triplet_loss

FD_STEP = 1e-5
GRADCHECK_TOL = 1e-4
EQUIV_TOL = 1e-9


def numeric_gradient(fn, x, h=FD_STEP):
    """Central differences of scalar ``fn()`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    """``max|a - n| / max(max|a|, max|n|)``, or 0 when both vanish."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _projection(y, rng):
    # random linear functional turns a layer output into a scalar objective
    return rng.standard_normal(np.shape(y))


def check_conv(rng, shape=(2, 3, 6, 5), filters=2, kernel=2, stride=1, fault=1.0):
    layer = L.ConvLayer(rng.standard_normal((filters, shape[1], kernel, kernel)), rng.standard_normal(filters), stride)
    x = rng.standard_normal(shape)
    y, cache = L.conv_forward(layer, x)
    r = _projection(y, rng)
    gx, gw, gb = L.conv_backward(layer, cache, r)
    obj = lambda: float(np.sum(L.conv_forward(layer, x)[0] * r))
    return max(
        relative_error(fault * gx, numeric_gradient(obj, x)),
        relative_error(fault * gw, numeric_gradient(obj, layer.weights)),
        relative_error(fault * gb, numeric_gradient(obj, layer.bias)),
    )


def check_relu(rng, shape=(2, 3, 4, 4)):
    x = rng.standard_normal(shape)
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    y, cache = L.relu_forward(x)
    r = _projection(y, rng)
    obj = lambda: float(np.sum(L.relu_forward(x)[0] * r))
    return relative_error(L.relu_backward(cache, r), numeric_gradient(obj, x))


def check_maxpool(rng, shape=(2, 3, 7, 6), window=2, stride=2):
    layer = L.MaxPoolLayer(window, stride)
    x = rng.permutation(np.arange(np.prod(shape), dtype=float)).reshape(shape) * 0.01  # distinct values, no ties
    y, cache = L.maxpool_forward(layer, x)
    r = _projection(y, rng)
    obj = lambda: float(np.sum(L.maxpool_forward(layer, x)[0] * r))
    return relative_error(L.maxpool_backward(layer, cache, r), numeric_gradient(obj, x))


def check_fc(rng, in_dim=10, out_dim=7, batch=3):
    layer = L.FCLayer(rng.standard_normal((out_dim, in_dim)), rng.standard_normal(out_dim))
    x = rng.standard_normal((batch, in_dim))
    y, cache = L.fc_forward(layer, x)
    r = _projection(y, rng)
    gx, gw, gb = L.fc_backward(layer, cache, r)
    obj = lambda: float(np.sum(L.fc_forward(layer, x)[0] * r))
    return max(
        relative_error(gx, numeric_gradient(obj, x)),
        relative_error(gw, numeric_gradient(obj, layer.weights)),
        relative_error(gb, numeric_gradient(obj, layer.bias)),
    )


def check_l2norm(rng, dim=20, batch=2):
    layer = L.L2NormLayer()
    x = rng.standard_normal((batch, dim))
    y, cache = L.l2norm_forward(layer, x)
    r = _projection(y, rng)
    obj = lambda: float(np.sum(L.l2norm_forward(layer, x)[0] * r))
    return relative_error(L.l2norm_backward(cache, r), numeric_gradient(obj, x))


def check_metric(rng, in_dim=6, out_dim=6, batch=3):
    layer = MetricLayer(rng.standard_normal((out_dim, in_dim)))
    f = rng.standard_normal((batch, in_dim))
    r = _projection(metric_forward(layer, f), rng)
    gf, gL = metric_backward(layer, f, r)
    obj = lambda: float(np.sum(metric_forward(layer, f) * r))
    return max(relative_error(gf, numeric_gradient(obj, f)), relative_error(gL, numeric_gradient(obj, layer.L)))


def tiny_problem(arch=None, seed=0, classes=3, per_class=2, triplets=12, weight_std=0.3):
    """Random tiny network, random images and a triplet batch over them."""
    arch = arch or ArchConfig.tiny()
    rng = make_rng(seed)
    params = NetworkParams(
        arch, {n: rng.normal(0, weight_std, s) for n, s in arch.param_shapes().items()}
    )
    labels = np.repeat(np.arange(classes), per_class)
    batch = generate_batch(labels, classes, triplets, rng)
    images = rng.uniform(0, 1, size=(len(batch.distinct_images),) + arch.input_shape)
    return params, images, batch


def check_end_to_end(params, images, batch, fault_conv=1.0):
    """Per-parameter relative error of the deduplicated batch gradient."""
    grads, _, _, _ = batch_gradients(params, images, batch)

    def loss():
        e, _, _ = forward(params, images)
        return triplet_loss(e, batch)[0]

    errors = {}
    for name in params:
        analytic = grads[name] * (fault_conv if name.startswith("conv") else 1.0)
        errors[name] = relative_error(analytic, numeric_gradient(loss, params.tensors[name]))
    return errors


@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)
    tolerance: float = GRADCHECK_TOL

    @property
    def failures(self):
        return [name for name, err in self.errors.items() if not err <= self.tolerance]

    @property
    def passed(self):
        return not self.failures

    def lines(self):
        return [
            f"{name:<18s} max_rel_err={err:.3e} {'ok' if err <= self.tolerance else 'FAIL'}"
            for name, err in self.errors.items()
        ]


def run_gradcheck(seed=0, corrupt=None, tolerance=GRADCHECK_TOL):
    """Check every layer type, then the whole network through the triplet loss.

    ``corrupt="conv"`` scales the analytic conv gradients by 1.01 to confirm
    that a broken backward pass is caught.
    """
    rng = make_rng(seed)
    fault = 1.01 if corrupt == "conv" else 1.0
    report = GradcheckReport(tolerance=tolerance)
    report.errors["conv(stride1)"] = check_conv(rng, fault=fault)
    report.errors["conv(stride2)"] = check_conv(rng, shape=(2, 3, 9, 8), kernel=3, stride=2, fault=fault)
    report.errors["relu"] = check_relu(rng)
    report.errors["maxpool"] = check_maxpool(rng)
    report.errors["fc"] = check_fc(rng)
    report.errors["l2norm"] = check_l2norm(rng)
    report.errors["metric"] = check_metric(rng)
    params, images, batch = tiny_problem(seed=seed)
    for name, err in check_end_to_end(params, images, batch, fault_conv=fault).items():
        report.errors[f"net:{name}"] = err
    return report


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    naive_forward: int
    dedup_forward: int
    num_triplets: int
    num_distinct: int
    loss_naive: float
    loss_dedup: float

    def passed(self, tol=EQUIV_TOL):
        return (
            self.max_abs_diff <= tol
            and self.naive_forward == 3 * self.num_triplets
            and self.dedup_forward == self.num_distinct
        )


def compare_gradients(params, images, batch: TripletBatch, weight_decay=0.0005):
    """Full parameter gradient computed both ways, weight decay included."""
    dedup, loss_d, _, passes_d = batch_gradients(params, images, batch)
    naive, loss_n, passes_n = naive_gradients(params, images, batch)
    add_weight_decay(dedup, params, weight_decay)
    add_weight_decay(naive, params, weight_decay)
    return EquivalenceReport(
        max_abs_diff=dedup.max_abs_diff(naive),
        naive_forward=passes_n["forward"],
        dedup_forward=passes_d["forward"],
        num_triplets=len(batch),
        num_distinct=len(batch.distinct_images),
        loss_naive=loss_n,
        loss_dedup=loss_d,
    ), dedup, naive


def run_equivalence(seed=0, classes=5, per_class=2, triplets=50, weight_std=0.3):
    params, images, batch = tiny_problem(seed=seed, classes=classes, per_class=per_class, triplets=triplets, weight_std=weight_std)
    report, _, _ = compare_gradients(params, images, batch)
    return report
