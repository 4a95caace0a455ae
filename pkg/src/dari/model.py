"""Architecture configuration and the joint parameter set (feature net + metric layer)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .layers import (
    ConvLayer,
    FCLayer,
    FeatureNet,
    L2NormLayer,
    MaxPoolLayer,
    ReLULayer,
    net_backward,
    net_forward,
)
from .metric import MetricLayer, metric_backward, metric_forward

WEIGHT_NAMES = ("conv1.w", "conv2.w", "fc.w", "metric.L")


@dataclass(frozen=True)
class ArchConfig:
    """Layer sizes; defaults reproduce the reference architecture.

    ``metric_dim = 0`` removes the metric layer, so distances are measured
    directly on the normalized features.
    """

    in_channels: int = 3
    in_height: int = 230
    in_width: int = 80
    conv1_filters: int = 32
    conv1_kernel: int = 5
    conv1_stride: int = 2
    pool1_window: int = 3
    pool1_stride: int = 3
    conv2_filters: int = 32
    conv2_kernel: int = 5
    conv2_stride: int = 1
    pool2_window: int = 3
    pool2_stride: int = 3
    fc_dim: int = 400
    metric_dim: int = 400
    l2_epsilon: float = 1e-12
    input_mean: float = 0.5
    input_scale: float = 255.0

    @classmethod
    def tiny(cls, **overrides):
        """Small network used for gradient checks."""
        base = dict(
            in_height=16, in_width=12,
            conv1_filters=4, conv1_kernel=3, conv1_stride=1,
            pool1_window=2, pool1_stride=2,
            conv2_filters=4, conv2_kernel=3, conv2_stride=1,
            pool2_window=2, pool2_stride=2,
            fc_dim=6, metric_dim=6,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def input_shape(self):
        return (self.in_channels, self.in_height, self.in_width)

    @property
    def embedding_dim(self):
        return self.metric_dim or self.fc_dim

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def shape_chain(self):
        """Activation shapes from the input through the normalized feature."""
        return self._template_net().shapes

    def flat_dim(self):
        c, h, w = self._template_net(until_fc=True).shapes[-1]
        return c * h * w

    def _template_net(self, until_fc=False):
        z = np.zeros
        layers = [
            ("conv1", ConvLayer(z((self.conv1_filters, self.in_channels, self.conv1_kernel, self.conv1_kernel)), z(self.conv1_filters), self.conv1_stride)),
            ("relu1", ReLULayer()),
            ("pool1", MaxPoolLayer(self.pool1_window, self.pool1_stride)),
            ("conv2", ConvLayer(z((self.conv2_filters, self.conv1_filters, self.conv2_kernel, self.conv2_kernel)), z(self.conv2_filters), self.conv2_stride)),
            ("relu2", ReLULayer()),
            ("pool2", MaxPoolLayer(self.pool2_window, self.pool2_stride)),
        ]
        net = FeatureNet(self.input_shape, layers)
        if until_fc:
            return net
        c, h, w = net.shapes[-1]
        layers += [("fc", FCLayer(z((self.fc_dim, c * h * w)), z(self.fc_dim))), ("l2norm", L2NormLayer(self.l2_epsilon))]
        return FeatureNet(self.input_shape, layers)

    def param_shapes(self):
        shapes = {
            "conv1.w": (self.conv1_filters, self.in_channels, self.conv1_kernel, self.conv1_kernel),
            "conv1.b": (self.conv1_filters,),
            "conv2.w": (self.conv2_filters, self.conv1_filters, self.conv2_kernel, self.conv2_kernel),
            "conv2.b": (self.conv2_filters,),
            "fc.w": (self.fc_dim, self.flat_dim()),
            "fc.b": (self.fc_dim,),
        }
        if self.metric_dim:
            shapes["metric.L"] = (self.metric_dim, self.fc_dim)
        return shapes


class NetworkParams:
    """Named float64 tensors for every layer; also used for gradients."""

    def __init__(self, arch: ArchConfig, tensors: dict):
        expected = arch.param_shapes()
        if set(tensors) != set(expected):
            raise ShapeError(f"parameter names {sorted(tensors)} do not match architecture {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ShapeError(f"{name}: shape {tuple(tensors[name].shape)} != expected {shape}")
        self.arch = arch
        self.tensors = {name: np.asarray(tensors[name], dtype=np.float64) for name in expected}

    @classmethod
    def zeros(cls, arch):
        return cls(arch, {n: np.zeros(s) for n, s in arch.param_shapes().items()})

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self):
        return NetworkParams(self.arch, {n: t.copy() for n, t in self.tensors.items()})

    def weight_names(self):
        return [n for n in self.tensors if n in WEIGHT_NAMES]

    def max_abs_diff(self, other):
        return max(float(np.max(np.abs(self[n] - other[n]))) for n in self.tensors)

    def is_finite(self):
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())

    def feature_net(self):
        a = self.arch
        t = self.tensors
        return FeatureNet(
            a.input_shape,
            [
                ("conv1", ConvLayer(t["conv1.w"], t["conv1.b"], a.conv1_stride)),
                ("relu1", ReLULayer()),
                ("pool1", MaxPoolLayer(a.pool1_window, a.pool1_stride)),
                ("conv2", ConvLayer(t["conv2.w"], t["conv2.b"], a.conv2_stride)),
                ("relu2", ReLULayer()),
                ("pool2", MaxPoolLayer(a.pool2_window, a.pool2_stride)),
                ("fc", FCLayer(t["fc.w"], t["fc.b"])),
                ("l2norm", L2NormLayer(a.l2_epsilon)),
            ],
        )

    def metric_layer(self):
        L = self.tensors.get("metric.L")
        return None if L is None else MetricLayer(L)


def forward(params: NetworkParams, images):
    """Embed a batch of images; returns ``(embeddings, features, cache)``.

    Without a metric layer the embedding is the normalized feature itself.
    """
    net = params.feature_net()
    features, cache = net_forward(net, images)
    layer = params.metric_layer()
    embeddings = features if layer is None else metric_forward(layer, features)
    return embeddings, features, cache


def backward(params: NetworkParams, features, cache, grad_embeddings) -> NetworkParams:
    """Parameter gradients given d(loss)/d(embedding), summed over the batch."""
    layer = params.metric_layer()
    grads = {}
    if layer is None:
        grad_features = grad_embeddings
    else:
        grad_features, grads["metric.L"] = metric_backward(layer, features, grad_embeddings)
    grads.update(net_backward(params.feature_net(), cache, grad_features))
    return NetworkParams(params.arch, grads)
