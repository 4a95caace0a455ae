"""Batch-process training: triplet batches, per-image gradients, plain SGD."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ParameterError, ShapeError
from .model import ArchConfig, NetworkParams, backward, forward
from .tensor import make_rng, tensor_gaussian
from .triplets import TripletBatch, generate_batch, output_gradients, triplet_loss

log = logging.getLogger(__name__)

ParamGrads = NetworkParams

CONV_INIT_STD = 0.01
FC_INIT_STD = 0.001


@dataclass
class TrainConfig:
    classes_per_batch: int = 60
    triplets_per_batch: int = 4800
    learning_rate: float = 0.01
    lr_decay: float = 0.1
    lr_step: int = 0  # 0 disables step decay
    weight_decay: float = 0.0005
    momentum: float = 0.0
    max_iterations: int = 10000
    stop_violation_threshold: int = 10
    stop_mode: str = "order"  # order | margin
    stop_check: str = "batch"  # batch | fixed
    check_triplets: int = 400
    augment: bool = True
    crop_perturbation: int = 5
    chunk_size: int = 64
    deterministic: bool = True
    seed: int = 0

    def validate(self):
        if self.learning_rate <= 0 or self.lr_decay <= 0:
            raise ParameterError("learning rate and decay factor must be positive")
        if self.weight_decay < 0 or self.momentum < 0 or self.stop_violation_threshold < 0:
            raise ParameterError("weight decay, momentum and thresholds must be >= 0")
        if self.max_iterations < 0 or self.lr_step < 0 or self.crop_perturbation < 0:
            raise ParameterError("iteration counts and perturbation must be >= 0")
        if self.stop_mode not in ("order", "margin"):
            raise ParameterError(f"unknown stop_mode {self.stop_mode!r}")
        if self.stop_check not in ("batch", "fixed"):
            raise ParameterError(f"unknown stop_check {self.stop_check!r}")
        if self.chunk_size < 1:
            raise ParameterError("chunk_size must be >= 1")
        return self

    def lr_at(self, iteration):
        """Learning rate for 1-based ``iteration``."""
        if not self.lr_step:
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** ((iteration - 1) // self.lr_step)


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    margin_violations: int
    order_violations: int
    lr: float
    distinct_images: int
    forward_count: int
    backward_count: int
    check_violations: int | None = None
    updated: bool = True

    def log_line(self):
        return (
            f"{self.iteration} {self.loss!r} {self.margin_violations} {self.order_violations} "
            f"{self.lr!r} {self.distinct_images} {self.forward_count}"
        )


@dataclass
class TrainState:
    params: NetworkParams
    iteration: int = 0
    history: list[IterationRecord] = field(default_factory=list)
    velocity: dict | None = None
    stop_reason: str | None = None

    @property
    def last(self):
        return self.history[-1] if self.history else None

    @property
    def losses(self):
        return [r.loss for r in self.history]


def init_params(arch: ArchConfig, rng) -> NetworkParams:
    """Conv filters ~ N(0, 0.01^2); FC and metric weights ~ N(0, 0.001^2); biases 0."""
    tensors = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        elif name.startswith("conv"):
            tensors[name] = tensor_gaussian(shape, CONV_INIT_STD, rng)
        else:
            tensors[name] = tensor_gaussian(shape, FC_INIT_STD, rng)
    return NetworkParams(arch, tensors)


def augment_image(image, crop_size, training: bool, rng=None, perturbation: int = 5):
    """Center crop to ``crop_size``; in training mode also mirror and jitter.

    Training mode flips left-right with probability 0.5, then shifts the crop
    window by an integer offset drawn uniformly from [-perturbation,
    perturbation] per axis, clamped to the image.
    """
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    ch, cw = crop_size
    if h < ch or w < cw:
        raise ShapeError(f"image {h}x{w} smaller than crop {ch}x{cw}")
    top, left = (h - ch) // 2, (w - cw) // 2
    if training:
        if rng.random() < 0.5:
            image = image[:, :, ::-1]
        dy, dx = rng.integers(-perturbation, perturbation + 1, size=2)
        top = int(np.clip(top + dy, 0, h - ch))
        left = int(np.clip(left + dx, 0, w - cw))
    return np.ascontiguousarray(image[:, top : top + ch, left : left + cw])


def prepare_images(images, arch: ArchConfig, training, rng=None, perturbation=5):
    """Crop (and augment) images in [0, 1], then shift and scale them into network input range."""
    crop = (arch.in_height, arch.in_width)
    x = np.stack([augment_image(img, crop, training, rng, perturbation) for img in images])
    return (x - arch.input_mean) * arch.input_scale


def add_weight_decay(grads: NetworkParams, params: NetworkParams, weight_decay: float):
    """Add ``weight_decay * W`` to every weight gradient (biases excluded)."""
    for name in params.weight_names():
        grads.tensors[name] = grads[name] + weight_decay * params[name]
    return grads


def batch_gradients(params: NetworkParams, images, batch: TripletBatch, chunk_size=64):
    """Image-deduplicated gradient of the batch hinge loss.

    ``images[i]`` is the network input for ``batch.distinct_images[i]``.  Each
    image is propagated forward and backward exactly once; the loss gradient
    with respect to its embedding is accumulated over every triplet it appears
    in before back-propagation.  Returns ``(grads, loss, report, passes)``.
    """
    n = len(batch.distinct_images)
    if len(images) != n:
        raise ShapeError(f"need {n} prepared images, got {len(images)}")
    chunks = []
    embeddings = []
    for start in range(0, n, chunk_size):
        e, f, cache = forward(params, images[start : start + chunk_size])
        chunks.append((start, f, cache))
        embeddings.append(e)
    embeddings = np.concatenate(embeddings)
    loss, report = triplet_loss(embeddings, batch)
    out_grads = output_gradients(embeddings, batch)
    total = NetworkParams.zeros(params.arch)
    for start, f, cache in chunks:
        g = backward(params, f, cache, out_grads[start : start + len(f)])
        for name in total:
            total.tensors[name] += g[name]
    return total, loss, report, {"forward": n, "backward": n}


def naive_gradients(params: NetworkParams, images, batch: TripletBatch):
    """Reference gradient: three fresh propagations per triplet, then summed.

    Used to check :func:`batch_gradients`; its cost grows with the triplet count.
    """
    total = NetworkParams.zeros(params.arch)
    loss = 0.0
    passes = 0
    for i, j, k in batch.triplets:
        e, f, cache = forward(params, images[[i, j, k]])
        passes += 3
        ei, ej, ek = e
        gap = np.sum((ei - ek) ** 2) - np.sum((ei - ej) ** 2)
        loss += max(0.0, 1.0 - gap)
        if gap < 1.0:
            g_out = np.stack([-2 * (ei - ek) + 2 * (ei - ej), -2 * (ei - ej), 2 * (ei - ek)])
        else:
            g_out = np.zeros_like(e)
        g = backward(params, f, cache, g_out)
        for name in total:
            total.tensors[name] += g[name]
    return total, loss, {"forward": passes, "backward": passes}


def sgd_step(state: TrainState, grads: NetworkParams, lr: float, momentum: float = 0.0):
    """``W <- W - lr * grad`` (with optional momentum); refuses to commit a non-finite result."""
    params = state.params
    velocity = None
    if momentum:
        old = state.velocity or {n: np.zeros_like(t) for n, t in params.items()}
        velocity = {n: momentum * old[n] + grads[n] for n in params}
        steps = velocity
    else:
        steps = grads.tensors
    updated = {n: params[n] - lr * steps[n] for n in params}
    if not all(np.all(np.isfinite(t)) for t in updated.values()):
        return False
    for name, t in updated.items():
        params.tensors[name][...] = t
    if velocity is not None:
        state.velocity = velocity
    return True


def train_iteration(state: TrainState, dataset, config: TrainConfig, rng, hold_below=None) -> TrainState:
    """One batch: sample triplets, propagate distinct images, update W+.

    With ``hold_below`` set, a batch whose stop-mode violation count is under
    that value leaves the parameters untouched (``rec.updated`` is False).
    """
    t = state.iteration + 1
    batch = generate_batch(dataset.labels, config.classes_per_batch, config.triplets_per_batch, rng)
    images = prepare_images(
        dataset.images[batch.distinct_images], state.params.arch, config.augment, rng, config.crop_perturbation
    )
    grads, loss, report, passes = batch_gradients(state.params, images, batch, config.chunk_size)
    add_weight_decay(grads, state.params, config.weight_decay)
    lr = config.lr_at(t)
    count = report.order_violations if config.stop_mode == "order" else report.margin_violations
    hold = hold_below is not None and count < hold_below
    with np.errstate(over="ignore", invalid="ignore"):
        ok = np.isfinite(loss) and grads.is_finite() and (hold or sgd_step(state, grads, lr, config.momentum))
    if not ok:
        raise DivergenceError(f"non-finite loss, gradient or update at iteration {t}", iteration=t, history=state.history)
    state.iteration = t
    state.history.append(
        IterationRecord(
            t, loss, report.margin_violations, report.order_violations, lr,
            len(batch.distinct_images), passes["forward"], passes["backward"], updated=not hold,
        )
    )
    return state


def violations_on(params, images, batch, mode="order"):
    e, _, _ = forward(params, images)
    _, report = triplet_loss(e, batch)
    return report.order_violations if mode == "order" else report.margin_violations


def train_loop(dataset, config: TrainConfig, arch: ArchConfig | None = None, params=None, on_iteration=None):
    """Iterate until the violation count drops below the threshold or the budget ends.

    With ``stop_check="batch"`` the count comes from the current iteration's
    batch before its update, and a satisfying batch ends training without
    stepping, so the returned params are the ones that met the rule; ``"fixed"`` re-evaluates a single triplet set, drawn once with
    evaluation-mode crops, after every update.  Returns ``(params, state)``;
    ``state.stop_reason`` is ``"violations<N"`` or ``"max_iterations"``.
    """
    config.validate()
    arch = arch or (params.arch if params is not None else ArchConfig())
    rng = make_rng(config.seed)
    if params is None:
        params = init_params(arch, rng)
    state = TrainState(params=params)
    check = None
    if config.stop_check == "fixed":
        check_rng = make_rng(config.seed + 1)
        check_batch = generate_batch(dataset.labels, config.classes_per_batch, config.check_triplets, check_rng)
        check = (check_batch, prepare_images(dataset.images[check_batch.distinct_images], arch, False))

    limits = _thread_limit(config.deterministic)
    with limits:
        while state.iteration < config.max_iterations:
            try:
                hold = config.stop_violation_threshold if check is None else None
                train_iteration(state, dataset, config, rng, hold_below=hold)
            except DivergenceError as exc:
                exc.history = state.history
                exc.params = state.params  # the update is skipped, so these are the last finite values
                raise
            rec = state.last
            if check is None:
                count = rec.order_violations if config.stop_mode == "order" else rec.margin_violations
            else:
                count = violations_on(state.params, check[1], check[0], config.stop_mode)
                rec.check_violations = count
            if on_iteration is not None:
                on_iteration(rec)
            if count < config.stop_violation_threshold:
                state.stop_reason = f"violations<{config.stop_violation_threshold}"
                break
        else:
            state.stop_reason = "max_iterations"
    return state.params, state


def _thread_limit(deterministic):
    from contextlib import nullcontext

    if not deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)
