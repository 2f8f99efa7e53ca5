"""Spectrogram CNN: isolated-word classifier whose penultimate layer gives
word embeddings.

Layer order: mean subtraction, convolution spanning the full frequency axis
(with one row of frequency padding), ReLU, LRN, max pooling, two fully
connected ReLU layers with dropout, and a softmax classifier.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dataset_io
from .errors import InputError, ParameterError, ShapeError
from .tensor import (OptimizerState, conv2d, conv2d_backward, conv_output_size, dropout, dropout_backward,
                     fc_backward, fully_connected, gaussian_init, lrn, lrn_backward, maxpool, maxpool_backward,
                     relu, relu_backward, sgd_momentum_step, softmax_xent, softmax_xent_backward)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CnnArch:
    vocab_size: int
    n_mels: int = 40
    frames: int = 100
    channels: int = 64
    kernel_w: int = 5
    pad_h: int = 1
    pool_h: int = 3
    pool_w: int = 4
    pool_stride_h: int = 1
    pool_stride_w: int = 2
    hidden: int = 1024
    dropout: float = 0.5
    lrn_size: int = 5
    lrn_alpha: float = 1e-4
    lrn_beta: float = 0.75
    lrn_k: float = 1.0

    @property
    def conv_shape(self):
        return (conv_output_size(self.n_mels, self.n_mels, self.pad_h, 1),
                conv_output_size(self.frames, self.kernel_w, 0, 1))

    @property
    def pool_shape(self):
        h, w = self.conv_shape
        return (conv_output_size(h, self.pool_h, 0, self.pool_stride_h),
                conv_output_size(w, self.pool_w, 0, self.pool_stride_w))

    @property
    def flat_dim(self):
        ph, pw = self.pool_shape
        return self.channels * ph * pw

    def validate(self):
        if self.vocab_size < 1:
            raise ParameterError("vocab_size must be >= 1")
        ch, cw = self.conv_shape
        if cw < 1 or ch < self.pool_h or cw < self.pool_w:
            raise ParameterError(f"input {self.n_mels}x{self.frames} too small for the conv/pool stack")
        return self

    @classmethod
    def miniature(cls, vocab_size=3):
        """Same layer types at toy size: 8 x 10 input, 4 channels."""
        return cls(vocab_size, n_mels=8, frames=10, channels=4, hidden=16)


PARAM_NAMES = ("conv_w", "conv_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b", "out_w", "out_b")


@dataclass
class WordCnnParams:
    arch: CnnArch
    mean_spectrogram: np.ndarray
    weights: dict[str, np.ndarray]

    def __post_init__(self):
        a = self.arch
        want = {
            "conv_w": (a.channels, 1, a.n_mels, a.kernel_w), "conv_b": (a.channels,),
            "fc1_w": (a.hidden, a.flat_dim), "fc1_b": (a.hidden,),
            "fc2_w": (a.hidden, a.hidden), "fc2_b": (a.hidden,),
            "out_w": (a.vocab_size, a.hidden), "out_b": (a.vocab_size,),
        }
        if self.mean_spectrogram.shape != (a.n_mels, a.frames):
            raise ShapeError(f"mean spectrogram {self.mean_spectrogram.shape} != input {(a.n_mels, a.frames)}")
        for name, shape in want.items():
            got = self.weights.get(name)
            if got is None or got.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {None if got is None else got.shape}")

    @property
    def vocab_size(self):
        return self.arch.vocab_size

    @classmethod
    def initialize(cls, arch, seed=0):
        a = arch.validate()
        rng = np.random.default_rng([seed, 0])
        fan_conv = a.n_mels * a.kernel_w
        weights = {
            "conv_w": gaussian_init(rng, (a.channels, 1, a.n_mels, a.kernel_w), fan_conv),
            "conv_b": np.zeros(a.channels),
            "fc1_w": gaussian_init(rng, (a.hidden, a.flat_dim), a.flat_dim),
            "fc1_b": np.zeros(a.hidden),
            "fc2_w": gaussian_init(rng, (a.hidden, a.hidden), a.hidden),
            "fc2_b": np.zeros(a.hidden),
            "out_w": gaussian_init(rng, (a.vocab_size, a.hidden), a.hidden),
            "out_b": np.zeros(a.vocab_size),
        }
        return cls(a, np.zeros((a.n_mels, a.frames)), weights)

    def copy(self):
        return WordCnnParams(self.arch, self.mean_spectrogram.copy(),
                             {k: v.copy() for k, v in self.weights.items()})

    def save(self, directory, **header):
        tensors = {"mean_spectrogram": self.mean_spectrogram, **self.weights}
        dataset_io.write_params(directory, tensors, {"kind": "wordcnn", "arch": asdict(self.arch), **header})

    @classmethod
    def load(cls, directory):
        tensors, header = dataset_io.read_params(directory)
        if header.get("kind") != "wordcnn":
            raise ParameterError(f"{directory} does not hold word CNN parameters")
        arch = CnnArch(**header["arch"])
        mean = tensors.pop("mean_spectrogram")
        return cls(arch, mean, tensors), header


def estimate_mean_spectrogram(spectrograms):
    specs = [np.asarray(s, dtype=np.float64) for s in spectrograms]
    if not specs:
        raise InputError("cannot estimate a mean from zero spectrograms")
    shape = specs[0].shape
    for i, s in enumerate(specs):
        if s.shape != shape or s.ndim != 2:
            raise ShapeError(f"spectrogram {i} has shape {s.shape}, expected {shape}")
    return np.mean(specs, axis=0)


# -- forward / backward ---------------------------------------------------------

def _check_input(specs, arch):
    x = np.asarray(specs, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (arch.n_mels, arch.frames):
        raise ShapeError(f"expected {arch.n_mels}x{arch.frames} spectrogram(s), got {np.shape(specs)}")
    return x, single


def _forward(x, params, mode, seed):
    a, p = params.arch, params.weights
    c = {"x0": (x - params.mean_spectrogram)[:, None]}
    c["conv"] = conv2d(c["x0"], p["conv_w"], p["conv_b"], pad_h=a.pad_h)
    c["relu"] = relu(c["conv"])
    c["lrn"] = lrn(c["relu"], a.lrn_size, a.lrn_alpha, a.lrn_beta, a.lrn_k)
    pooled, c["pool_arg"] = maxpool(c["lrn"], a.pool_h, a.pool_w, a.pool_stride_h, a.pool_stride_w)
    c["flat"] = pooled.reshape(len(x), -1)
    rng = np.random.default_rng(seed)
    c["fc1"] = fully_connected(c["flat"], p["fc1_w"], p["fc1_b"])
    h1, c["mask1"] = dropout(relu(c["fc1"]), a.dropout, mode, rng)
    c["h1"] = h1
    c["fc2"] = fully_connected(h1, p["fc2_w"], p["fc2_b"])
    h2, c["mask2"] = dropout(relu(c["fc2"]), a.dropout, mode, rng)
    c["h2"] = h2
    logits = fully_connected(h2, p["out_w"], p["out_b"])
    return logits, h2, c


def forward(specs, params, mode="eval", seed=0):
    """Logits and fc2 activations for one spectrogram or a batch.

    In train mode dropout masks are drawn from ``seed``; eval mode is
    deterministic and the returned embedding is the post-ReLU fc2 output.
    """
    x, single = _check_input(specs, params.arch)
    logits, emb, _ = _forward(x, params, mode, seed)
    return (logits[0], emb[0]) if single else (logits, emb)


def loss_and_grads(specs, labels, params, mode="train", seed=0):
    """Mean softmax cross-entropy over the batch and its gradient for every weight."""
    a, p = params.arch, params.weights
    x, _ = _check_input(specs, a)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (len(x),):
        raise ShapeError(f"{len(x)} inputs but labels of shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= a.vocab_size):
        raise ParameterError(f"labels must lie in [0, {a.vocab_size})")
    logits, _, c = _forward(x, params, mode, seed)
    loss, probs = softmax_xent(logits, labels)
    g = softmax_xent_backward(probs, labels).input_grad
    grads = {}
    out = fc_backward(g, c["h2"], p["out_w"])
    grads["out_w"], grads["out_b"] = out.param_grads["weight"], out.param_grads["bias"]
    g = relu_backward(dropout_backward(out.input_grad, c["mask2"]).input_grad, c["fc2"]).input_grad
    fc2 = fc_backward(g, c["h1"], p["fc2_w"])
    grads["fc2_w"], grads["fc2_b"] = fc2.param_grads["weight"], fc2.param_grads["bias"]
    g = relu_backward(dropout_backward(fc2.input_grad, c["mask1"]).input_grad, c["fc1"]).input_grad
    fc1 = fc_backward(g, c["flat"], p["fc1_w"])
    grads["fc1_w"], grads["fc1_b"] = fc1.param_grads["weight"], fc1.param_grads["bias"]
    g = fc1.input_grad.reshape((len(x), a.channels) + a.pool_shape)
    g = maxpool_backward(g, c["pool_arg"], c["lrn"].shape, a.pool_h, a.pool_w,
                         a.pool_stride_h, a.pool_stride_w).input_grad
    g = lrn_backward(g, c["relu"], a.lrn_size, a.lrn_alpha, a.lrn_beta, a.lrn_k).input_grad
    g = relu_backward(g, c["conv"]).input_grad
    conv = conv2d_backward(g, c["x0"], p["conv_w"], pad_h=a.pad_h)
    grads["conv_w"], grads["conv_b"] = conv.param_grads["filters"], conv.param_grads["bias"]
    return float(loss), grads


def embed_word(spec, params):
    """Eval-mode fc2 activations; nonnegative, length ``hidden``."""
    return forward(spec, params, "eval")[1]


def embed_words(specs, params, batch_size=64):
    specs = np.asarray(specs, dtype=np.float64)
    if len(specs) == 0:
        return np.zeros((0, params.arch.hidden))
    return np.concatenate([forward(specs[i:i + batch_size], params, "eval")[1]
                           for i in range(0, len(specs), batch_size)])


def predict_logits(specs, params, batch_size=64):
    specs = np.asarray(specs, dtype=np.float64)
    return np.concatenate([forward(specs[i:i + batch_size], params, "eval")[0]
                           for i in range(0, len(specs), batch_size)])


def topk_accuracy(logits, labels, k):
    """Fraction of rows whose label is among the k largest logits (ties favour lower index)."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == np.asarray(labels)[:, None], axis=1)))


# -- training ----------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    plateau_patience: int = 10  # epochs without a new best training loss before decaying
    decay_factor: float = 0.1
    target_train_top1: float | None = None  # stop once training top-1 reaches this

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0 or not 0 <= self.momentum < 1:
            raise ParameterError("need learning_rate > 0 and momentum in [0, 1)")
        if self.plateau_patience < 1 or not 0 < self.decay_factor <= 1:
            raise ParameterError("need plateau_patience >= 1 and decay_factor in (0, 1]")
        return self


@dataclass
class EpochStats:
    epoch: int
    loss: float
    learning_rate: float
    train_top1: float
    train_top5: float
    val_top1: float | None = None
    val_top5: float | None = None


@dataclass
class PretrainResult:
    params: WordCnnParams
    history: list[EpochStats] = field(default_factory=list)


def pretrain(specs, labels, vocab_size, config=None, val=None, arch=None, init=None):
    """Minibatch SGD with momentum on the mean cross-entropy.

    The mean spectrogram is estimated from ``specs`` unless ``init`` supplies
    parameters. Accuracies are measured in eval mode after every epoch; ``val``
    is an optional ``(specs, labels)`` pair. The learning rate drops by
    ``decay_factor`` after ``plateau_patience`` epochs without a new best loss.
    """
    config = (config or PretrainConfig()).validate()
    specs = np.asarray(specs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(specs) == 0:
        raise InputError("empty training set")
    if len(labels) != len(specs):
        raise ShapeError(f"{len(specs)} spectrograms but {len(labels)} labels")
    if np.any(labels < 0) or np.any(labels >= vocab_size):
        raise ParameterError(f"labels must lie in [0, {vocab_size})")
    if init is not None:
        params = init.copy()
    else:
        arch = arch or CnnArch(vocab_size, n_mels=specs.shape[1], frames=specs.shape[2])
        params = WordCnnParams.initialize(arch, config.seed)
        params.mean_spectrogram = estimate_mean_spectrogram(specs)
    state = OptimizerState(config.learning_rate, config.momentum)
    rng = np.random.default_rng([config.seed, 1])
    result = PretrainResult(params)
    best, stale = np.inf, 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(specs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            seed = int(rng.integers(2 ** 63))
            loss, grads = loss_and_grads(specs[idx], labels[idx], params, "train", seed)
            sgd_momentum_step(params.weights, grads, state)
            losses.append(loss * len(idx))
        mean_loss = float(np.sum(losses) / len(specs))
        logits = predict_logits(specs, params)
        stats = EpochStats(epoch + 1, mean_loss, state.learning_rate,
                           topk_accuracy(logits, labels, 1), topk_accuracy(logits, labels, 5))
        if val is not None and len(val[0]):
            vlogits = predict_logits(val[0], params)
            stats.val_top1 = topk_accuracy(vlogits, val[1], 1)
            stats.val_top5 = topk_accuracy(vlogits, val[1], 5)
        result.history.append(stats)
        log.info("epoch %d: loss %.4f top-1 %.3f top-5 %.3f", stats.epoch, mean_loss,
                 stats.train_top1, stats.train_top5)
        if config.target_train_top1 is not None and stats.train_top1 >= config.target_train_top1:
            break
        if mean_loss < best:
            best, stale = mean_loss, 0
        else:
            stale += 1
            if stale >= config.plateau_patience:
                state.learning_rate *= config.decay_factor
                stale = 0
    return result
