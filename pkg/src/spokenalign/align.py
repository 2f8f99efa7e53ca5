"""Region/word embedding transforms, image-caption similarity, the max-margin
ranking cost with analytic gradients, SGD fitting and word-to-region
alignment inference.

Similarity of image k and caption l::

    S[k, l] = sum over words t of caption l of max(0, max_i y_i . x_t)

where ``y_i = W_m v_i + b_m`` embeds region i of image k and
``x_t = relu(W_d w_t + b_d)`` embeds (unit-normalized) word t.
"""
from __future__ import annotations

import html
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataset_io
from .errors import DataError, ParameterError, ShapeError
from .tensor import OptimizerState, gaussian_init, sgd_momentum_step

log = logging.getLogger(__name__)

MARGIN = 1.0
PARAM_NAMES = ("W_m", "b_m", "W_d", "b_d")
# K x R x L x N score blocks are evaluated in chunks of about this many cells
_CHUNK_CELLS = 1 << 22


@dataclass
class AlignParams:
    W_m: np.ndarray
    b_m: np.ndarray
    W_d: np.ndarray
    b_d: np.ndarray

    def __post_init__(self):
        h = self.W_m.shape[0]
        if h < 1 or self.b_m.shape != (h,) or self.W_d.shape[0] != h or self.b_d.shape != (h,):
            raise ShapeError(f"inconsistent alignment parameter shapes: W_m {self.W_m.shape}, b_m {self.b_m.shape}, "
                             f"W_d {self.W_d.shape}, b_d {self.b_d.shape}")

    @property
    def h(self):
        return self.W_m.shape[0]

    @property
    def d_image(self):
        return self.W_m.shape[1]

    @property
    def d_word(self):
        return self.W_d.shape[1]

    @classmethod
    def initialize(cls, h, d_image, d_word, seed=0):
        rng = np.random.default_rng([seed, 0])
        return cls(gaussian_init(rng, (h, d_image), d_image), np.zeros(h),
                   gaussian_init(rng, (h, d_word), d_word), np.zeros(h))

    @classmethod
    def zeros(cls, h, d_image, d_word):
        return cls(np.zeros((h, d_image)), np.zeros(h), np.zeros((h, d_word)), np.zeros(h))

    def as_dict(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return AlignParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def save(self, directory, **header):
        meta = {"kind": "align", "h": self.h, "d_I": self.d_image, "d_W": self.d_word}
        meta.update(header)
        dataset_io.write_params(directory, self.as_dict(), meta)

    @classmethod
    def load(cls, directory):
        tensors, header = dataset_io.read_params(directory)
        if header.get("kind") != "align":
            raise DataError(f"{directory}: not an alignment parameter set")
        return cls(**{name: tensors[name].astype(np.float64) for name in PARAM_NAMES}), header


@dataclass
class WordAlignment:
    word_index: int
    region_index: int
    score: float

    @property
    def displayable(self):
        return self.score > 0


@dataclass
class FitConfig:
    h: int = 512
    learning_rate: float = 1e-6
    momentum: float = 0.9
    batch_images: int = 40
    epochs: int = 20
    seed: int = 0
    normalize_words: bool = True

    def validate(self):
        if self.h < 1:
            raise ParameterError("h must be >= 1")
        if self.batch_images < 1:
            raise ParameterError("batch_images must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        OptimizerState(self.learning_rate, self.momentum)
        return self


@dataclass
class FitResult:
    params: AlignParams
    epoch_costs: list[float] = field(default_factory=list)
    config: FitConfig | None = None


# -- embeddings ----------------------------------------------------------------

def embed_region(v, params):
    """y = W_m v + b_m for one region vector or an R x d_I stack."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != params.d_image:
        raise ShapeError(f"region vector has dim {v.shape[-1]}, model expects d_I = {params.d_image}")
    return v @ params.W_m.T + params.b_m


def normalize_words(w):
    w = np.asarray(w, dtype=np.float64)
    norm = np.linalg.norm(w, axis=-1, keepdims=True)
    return np.divide(w, norm, out=w.copy(), where=norm > 0)


def _word_preactivation(w, params, normalize):
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != params.d_word:
        raise ShapeError(f"word vector has dim {w.shape[-1]}, model expects d_W = {params.d_word}")
    w_hat = normalize_words(w) if normalize else w
    return w_hat, w_hat @ params.W_d.T + params.b_d


def embed_word_vec(w, params, normalize=True):
    """x = relu(W_d w + b_d), with w scaled to unit length first when asked."""
    return np.maximum(_word_preactivation(w, params, normalize)[1], 0.0)


# -- scoring -------------------------------------------------------------------

def _stack(blocks, width):
    n = max(b.shape[0] for b in blocks)
    out = np.zeros((len(blocks), n, width))
    mask = np.zeros((len(blocks), n), dtype=bool)
    for i, b in enumerate(blocks):
        out[i, :b.shape[0]] = b
        mask[i, :b.shape[0]] = True
    return out, mask


def region_word_scores(Y, X):
    """Inner products y_i . x_t for every image k, region i, caption l, word t.

    Y is K x R x h, X is L x N x h; the result is K x R x L x N. Coordinates
    are accumulated left to right so every entry matches a plain scalar loop
    bit for bit, independent of batch shape.
    """
    acc = np.zeros((Y.shape[0], Y.shape[1], X.shape[0], X.shape[1]))
    for d in range(Y.shape[2]):
        acc += Y[:, :, None, None, d] * X[None, None, :, :, d]
    return acc


@dataclass
class _Scored:
    S: np.ndarray  # K x L
    best: np.ndarray  # K x L x N, max over regions (before thresholding)
    argbest: np.ndarray  # K x L x N, lowest-index argmax region
    word_mask: np.ndarray  # L x N


def _score_embedded(Y, region_mask, X, word_mask):
    K, L = Y.shape[0], X.shape[0]
    N = X.shape[1]
    best = np.empty((K, L, N))
    argbest = np.empty((K, L, N), dtype=np.int64)
    per_image = max(1, Y.shape[1] * L * N)
    step = max(1, _CHUNK_CELLS // per_image)
    for k0 in range(0, K, step):
        sl = slice(k0, k0 + step)
        scores = region_word_scores(Y[sl], X)
        scores[~region_mask[sl]] = -np.inf
        argbest[sl] = scores.argmax(axis=1)
        best[sl] = np.take_along_axis(scores, argbest[sl][:, None], axis=1)[:, 0]
    contrib = np.where(word_mask[None], np.maximum(best, 0.0), 0.0)
    S = np.zeros((K, L))
    for t in range(N):
        S += contrib[:, :, t]
    return _Scored(S, best, argbest, word_mask)


def _embed_images(images, params):
    return _stack([embed_region(img.regions, params) for img in images], params.h)


def _embed_captions(captions, params, normalize):
    return _stack([embed_word_vec(_words(cap), params, normalize) for cap in captions], params.h)


def _words(caption):
    if caption.words is None:
        raise DataError(f"caption {caption.caption_id} has spectrograms but no word vectors; run the word CNN first")
    return caption.words


def score_matrix(images, captions, params, normalize=True):
    """K x L similarity of every image against every caption."""
    if not images or not captions:
        return np.zeros((len(images), len(captions)))
    Y, rmask = _embed_images(images, params)
    X, wmask = _embed_captions(captions, params, normalize)
    return _score_embedded(Y, rmask, X, wmask).S


def image_caption_similarity(image, caption, params, normalize=True):
    return float(score_matrix([image], [caption], params, normalize)[0, 0])


def batch_similarity(images, captions, params, normalize=True):
    """B x B matrix whose [k, l] entry scores image k against caption l."""
    if len(images) != len(captions):
        raise ParameterError(f"batch has {len(images)} images but {len(captions)} captions")
    return score_matrix(images, captions, params, normalize)


# -- cost ------------------------------------------------------------------

def _hinges(S):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {S.shape}")
    diag = np.diag(S)[:, None]
    offdiag = ~np.eye(S.shape[0], dtype=bool)
    by_caption = np.where(offdiag, S - diag + MARGIN, 0.0)  # [k, l]: S_kl - S_kk + 1
    by_image = np.where(offdiag, S.T - diag + MARGIN, 0.0)  # [k, l]: S_lk - S_kk + 1
    return by_caption, by_image


def margin_cost(S):
    """Bidirectional hinge ranking cost; the l == k terms are left out."""
    by_caption, by_image = _hinges(S)
    return float(np.maximum(by_caption, 0.0).sum() + np.maximum(by_image, 0.0).sum())


def margin_cost_grad(S):
    """Subgradient of margin_cost with respect to every S entry (0 at hinge corners)."""
    by_caption, by_image = _hinges(S)
    a = (by_caption > 0).astype(np.float64)
    b = (by_image > 0).astype(np.float64)
    grad = a + b.T
    grad[np.diag_indices_from(grad)] -= a.sum(axis=1) + b.sum(axis=1)
    return grad


def cost_gradients(images, captions, params, normalize=True):
    """Cost of a matched batch and its gradients for W_m, b_m, W_d, b_d.

    Gradient flows only through the best region of each word (lowest index on
    ties) and only where the word's score is positive.
    """
    if len(images) != len(captions):
        raise ParameterError(f"batch has {len(images)} images but {len(captions)} captions")
    if not images:
        raise ParameterError("empty batch")
    V, rmask = _stack([np.asarray(img.regions, dtype=np.float64) for img in images], params.d_image)
    Y, _ = _embed_images(images, params)
    pre = [_word_preactivation(_words(cap), params, normalize) for cap in captions]
    W_hat, wmask = _stack([p[0] for p in pre], params.d_word)
    Z, _ = _stack([p[1] for p in pre], params.h)
    X = np.maximum(Z, 0.0) * wmask[..., None]

    scored = _score_embedded(Y, rmask, X, wmask)
    cost = margin_cost(scored.S)
    G = margin_cost_grad(scored.S)

    active = (scored.best > 0) & wmask[None]
    weight = np.where(active, G[:, :, None], 0.0)  # K x L x N
    R = Y.shape[1]
    routed = weight[:, None] * (scored.argbest[:, None] == np.arange(R)[None, :, None, None])  # K x R x L x N
    dY = np.einsum("kilt,lth->kih", routed, X)
    dX = np.einsum("kilt,kih->lth", routed, Y)
    dZ = dX * (Z > 0) * wmask[..., None]
    grads = {
        "W_m": np.einsum("kih,kid->hd", dY, V),
        "b_m": dY.sum(axis=(0, 1)),
        "W_d": np.einsum("lth,ltd->hd", dZ, W_hat),
        "b_d": dZ.sum(axis=(0, 1)),
    }
    return cost, grads


# -- training --------------------------------------------------------------

def group_captions(images, captions):
    by_image = {img.image_id: [] for img in images}
    for cap in captions:
        if cap.image_id in by_image:
            by_image[cap.image_id].append(cap)
    empty = [i for i, caps in by_image.items() if not caps]
    if empty:
        raise DataError(f"{len(empty)} image(s) have no captions, e.g. {empty[0]}")
    return by_image


def fit(images, captions, config=None, init=None, on_epoch=None):
    """Minibatch SGD with momentum on the margin cost.

    Each epoch shuffles the images; every batch draws one of each image's
    captions uniformly at random. Returns the fitted parameters and the mean
    batch cost of every epoch. Bit-deterministic for a fixed seed.
    ``on_epoch(epoch, params, cost)`` is called after every epoch.
    """
    config = (config or FitConfig()).validate()
    if not images:
        raise DataError("no training images")
    by_image = group_captions(images, captions)
    d_word = _words(next(iter(by_image.values()))[0]).shape[1]
    params = init.copy() if init is not None else AlignParams.initialize(
        config.h, images[0].d_image, d_word, config.seed)
    state = OptimizerState(config.learning_rate, config.momentum)
    rng = np.random.default_rng([config.seed, 1])
    result = FitResult(params, [], config)
    tensors = params.as_dict()
    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        costs = []
        for start in range(0, len(order), config.batch_images):
            batch = [images[i] for i in order[start:start + config.batch_images]]
            caps = [by_image[img.image_id][rng.integers(len(by_image[img.image_id]))] for img in batch]
            cost, grads = cost_gradients(batch, caps, params, config.normalize_words)
            sgd_momentum_step(tensors, grads, state)
            costs.append(cost)
        result.epoch_costs.append(float(np.mean(costs)))
        log.info("epoch %d: mean batch cost %.4f", epoch + 1, result.epoch_costs[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, params, result.epoch_costs[-1])
    return result


# -- alignment inference ---------------------------------------------------

def infer_alignment(image, caption, params, normalize=True):
    """Best region and its score for each caption word, in word order."""
    Y, rmask = _embed_images([image], params)
    X, wmask = _embed_captions([caption], params, normalize)
    scored = _score_embedded(Y, rmask, X, wmask)
    return [WordAlignment(t, int(scored.argbest[0, 0, t]), float(scored.best[0, 0, t]))
            for t in range(caption.n_words)]


def alignments_to_json(entries):
    """``entries`` is a list of (image, caption, alignments) triples."""
    out = []
    for image, caption, aligns in entries:
        out.append({
            "image_id": image.image_id,
            "caption_id": caption.caption_id,
            "alignments": [
                {"word_index": a.word_index, "region_index": a.region_index, "score": a.score,
                 **({"word_text": caption.word_texts[a.word_index]} if caption.word_texts else {})}
                for a in aligns],
        })
    return out


def _default_boxes(n):
    cols = 5
    return np.array([[(i % cols) * 80 + 5, (i // cols) * 60 + 5, (i % cols) * 80 + 75, (i // cols) * 60 + 55]
                     for i in range(n)], dtype=float)


def alignment_svg(image, caption, aligns):
    """SVG drawing of region boxes, caption words, and a link per positive score."""
    boxes = image.region_boxes if image.region_boxes is not None else _default_boxes(image.regions.shape[0])
    right = float(boxes[:, 2].max()) + 60
    row_h = 22
    height = max(float(boxes[:, 3].max()) + 10, row_h * (len(aligns) + 1))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{right + 220:.0f}" height="{height:.0f}">']
    for i, (x0, y0, x1, y1) in enumerate(boxes):
        parts.append(f'<rect x="{x0:.1f}" y="{y0:.1f}" width="{x1 - x0:.1f}" height="{y1 - y0:.1f}" '
                     f'fill="none" stroke="#888"/><text x="{x0 + 3:.1f}" y="{y0 + 12:.1f}" '
                     f'font-size="10">{i}</text>')
    for a in aligns:
        label = caption.word_texts[a.word_index] if caption.word_texts else f"w{a.word_index}"
        y = row_h * (a.word_index + 1)
        parts.append(f'<text x="{right:.1f}" y="{y:.1f}" font-size="12">'
                     f'{html.escape(label)} ({a.score:.2f})</text>')
        if a.displayable:
            x0, y0, x1, y1 = boxes[a.region_index]
            parts.append(f'<line x1="{right - 4:.1f}" y1="{y - 4:.1f}" x2="{(x0 + x1) / 2:.1f}" '
                         f'y2="{(y0 + y1) / 2:.1f}" stroke="#c33"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def save_fit(result, directory):
    directory = Path(directory)
    result.params.save(directory, seed=result.config.seed, config=asdict(result.config))
    (directory / "trace.json").write_text(json.dumps({"epoch_costs": result.epoch_costs}, indent=2) + "\n")
