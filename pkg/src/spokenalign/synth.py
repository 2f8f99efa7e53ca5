"""Synthetic datasets with planted image/caption correspondence, plus labelled
tone-pattern spectrograms for exercising the word CNN.

Every concept owns a unit-norm prototype in each modality. An image holds
``words_per_caption`` salient concepts, each in ``salient_copies`` random
region slots, and fills the remaining slots with background concepts that no
caption ever mentions. Each caption of the image names the salient concepts in
a fresh random order.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataset_io
from .errors import ConfigError
from .frontend import normalize_spectrogram
from .records import CaptionRecord, ImageRecord

MAX_PROTOTYPE_TRIES = 1000


@dataclass
class SynthConfig:
    n_concepts: int = 10
    d_I: int = 64
    d_W: int = 32
    regions_per_image: int = 20
    words_per_caption: int = 4
    salient_copies: int = 1  # regions per salient concept, like overlapping detections
    noise_sigma: float = 0.05
    n_images: int = 300
    captions_per_image: int = 5
    seed: int = 0
    n_filler_concepts: int | None = None  # defaults to n_concepts
    max_cosine: float = 0.5

    @property
    def n_fill(self):
        return self.regions_per_image - self.words_per_caption * self.salient_copies

    @property
    def fillers(self):
        return self.n_concepts if self.n_filler_concepts is None else self.n_filler_concepts

    def validate(self):
        if self.n_concepts < 2:
            raise ConfigError("n_concepts must be >= 2")
        if self.words_per_caption < 1 or self.salient_copies < 1:
            raise ConfigError("words_per_caption and salient_copies must be >= 1")
        if self.words_per_caption * self.salient_copies > self.regions_per_image:
            raise ConfigError("words_per_caption * salient_copies must not exceed regions_per_image")
        if self.words_per_caption > self.n_concepts:
            raise ConfigError("words_per_caption cannot exceed n_concepts (salient concepts are distinct)")
        if self.n_fill > 0 and self.fillers < 1:
            raise ConfigError("filler regions need at least one filler concept")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.n_images < 0 or self.captions_per_image < 1:
            raise ConfigError("need n_images >= 0 and captions_per_image >= 1")
        if min(self.d_I, self.d_W) < 1:
            raise ConfigError("feature dims must be >= 1")
        return self


@dataclass
class GroundTruth:
    region_concepts: dict[str, list[int]] = field(default_factory=dict)
    word_concepts: dict[str, list[int]] = field(default_factory=dict)
    n_concepts: int = 0

    def to_json(self):
        return {"n_concepts": self.n_concepts, "region_concepts": self.region_concepts,
                "word_concepts": self.word_concepts}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["region_concepts"], doc["word_concepts"], doc["n_concepts"])


@dataclass
class SynthDataset:
    images: list[ImageRecord]
    captions: list[CaptionRecord]
    truth: GroundTruth
    image_prototypes: np.ndarray
    word_prototypes: np.ndarray
    config: SynthConfig


def unit_prototypes(rng, count, dim, max_cosine=0.5):
    """``count`` unit vectors whose pairwise cosines all stay below ``max_cosine``."""
    protos = []
    for _ in range(count):
        for _ in range(MAX_PROTOTYPE_TRIES):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if all(float(v @ p) < max_cosine for p in protos):
                protos.append(v)
                break
        else:
            raise ConfigError(f"could not place {count} prototypes in {dim} dims with cosine < {max_cosine} "
                              f"after {MAX_PROTOTYPE_TRIES} tries")
    return np.array(protos).reshape(count, dim)


def image_id(i):
    return f"img{i:05d}"


def generate(cfg=None):
    cfg = (cfg or SynthConfig()).validate()
    proto_rng = np.random.default_rng([cfg.seed, 1])
    # concepts 0..n_concepts-1 are nameable, the rest are background
    image_protos = unit_prototypes(proto_rng, cfg.n_concepts + cfg.fillers, cfg.d_I, cfg.max_cosine)
    word_protos = unit_prototypes(proto_rng, cfg.n_concepts, cfg.d_W, cfg.max_cosine)

    images, captions, truth = [], [], GroundTruth(n_concepts=cfg.n_concepts)
    for i in range(cfg.n_images):
        rng = np.random.default_rng([cfg.seed, 2, i])
        salient = rng.choice(cfg.n_concepts, cfg.words_per_caption, replace=False)
        fillers = cfg.n_concepts + rng.integers(cfg.fillers, size=cfg.n_fill)
        concepts = np.concatenate([np.repeat(salient, cfg.salient_copies), fillers])
        concepts = concepts[rng.permutation(cfg.regions_per_image)]
        regions = image_protos[concepts] + cfg.noise_sigma * rng.standard_normal((cfg.regions_per_image, cfg.d_I))
        iid = image_id(i)
        images.append(ImageRecord(iid, regions))
        truth.region_concepts[iid] = [int(c) for c in concepts]
        for j in range(cfg.captions_per_image):
            order = salient[rng.permutation(cfg.words_per_caption)]
            words = word_protos[order] + cfg.noise_sigma * rng.standard_normal((cfg.words_per_caption, cfg.d_W))
            cid = f"{iid}_c{j}"
            captions.append(CaptionRecord(cid, iid, words=words, word_texts=[f"concept{c}" for c in order]))
            truth.word_concepts[cid] = [int(c) for c in order]
    return SynthDataset(images, captions, truth, image_protos, word_protos, cfg)


def split(dataset, n_first):
    """Split by image order into two datasets sharing prototypes."""
    keep = [{img.image_id for img in dataset.images[:n_first]}, {img.image_id for img in dataset.images[n_first:]}]
    parts = []
    for ids in keep:
        images = [img for img in dataset.images if img.image_id in ids]
        captions = [cap for cap in dataset.captions if cap.image_id in ids]
        truth = GroundTruth({k: v for k, v in dataset.truth.region_concepts.items() if k in ids},
                            {c.caption_id: dataset.truth.word_concepts[c.caption_id] for c in captions},
                            dataset.truth.n_concepts)
        parts.append(SynthDataset(images, captions, truth, dataset.image_prototypes,
                                  dataset.word_prototypes, dataset.config))
    return parts[0], parts[1]


def oracle_alignment(images, captions, truth):
    """For every caption, the set of region indices sharing each word's concept."""
    out = {}
    for cap in captions:
        regions = truth.region_concepts[cap.image_id]
        out[cap.caption_id] = [{i for i, c in enumerate(regions) if c == concept}
                               for concept in truth.word_concepts[cap.caption_id]]
    return out


def write(directory, dataset, manifest_name="manifest.jsonl"):
    directory = Path(directory)
    path = dataset_io.write_dataset(directory, dataset.images, dataset.captions, manifest_name)
    sidecar = path.with_name(path.stem + ".truth.json")
    sidecar.write_text(json.dumps(dataset.truth.to_json(), sort_keys=True) + "\n")
    return path


def read_truth(manifest_path):
    path = Path(manifest_path)
    return GroundTruth.from_json(json.loads(path.with_name(path.stem + ".truth.json").read_text()))


# -- tone-pattern spectrograms for the word CNN ---------------------------------

@dataclass
class ToneConfig:
    n_classes: int = 50
    per_class: int = 5
    tones_per_class: int = 3
    noise_sigma: float = 0.3
    max_shift: int = 3
    seed: int = 0
    n_mels: int = 40
    frames: int = 100


def tone_templates(cfg):
    """One additive tone pattern per class: Gaussian ridges in frequency over a time span."""
    rng = np.random.default_rng([cfg.seed, 3])
    band = np.arange(cfg.n_mels)[:, None]
    frame = np.arange(cfg.frames)[None, :]
    templates = np.zeros((cfg.n_classes, cfg.n_mels, cfg.frames))
    for c in range(cfg.n_classes):
        for _ in range(cfg.tones_per_class):
            centre = rng.uniform(2, cfg.n_mels - 2)
            start = int(rng.integers(0, cfg.frames - 30))
            length = int(rng.integers(15, 40))
            amp = rng.uniform(1.0, 3.0)
            span = (frame >= start) & (frame < start + length)
            templates[c] += amp * np.exp(-0.5 * ((band - centre) / 1.5) ** 2) * span
    return templates


def tone_example(templates, label, cfg, rng):
    shift = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))
    grid = np.roll(templates[label], shift, axis=1) + cfg.noise_sigma * rng.standard_normal(templates.shape[1:])
    return normalize_spectrogram(grid)


def tone_dataset(cfg=None, split_id=0):
    """``per_class`` normalized 40 x 100 examples of each class, with labels.

    Different ``split_id`` values draw fresh noise and shifts for the same
    class templates, giving held-out examples.
    """
    cfg = cfg or ToneConfig()
    templates = tone_templates(cfg)
    specs, labels = [], []
    for c in range(cfg.n_classes):
        for k in range(cfg.per_class):
            rng = np.random.default_rng([cfg.seed, 4, split_id, c, k])
            specs.append(tone_example(templates, c, cfg, rng))
            labels.append(c)
    return np.array(specs), np.array(labels, dtype=np.int64)


def config_dict(cfg):
    return asdict(cfg)


# -- spoken captions --------------------------------------------------------------

@dataclass
class AudioConfig:
    tones_per_word: int = 2
    tone_low_hz: float = 250.0
    tone_high_hz: float = 3500.0
    tone_ms: tuple[int, int] = (100, 180)
    gap_ms: int = 60
    pitch_jitter: float = 0.02
    noise: float = 0.005
    seed: int = 0


def word_tone_templates(n_concepts, cfg):
    """Per concept, a fixed sequence of (frequency Hz, duration ms) tones."""
    rng = np.random.default_rng([cfg.seed, 5])
    log_lo, log_hi = np.log(cfg.tone_low_hz), np.log(cfg.tone_high_hz)
    return [[(float(np.exp(rng.uniform(log_lo, log_hi))), int(rng.integers(cfg.tone_ms[0], cfg.tone_ms[1] + 1)))
             for _ in range(cfg.tones_per_word)] for _ in range(n_concepts)]


def speak_word(template, cfg, rng, sample_rate=16000):
    parts = []
    for freq, ms in template:
        f = freq * (1.0 + cfg.pitch_jitter * rng.standard_normal())
        n = int(ms * sample_rate // 1000)
        t = np.arange(n) / sample_rate
        env = np.sin(np.pi * np.arange(n) / n) ** 2
        parts.append(0.3 * env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)))
    return np.concatenate(parts)


def speak_caption(concepts, templates, cfg, rng, sample_rate=16000):
    """Waveform of a caption and the (start_ms, end_ms) span of every word."""
    per_ms = sample_rate // 1000
    gap = np.zeros(cfg.gap_ms * per_ms)
    chunks, spans, pos = [gap], [], len(gap)
    for c in concepts:
        word = speak_word(templates[c], cfg, rng, sample_rate)
        spans.append((pos // per_ms, (pos + len(word)) // per_ms))
        chunks += [word, gap]
        pos += len(word) + len(gap)
    samples = np.concatenate(chunks)
    return samples + cfg.noise * rng.standard_normal(len(samples)), spans


def write_spoken(directory, dataset, audio_cfg=None, audio_dir="audio", features_dir="spectrograms",
                 splits=None):
    """Write region tensors, caption audio, a segment list and per-split manifests.

    Manifest captions point at ``<features_dir>/<segment_id>.mmtf``, the files
    ``featurize`` produces from the segment list. ``splits`` maps a split name
    to a SynthDataset; by default the whole dataset is one split "all".
    """
    from .frontend import write_wav

    audio_cfg = audio_cfg or AudioConfig()
    directory = Path(directory)
    (directory / audio_dir).mkdir(parents=True, exist_ok=True)
    templates = word_tone_templates(dataset.config.n_concepts, audio_cfg)
    rows = ["wav,start_ms,end_ms,word,segment_id\n"]
    splits = splits or {"all": dataset}
    for name, part in splits.items():
        sdir = directory / name
        (sdir / "tensors").mkdir(parents=True, exist_ok=True)
        by_image = {img.image_id: [] for img in part.images}
        for cap in part.captions:
            by_image[cap.image_id].append(cap)
        entries = []
        for img in part.images:
            region_rel = f"tensors/{img.image_id}.regions.mmtf"
            dataset_io.write_tensor(sdir / region_rel, img.regions)
            caps = []
            for cap in by_image[img.image_id]:
                concepts = part.truth.word_concepts[cap.caption_id]
                rng = np.random.default_rng([audio_cfg.seed, 6, zlib.crc32(cap.caption_id.encode())])
                samples, spans = speak_caption(concepts, templates, audio_cfg, rng)
                wav_name = f"{cap.caption_id}.wav"
                write_wav(directory / audio_dir / wav_name, samples)
                paths = []
                for j, (start, end) in enumerate(spans):
                    seg = f"{cap.caption_id}.w{j:03d}"
                    rows.append(f"{wav_name},{start},{end},concept{concepts[j]},{seg}\n")
                    paths.append(f"../{features_dir}/{seg}.mmtf")
                caps.append({"caption_id": cap.caption_id, "spectrogram_paths": paths,
                             "word_texts": [f"concept{c}" for c in concepts]})
            entries.append({"image_id": img.image_id, "region_tensor_path": region_rel, "captions": caps})
        dataset_io.write_manifest(sdir / "manifest.jsonl", entries)
        (sdir / "manifest.truth.json").write_text(json.dumps(part.truth.to_json(), sort_keys=True) + "\n")
    (directory / "segments.csv").write_text("".join(rows))
    return directory / "segments.csv"
