"""Image and caption records shared by the alignment, evaluation and I/O code."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

REGIONS_PER_IMAGE = 20


@dataclass
class ImageRecord:
    image_id: str
    regions: np.ndarray  # R x d_I
    region_boxes: np.ndarray | None = None  # R x 4 (x0, y0, x1, y1), display only

    def __post_init__(self):
        self.regions = np.asarray(self.regions, dtype=np.float64)
        if self.regions.ndim != 2 or self.regions.shape[0] < 1:
            raise ShapeError(f"image {self.image_id}: regions must be R x d_I, got {self.regions.shape}")

    @property
    def d_image(self):
        return self.regions.shape[1]


@dataclass
class CaptionRecord:
    caption_id: str
    image_id: str
    words: np.ndarray | None = None  # N_w x d_W word feature vectors
    spectrograms: np.ndarray | None = None  # N_w x 40 x 100
    word_texts: list[str] | None = field(default=None)

    def __post_init__(self):
        if self.words is None and self.spectrograms is None:
            raise ShapeError(f"caption {self.caption_id}: needs word vectors or spectrograms")
        if self.words is not None:
            self.words = np.asarray(self.words, dtype=np.float64)
            if self.words.ndim != 2 or self.words.shape[0] < 1:
                raise ShapeError(f"caption {self.caption_id}: words must be N_w x d_W with N_w >= 1, "
                                 f"got {self.words.shape}")
        if self.spectrograms is not None:
            self.spectrograms = np.asarray(self.spectrograms, dtype=np.float64)
            if self.spectrograms.ndim != 3 or self.spectrograms.shape[0] < 1:
                raise ShapeError(f"caption {self.caption_id}: spectrograms must be N_w x 40 x T")

    @property
    def n_words(self):
        return (self.words if self.words is not None else self.spectrograms).shape[0]
