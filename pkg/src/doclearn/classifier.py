"""Template generation, nearest-template matching and thresholding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .data import Dataset
from .model import Model, forward_features

TEMPLATE_MAGIC = b"DOCTMPL\0"
DEFAULT_TEMPLATE_COUNT = 40


class TemplateError(ValueError):
    pass


class ModelMismatchError(TemplateError):
    pass


@dataclass
class TemplateSet:
    features: np.ndarray
    source_ids: np.ndarray
    model_hash: str
    normalize: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise TemplateError("template set must be a non-empty n x k matrix")
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def check_model(self, model: Model) -> None:
        if model.hash() != self.model_hash:
            raise ModelMismatchError("templates were extracted with a different model")


def _l2(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    return features / np.where(norms > 0, norms, 1.0)


def extract(model: Model, images: np.ndarray, normalize: bool = False) -> np.ndarray:
    """Features of each image, computed one at a time.

    BLAS kernels may round differently depending on batch size, so single
    images keep a sample's feature identical wherever it is extracted.
    """
    feats = np.concatenate([forward_features(model, images[i : i + 1]) for i in range(len(images))])
    return _l2(feats) if normalize else feats


def generate_templates(
    model: Model,
    target_train: Dataset,
    count: int = DEFAULT_TEMPLATE_COUNT,
    seed: int = 0,
    normalize: bool = False,
) -> TemplateSet:
    """Draw ``count`` training samples without replacement and store their features."""
    if count < 1:
        raise TemplateError("template count must be positive")
    if count > len(target_train):
        raise TemplateError(f"asked for {count} templates from {len(target_train)} samples")
    pick = np.sort(np.random.default_rng(seed).choice(len(target_train), size=count, replace=False))
    feats = extract(model, target_train.images[pick], normalize)
    return TemplateSet(feats, target_train.ids[pick], model.hash(), normalize)


def match_scores(features: np.ndarray, templates: TemplateSet, k: int = 1) -> np.ndarray:
    """Mean Euclidean distance to the ``k`` nearest templates (``k=1``: nearest)."""
    y = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if y.shape[1] != templates.dim:
        raise TemplateError(f"feature dimension {y.shape[1]} does not match templates ({templates.dim})")
    if not 1 <= k <= len(templates):
        raise TemplateError(f"k must lie in [1, {len(templates)}]")
    if templates.normalize:
        y = _l2(y)
    diff = y[:, None, :] - templates.features[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    if k == 1:
        return dist.min(axis=1)
    return np.sort(dist, axis=1)[:, :k].mean(axis=1)


def match_score(feature, templates: TemplateSet, k: int = 1) -> float:
    return float(match_scores(np.asarray(feature, dtype=np.float64)[None, :], templates, k)[0])


def score_images(model: Model, images: np.ndarray, templates: TemplateSet, k: int = 1) -> np.ndarray:
    templates.check_model(model)
    return match_scores(extract(model, images), templates, k)


def classify(score, delta: float):
    """1 (target) where ``score <= delta``, else 0."""
    out = (np.asarray(score) <= delta).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def save_templates(templates: TemplateSet, path, config: dict | None = None) -> None:
    header = {"model_hash": templates.model_hash, "normalize": templates.normalize, "config": config or {}}
    container.write(path, TEMPLATE_MAGIC, header, {"features": templates.features, "source_ids": templates.source_ids})


def load_templates(path) -> TemplateSet:
    header, arrays = container.read(path, TEMPLATE_MAGIC)
    return TemplateSet(arrays["features"], arrays["source_ids"], header["model_hash"], bool(header["normalize"]))
