"""Corpus-wide class frequencies and per-pixel reconstruction weight masks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ClassCatalog, LabeledImage, validate_labels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeightMask:
    values: np.ndarray  # H x W, float64 in [0, 1]
    source_labels_id: str = ""


def class_counts(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64).ravel(), minlength=num_classes)[:num_classes]


def compute_class_frequencies(source: Sequence[LabeledImage], catalog: ClassCatalog) -> ClassCatalog:
    """Return ``catalog`` with each class's share of all source pixels filled in.

    Counting is over the whole source corpus, not per image. Per-image counts
    are integers and merged by summation, so the result does not depend on
    the order of ``source``.
    """
    if len(source) == 0:
        raise ValueError("cannot compute class frequencies of an empty source set")
    totals = np.zeros(catalog.num_classes, dtype=np.int64)
    for s in source:
        validate_labels(s.labels, catalog, s.id)
        totals += class_counts(s.labels, catalog.num_classes)
    n = int(totals.sum())
    freqs = totals / n
    if np.count_nonzero(totals) == 1:
        log.warning("source corpus holds a single class; the weighted source reconstruction term will vanish")
    return catalog.with_frequencies(freqs.tolist())


def build_weight_mask(labels: np.ndarray, catalog: ClassCatalog, sample_id: str = "") -> WeightMask:
    """Per-pixel lookup ``w[i, j] = freq[labels[i, j]]``.

    The reconstruction loss consumes ``1 - w``, so rare classes are held
    closest to their input appearance.
    """
    if not catalog.has_frequencies:
        raise ValueError("catalog frequencies are not populated; run compute_class_frequencies first")
    validate_labels(np.asarray(labels), catalog, sample_id or "labels")
    return WeightMask(catalog.frequencies[np.asarray(labels, dtype=np.int64)], sample_id)
