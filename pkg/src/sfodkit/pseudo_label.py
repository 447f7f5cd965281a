"""Pseudo-label refinement: prompts, patch extraction, zero-shot scoring, score aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Detection, OrientedBox, clip_to_image, to_horizontal
from .imageops import resize_bilinear

DEFAULT_PROMPT_TEMPLATE = "An aerial image of a [Class]"
CLASS_PLACEHOLDER = "[Class]"


@dataclass(frozen=True)
class PromptSet:
    """Class names and the text prompts built from them, in matching order."""

    class_names: tuple[str, ...]
    prompts: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class PseudoLabel:
    """A detection that survived confidence filtering: box, assigned class, score."""

    box: OrientedBox
    class_id: int
    score: float


def build_prompts(class_names, template: str = DEFAULT_PROMPT_TEMPLATE) -> PromptSet:
    """Substitute each class name into the template, verbatim (no article fixing)."""
    names = tuple(str(n) for n in class_names)
    if not names:
        raise ValueError("class_names must be nonempty")
    count = template.count(CLASS_PLACEHOLDER)
    if count != 1:
        raise ValueError(
            f"template must contain {CLASS_PLACEHOLDER!r} exactly once, found {count}: {template!r}"
        )
    prompts = tuple(template.replace(CLASS_PLACEHOLDER, n) for n in names)
    return PromptSet(class_names=names, prompts=prompts)


def _crop_bounds(lo: float, hi: float, limit: int) -> tuple[int, int]:
    """Round a clipped interval to pixel indices, keeping at least one pixel."""
    i0 = int(round(lo))
    i1 = int(round(hi))
    i0 = max(0, min(i0, limit - 1))
    i1 = max(i0 + 1, min(i1, limit))
    return i0, i1


def extract_patches(image: np.ndarray, boxes, out_size: int) -> tuple[np.ndarray, list[int]]:
    """Crop the horizontal cover of each oriented box and resize to out_size x out_size.

    Per box: to_horizontal -> clip_to_image -> crop -> bilinear resize. Returns
    (patches, dropped): patches shaped (N, C, out_size, out_size) in input box
    order for boxes that survive clipping, and the indices of dropped boxes.
    """
    if image.ndim == 2:
        image = image[:, :, None]
    if image.size == 0:
        raise ValueError("image must be nonempty")
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    height, width = image.shape[:2]
    patches = []
    dropped: list[int] = []
    for idx, box in enumerate(boxes):
        clipped = clip_to_image(to_horizontal(box), width, height)
        if clipped is None:
            dropped.append(idx)
            continue
        x0, x1 = _crop_bounds(clipped.x0, clipped.x1, width)
        y0, y1 = _crop_bounds(clipped.y0, clipped.y1, height)
        crop = image[y0:y1, x0:x1]
        patch = resize_bilinear(crop, out_size, out_size)
        patches.append(np.moveaxis(patch, 2, 0))
    if not patches:
        return np.zeros((0, image.shape[2], out_size, out_size), dtype=image.dtype), dropped
    return np.stack(patches), dropped


def _normalize_rows(matrix: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    bad = np.where(norms < 1e-12)[0]
    if bad.size:
        raise ValueError(f"{what} row {int(bad[0])} has zero norm")
    return matrix / norms[:, None]


def zero_shot_scores(image_emb: np.ndarray, text_emb: np.ndarray,
                     temperature: float = 1.0, normalized: bool = False) -> np.ndarray:
    """Row-wise softmax of temperature * (image_emb @ text_emb.T) over unit-norm rows.

    Pass normalized=True when both matrices already have unit-norm rows to
    skip renormalization. Result rows are probability vectors (sum to 1).
    """
    image_emb = np.asarray(image_emb, dtype=np.float64)
    text_emb = np.asarray(text_emb, dtype=np.float64)
    if image_emb.ndim != 2 or text_emb.ndim != 2:
        raise ValueError("embeddings must be 2-D matrices")
    if image_emb.shape[1] != text_emb.shape[1]:
        raise ValueError(
            f"embedding dims differ: image D={image_emb.shape[1]}, text D={text_emb.shape[1]}"
        )
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not normalized:
        image_emb = _normalize_rows(image_emb, "image embedding")
        text_emb = _normalize_rows(text_emb, "text embedding")
    logits = temperature * (image_emb @ text_emb.T)
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    return exp / exp.sum(axis=1, keepdims=True)


def cga_refine(scores_w: np.ndarray, scores_c: np.ndarray, lam: float) -> np.ndarray:
    """Blend detector scores with zero-shot scores where the two disagree on the argmax.

    Rows whose argmax classes agree are copied from scores_w unchanged; the
    rest become (1 - lam) * scores_w + lam * scores_c. Argmax ties resolve to
    the lowest class index.
    """
    scores_w = np.asarray(scores_w, dtype=np.float64)
    scores_c = np.asarray(scores_c, dtype=np.float64)
    if scores_w.shape != scores_c.shape:
        raise ValueError(f"score shapes differ: {scores_w.shape} vs {scores_c.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0,1], got {lam}")
    agree = np.argmax(scores_w, axis=-1) == np.argmax(scores_c, axis=-1)
    out = (1.0 - lam) * scores_w + lam * scores_c
    out[agree] = scores_w[agree]
    return out


def filter_by_confidence(dets: list[Detection], tau: float) -> list[PseudoLabel]:
    """Keep detections whose max refined score reaches tau, sorted by score descending."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0,1], got {tau}")
    kept = [
        PseudoLabel(box=d.box, class_id=d.top_class, score=d.top_score)
        for d in dets
        if d.top_score >= tau
    ]
    kept.sort(key=lambda p: -p.score)
    return kept
