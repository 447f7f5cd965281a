"""Pluggable model backends: a toy learnable detector and mock/file-backed zero-shot classifiers.

Nothing here touches a neural-network framework. The toy detector scores image
patches with a linear softmax over handcrafted histogram features; the
centroid classifier simulates an external zero-shot model by emitting noisy
class-centroid embeddings; the file classifier serves embeddings computed
elsewhere (e.g. by a real encoder) verbatim from disk.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Detection, OrientedBox
from .imageops import luma, rng_stream
from .pseudo_label import PromptSet, extract_patches, zero_shot_scores

log = logging.getLogger(__name__)

EMBED_MAGIC = b"SFEMBED1"
TENSOR_MAGIC = b"SFTENSR1"


# ---------------------------------------------------------------------------
# contracts

class Detector:
    """Contract: deterministic infer given fixed parameters, named-tensor params."""

    def infer(self, image: np.ndarray, proposals: list[OrientedBox]) -> list[Detection]:
        raise NotImplementedError

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to the named parameter tensors."""
        raise NotImplementedError

    def apply_gradient_step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        raise NotImplementedError


class ZeroShotClassifier:
    """Contract: embed image patches and class prompts into a shared D-dim space."""

    dim: int

    def embed_images(self, patches: np.ndarray, keys=None) -> np.ndarray:
        """Embed patches (N,C,H,W); `keys` carries per-patch metadata for mock
        or file-backed backends (true class ids / stored-patch ids) and is
        ignored by real encoders."""
        raise NotImplementedError

    def text_embeddings(self, prompts: PromptSet) -> np.ndarray:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# toy detector

@dataclass(frozen=True)
class FeatureSpec:
    """Patch descriptor: per-channel color histograms + gradient-orientation histogram."""

    color_bins: int = 8
    grad_bins: int = 4
    patch_size: int = 32

    @property
    def dim(self) -> int:
        return 3 * self.color_bins + self.grad_bins


def patch_features(patches: np.ndarray, spec: FeatureSpec = FeatureSpec()) -> np.ndarray:
    """(N,C,H,W) patches -> (N,F) histogram features, each block normalized to sum 1."""
    n = patches.shape[0]
    feats = np.zeros((n, spec.dim), dtype=np.float64)
    edges = np.linspace(0.0, 1.0, spec.color_bins + 1)
    for i in range(n):
        patch = np.asarray(patches[i], dtype=np.float64)
        cols = []
        for c in range(3):
            hist, _ = np.histogram(np.clip(patch[c], 0.0, 1.0), bins=edges)
            cols.append(hist / max(patch[c].size, 1))
        gray = luma(np.moveaxis(patch[:3], 0, 2))
        gy, gx = np.gradient(gray)
        mag = np.hypot(gx, gy)
        ang = np.mod(np.arctan2(gy, gx), np.pi)  # orientation is pi-periodic
        ghist, _ = np.histogram(ang, bins=np.linspace(0.0, np.pi, spec.grad_bins + 1), weights=mag)
        total = ghist.sum()
        if total > 0:
            ghist = ghist / total
        feats[i] = np.concatenate(cols + [ghist])
    return feats


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class LossTerms:
    """Total training loss and its two structural parts."""

    total: float
    classification: float
    objectness: float


BACKGROUND = -1  # target id for proposals with no assigned class


class ToyDetector(Detector):
    """Linear softmax over histogram features of per-proposal patches.

    Parameters: cls_w (K,F), cls_b (K) for the class head and obj_w (F),
    obj_b () for a binary objectness head, so the training loss decomposes
    into two summed terms (classification + objectness).
    """

    def __init__(self, num_classes: int, feature: FeatureSpec = FeatureSpec(),
                 init_seed: int | None = None, init_scale: float = 0.01):
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.num_classes = num_classes
        self.feature = feature
        f = feature.dim
        if init_seed is None:
            cls_w = np.zeros((num_classes, f))
            obj_w = np.zeros(f)
        else:
            rng = rng_stream(init_seed, "toy-detector-init")
            cls_w = init_scale * rng.standard_normal((num_classes, f))
            obj_w = init_scale * rng.standard_normal(f)
        self._params = {
            "cls_w": cls_w,
            "cls_b": np.zeros(num_classes),
            "obj_w": obj_w,
            "obj_b": np.zeros(()),
        }

    def parameters(self) -> dict[str, np.ndarray]:
        return self._params

    def set_parameters(self, params: dict[str, np.ndarray], copy: bool = True) -> None:
        expected = {k: v.shape for k, v in self._params.items()}
        got = {k: np.shape(v) for k, v in params.items()}
        if expected != got:
            raise ValueError(f"parameter spec mismatch: expected {expected}, got {got}")
        if copy:
            self._params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        else:
            self._params = params

    def clone(self) -> "ToyDetector":
        twin = ToyDetector(self.num_classes, self.feature)
        twin.set_parameters(self._params, copy=True)
        return twin

    def scores_for_features(self, feats: np.ndarray) -> np.ndarray:
        logits = feats @ self._params["cls_w"].T + self._params["cls_b"]
        return _softmax_rows(logits)

    def infer(self, image: np.ndarray, proposals: list[OrientedBox]) -> list[Detection]:
        if not proposals:
            return []
        patches, dropped = extract_patches(image, proposals, self.feature.patch_size)
        if dropped:
            log.debug("infer skipped %d zero-area proposals: %s", len(dropped), dropped)
        if patches.shape[0] == 0:
            return []
        kept = [p for i, p in enumerate(proposals) if i not in set(dropped)]
        scores = self.scores_for_features(patch_features(patches, self.feature))
        return [Detection(box, row) for box, row in zip(kept, scores)]

    def loss_and_grad(self, patches: np.ndarray, targets) -> tuple[LossTerms, dict[str, np.ndarray]]:
        """Cross-entropy over class targets plus binary objectness loss.

        targets: per-patch class id in [0,K), or BACKGROUND (-1) for negative
        proposals, which enter only the objectness term (target 0).
        """
        targets = np.asarray(targets, dtype=int)
        if patches.shape[0] != targets.shape[0]:
            raise ValueError(f"{patches.shape[0]} patches but {targets.shape[0]} targets")
        if targets.size and (targets.max() >= self.num_classes or targets.min() < BACKGROUND):
            raise ValueError(
                f"class ids must be in [0,{self.num_classes}) or {BACKGROUND}, got {targets}"
            )
        feats = patch_features(patches, self.feature)
        n = feats.shape[0]
        w, b = self._params["cls_w"], self._params["cls_b"]
        ow, ob = self._params["obj_w"], self._params["obj_b"]

        pos = np.nonzero(targets >= 0)[0]
        logits = feats @ w.T + b
        dlogits = np.zeros_like(logits)
        if pos.size:
            logp = _log_softmax_rows(logits[pos])
            cls_loss = float(-logp[np.arange(pos.size), targets[pos]].mean())
            probs = np.exp(logp)
            probs[np.arange(pos.size), targets[pos]] -= 1.0
            dlogits[pos] = probs / pos.size
        else:
            cls_loss = 0.0

        obj_logits = feats @ ow + ob
        obj_target = (targets >= 0).astype(np.float64)
        # stable BCE-with-logits: softplus(x) = log(1 + e^x)
        obj_losses = np.logaddexp(0.0, obj_logits) - obj_target * obj_logits
        obj_loss = float(obj_losses.mean()) if n else 0.0
        sig = 1.0 / (1.0 + np.exp(-obj_logits))
        dobj = (sig - obj_target) / max(n, 1)

        grads = {
            "cls_w": dlogits.T @ feats,
            "cls_b": dlogits.sum(axis=0),
            "obj_w": feats.T @ dobj,
            "obj_b": np.asarray(dobj.sum()),
        }
        return LossTerms(cls_loss + obj_loss, cls_loss, obj_loss), grads

    def apply_gradient_step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        if set(grads) != set(self._params):
            raise ValueError(f"gradient names {sorted(grads)} != parameter names {sorted(self._params)}")
        for name, g in grads.items():
            self._params[name] -= lr * np.asarray(g, dtype=np.float64)


class MomentumSgd:
    """Classic momentum SGD with optional L2 weight decay folded into the gradient."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, detector: Detector, grads: dict[str, np.ndarray], lr: float) -> None:
        params = detector.parameters()
        if not self.velocity:
            self.velocity = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in grads.items()}
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            self.velocity[name] = self.momentum * self.velocity[name] + g
        detector.apply_gradient_step(self.velocity, lr)


# ---------------------------------------------------------------------------
# centroid (mock zero-shot) classifier

class CentroidClassifier(ZeroShotClassifier):
    """Simulated zero-shot model: per-class unit centroids plus Gaussian noise.

    With sigma=0 it is a perfect oracle (each patch embeds exactly onto its
    class centroid). It stands in for an external pretrained encoder, so it is
    allowed to peek at the generation-time class of each patch, passed via
    `keys`. Noise draws consume a private stream, so reconstructing the
    classifier with the same seed replays the same noise sequence.
    """

    def __init__(self, num_classes: int, dim: int = 64, sigma: float = 0.0, seed: int = 0):
        if dim < num_classes:
            raise ValueError(f"dim ({dim}) must be >= num_classes ({num_classes})")
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.num_classes = num_classes
        self.dim = dim
        self.sigma = float(sigma)
        self.seed = seed
        base = rng_stream(seed, "centroids").standard_normal((dim, num_classes))
        q, _ = np.linalg.qr(base)
        self.centroids = q.T.copy()  # (K, D), orthonormal rows
        self._noise = rng_stream(seed, "centroid-noise")

    def text_embeddings(self, prompts: PromptSet) -> np.ndarray:
        if len(prompts) != self.num_classes:
            raise ValueError(
                f"classifier has {self.num_classes} classes but got {len(prompts)} prompts"
            )
        return self.centroids.copy()

    def embed_images(self, patches: np.ndarray, keys=None) -> np.ndarray:
        if keys is None:
            raise ValueError("CentroidClassifier needs per-patch true class ids via keys")
        labels = np.asarray(keys, dtype=int)
        if patches is not None and len(patches) != labels.shape[0]:
            raise ValueError("number of patches and keys differ")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"class ids out of range [0,{self.num_classes})")
        emb = self.centroids[labels].copy()
        if self.sigma > 0:
            emb += self.sigma * self._noise.standard_normal(emb.shape)
            emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        return emb


def centroid_accuracy(num_classes: int, dim: int, sigma: float, seed: int,
                      trials: int = 2000) -> float:
    """Monte-Carlo standalone accuracy of a CentroidClassifier at a given noise level."""
    clf = CentroidClassifier(num_classes, dim, sigma, seed)
    rng = rng_stream(seed, "accuracy-trials")
    labels = rng.integers(0, num_classes, size=trials)
    emb = clf.embed_images(None, keys=labels)
    scores = zero_shot_scores(emb, clf.centroids, temperature=100.0, normalized=(sigma > 0))
    return float((np.argmax(scores, axis=1) == labels).mean())


def calibrate_noise_sigma(target_accuracy: float, num_classes: int, dim: int, seed: int,
                          trials: int = 2000, iters: int = 24) -> float:
    """Bisect the noise level so the classifier's standalone accuracy hits a target."""
    if not (1.0 / num_classes < target_accuracy <= 1.0):
        raise ValueError("target accuracy must exceed chance and be <= 1")
    lo, hi = 0.0, 8.0
    for _ in range(iters):
        mid = (lo + hi) / 2.0
        acc = centroid_accuracy(num_classes, dim, mid, seed, trials)
        if acc > target_accuracy:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


# ---------------------------------------------------------------------------
# embedding / tensor file formats

def write_embedding_file(path, matrix: np.ndarray, normalized: bool) -> None:
    """Binary embedding matrix: magic, rows u32, dim u32, normalized u8, f32-LE data."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<IIB", matrix.shape[0], matrix.shape[1], int(bool(normalized))))
        fh.write(matrix.tobytes())


def read_embedding_file(path) -> tuple[np.ndarray, bool]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != EMBED_MAGIC:
            raise ValueError(f"{path}: not an embedding file (magic {magic!r})")
        header = fh.read(9)
        if len(header) < 9:
            raise ValueError(f"{path}: truncated header")
        rows, dim, normalized = struct.unpack("<IIB", header)
        payload = fh.read(rows * dim * 4)
        if len(payload) != rows * dim * 4:
            raise ValueError(f"{path}: truncated data (expected {rows}x{dim} float32)")
        extra = fh.read(1)
        if extra:
            raise ValueError(f"{path}: trailing bytes after {rows}x{dim} matrix")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).copy()
    return matrix, bool(normalized)


def write_named_tensors(path, params: dict[str, np.ndarray]) -> None:
    """Flat named-tensor file: magic, count u32, then (name, ndim, dims, f32-LE data) each."""
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.asarray(params[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<I", d))
        # data blocks after the full index, in the same sorted order
        for name in sorted(params):
            fh.write(np.asarray(params[name], dtype="<f4").tobytes(order="C"))


def read_named_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(8) != TENSOR_MAGIC:
            raise ValueError(f"{path}: not a named-tensor file")
        (count,) = struct.unpack("<I", fh.read(4))
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            dims = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            shapes.append((name, dims))
        out = {}
        for name, dims in shapes:
            size = int(np.prod(dims)) if dims else 1
            payload = fh.read(size * 4)
            if len(payload) != size * 4:
                raise ValueError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return out


# ---------------------------------------------------------------------------
# file-backed classifier

TEXT_EMB_FILE = "text.emb"
PATCH_EMB_FILE = "patches.emb"
PATCH_IDS_FILE = "patches.ids"


class FileEmbeddingClassifier(ZeroShotClassifier):
    """Serves embeddings computed externally; never fabricates a value."""

    def __init__(self, text_matrix: np.ndarray, text_normalized: bool,
                 patch_matrix: np.ndarray | None, patch_ids: list[str] | None):
        self.text_matrix = text_matrix
        self.text_normalized = text_normalized
        self.dim = text_matrix.shape[1]
        self._by_id: dict[str, int] = {}
        self.patch_matrix = patch_matrix
        if patch_matrix is not None:
            if patch_matrix.shape[1] != self.dim:
                raise ValueError(
                    f"patch embedding dim {patch_matrix.shape[1]} != text dim {self.dim}"
                )
            if patch_ids is None or len(patch_ids) != patch_matrix.shape[0]:
                raise ValueError("patch ids must match patch embedding rows one-to-one")
            self._by_id = {pid: i for i, pid in enumerate(patch_ids)}

    def text_embeddings(self, prompts: PromptSet) -> np.ndarray:
        if len(prompts) != self.text_matrix.shape[0]:
            raise ValueError(
                f"embedding file has {self.text_matrix.shape[0]} classes but "
                f"prompt set has {len(prompts)}"
            )
        return self.text_matrix.astype(np.float64)

    def embed_images(self, patches: np.ndarray, keys=None) -> np.ndarray:
        if keys is None:
            raise ValueError("FileEmbeddingClassifier needs stored patch ids via keys")
        if self.patch_matrix is None:
            raise ValueError("no patch embeddings were loaded")
        rows = []
        for pid in keys:
            if pid not in self._by_id:
                raise KeyError(f"no stored embedding for patch id {pid!r}")
            rows.append(self._by_id[pid])
        return self.patch_matrix[rows].astype(np.float64)


def load_file_embeddings(path) -> FileEmbeddingClassifier:
    """Load a classifier from a directory holding text.emb and optional patches.emb/.ids."""
    root = Path(path)
    text_path = root / TEXT_EMB_FILE
    if not text_path.exists():
        raise FileNotFoundError(f"{text_path}: missing class embedding file")
    text, text_norm = read_embedding_file(text_path)
    patch_path = root / PATCH_EMB_FILE
    ids_path = root / PATCH_IDS_FILE
    patches, ids = None, None
    if patch_path.exists():
        patches, _ = read_embedding_file(patch_path)
        if not ids_path.exists():
            raise FileNotFoundError(f"{ids_path}: patch embeddings present but ids file missing")
        ids = ids_path.read_text(encoding="utf-8").splitlines()
    return FileEmbeddingClassifier(text, text_norm, patches, ids)
