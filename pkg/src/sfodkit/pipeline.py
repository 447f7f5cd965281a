"""End-to-end orchestration: synthetic scenes, source training, mean-teacher adaptation.

The desk-scale stand-ins are explicit and documented: proposals come from
jittered ground truth plus random distractors (proposal learning is out of
scope), and the mock zero-shot classifier is allowed to look up each patch's
generation-time class, standing in for an external pretrained model's
knowledge. The adaptation loop itself (teacher, student, EMA, thresholding)
never reads ground truth.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .augment import AugmentConfig, strong_augment, weak_augment
from .backends import (
    BACKGROUND,
    CentroidClassifier,
    MomentumSgd,
    ToyDetector,
    ZeroShotClassifier,
)
from .corrupt import CorruptionSpec, corrupt_image, file_seed
from .ema import ema_init, ema_update
from .evaluation import EvalResult, GtBox, evaluate
from .geometry import Detection, OrientedBox, nms_rotated, rotated_iou
from .imageops import hsv_to_rgb, rng_stream, value_noise
from .pseudo_label import (
    PseudoLabel,
    build_prompts,
    cga_refine,
    extract_patches,
    filter_by_confidence,
    zero_shot_scores,
)

SHAPE_CYCLE = ("rectangle", "ellipse", "diamond")


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class PipelineConfig:
    """All knobs for adaptation runs; defaults follow the standard recipe."""

    num_classes: int = 4
    image_size: int = 96
    tau: float = 0.7
    lam: float = 0.2
    alpha: float = 0.998
    nms_iou: float = 0.1
    temperature: float = 100.0
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 2
    epochs: int = 1
    steps: int | None = None  # overrides epochs when set
    ema_stride: int = 1
    seed: int = 0
    use_cga: bool = True
    classifier_sigma: float = 0.0
    embed_dim: int = 64
    patch_size: int = 32
    # proposal source (ground-truth jitter + distractors)
    proposals_per_gt: int = 2
    jitter_center: float = 0.08
    jitter_size: float = 0.08
    jitter_angle: float = 0.08
    distractors: int = 2
    negatives_per_image: int = 2
    # source-model training recipe
    source_epochs: int = 3
    source_lr: float = 0.5
    source_batch: int = 8
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        checks = [
            ("num_classes", 2 <= self.num_classes <= 16),
            ("image_size", self.image_size >= 32),
            ("tau", 0.0 <= self.tau <= 1.0),
            ("lam", 0.0 <= self.lam <= 1.0),
            ("alpha", 0.0 <= self.alpha <= 1.0),
            ("nms_iou", 0.0 < self.nms_iou <= 1.0),
            ("temperature", self.temperature > 0),
            ("learning_rate", self.learning_rate > 0),
            ("momentum", 0.0 <= self.momentum < 1.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("batch_size", self.batch_size >= 1),
            ("epochs", self.epochs >= 1),
            ("steps", self.steps is None or self.steps >= 1),
            ("ema_stride", self.ema_stride >= 1),
            ("classifier_sigma", self.classifier_sigma >= 0),
            ("embed_dim", self.embed_dim >= self.num_classes),
            ("patch_size", self.patch_size >= 4),
            ("proposals_per_gt", self.proposals_per_gt >= 1),
            ("distractors", self.distractors >= 0),
            ("negatives_per_image", self.negatives_per_image >= 0),
            ("source_epochs", self.source_epochs >= 1),
            ("source_lr", self.source_lr > 0),
            ("source_batch", self.source_batch >= 1),
        ]
        for key, ok in checks:
            if not ok:
                raise ValueError(f"config key '{key}' has invalid value {getattr(self, key)!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"config key '{sorted(unknown)[0]}' is not recognized")
        if "augment" in data and isinstance(data["augment"], dict):
            aug = dict(data["augment"])
            aug_known = set(AugmentConfig.__dataclass_fields__)
            bad = set(aug) - aug_known
            if bad:
                raise ValueError(f"config key 'augment.{sorted(bad)[0]}' is not recognized")
            for tup_key in ("blur_sigma", "cutout_count", "cutout_fill"):
                if tup_key in aug and isinstance(aug[tup_key], list):
                    aug[tup_key] = tuple(aug[tup_key])
            data["augment"] = AugmentConfig(**aug)
        if "steps" in data and data["steps"] is not None:
            data["steps"] = int(data["steps"])
        cfg = cls(**data)
        cfg.validate()
        return cfg


def class_names(num_classes: int) -> list[str]:
    """Deterministic names for the synthetic classes (hue bucket + shape)."""
    return [f"{SHAPE_CYCLE[k % len(SHAPE_CYCLE)]}-{k:02d}" for k in range(num_classes)]


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class SyntheticScene:
    """A rendered target image with its generation-time ground truth."""

    image: np.ndarray  # (H, W, 3) float32 in [0,1]
    gt: list[GtBox]
    seed: int


def _shape_mask(box: OrientedBox, shape: str, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = xs - box.cx, ys - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    hw, hh = box.w / 2.0, box.h / 2.0
    if shape == "rectangle":
        return (np.abs(u) <= hw) & (np.abs(v) <= hh)
    if shape == "ellipse":
        return (u / hw) ** 2 + (v / hh) ** 2 <= 1.0
    if shape == "diamond":
        return np.abs(u) / hw + np.abs(v) / hh <= 1.0
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(num_classes: int, rng: np.random.Generator, size: int = 96,
                 max_shapes: int = 8) -> tuple[np.ndarray, list[GtBox]]:
    """Textured background plus 1..max_shapes colored shapes with tight oriented boxes."""
    bg_hue = 0.25 + 0.1 * rng.random()
    bg = value_noise(size, size, rng, octaves=4, base_cells=5)
    image = hsv_to_rgb(np.stack([
        np.full((size, size), bg_hue),
        np.full((size, size), 0.15),
        0.35 + 0.25 * bg,
    ], axis=-1))
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    gt: list[GtBox] = []
    n_shapes = int(rng.integers(1, max_shapes + 1))
    for _ in range(n_shapes):
        for _attempt in range(40):
            w = rng.uniform(0.14, 0.30) * size
            h = rng.uniform(0.14, 0.30) * size
            margin = math.hypot(w, h) / 2.0 + 1.0
            if 2 * margin >= size:
                continue
            box = OrientedBox(
                cx=rng.uniform(margin, size - margin),
                cy=rng.uniform(margin, size - margin),
                w=w, h=h,
                theta=rng.uniform(-math.pi / 2, math.pi / 2),
            )
            if all(rotated_iou(box, g.box) < 0.05 for g in gt):
                break
        else:
            continue
        cls = int(rng.integers(0, num_classes))
        hue = cls / num_classes
        shape = SHAPE_CYCLE[cls % len(SHAPE_CYCLE)]
        mask = _shape_mask(box, shape, ys, xs)
        texture = 0.75 + 0.2 * rng.random(mask.shape)
        color = hsv_to_rgb(np.stack([
            np.full(mask.shape, hue),
            np.full(mask.shape, 0.85),
            0.9 * texture,
        ], axis=-1))
        image = np.where(mask[:, :, None], color, image)
        gt.append(GtBox(box=box, class_id=cls))
    return image.astype(np.float32), gt


def generate_scenes(n: int, num_classes: int, seed: int, size: int = 96) -> list[SyntheticScene]:
    """n reproducible scenes; scene i depends only on (seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 2 <= num_classes <= 16:
        raise ValueError("num_classes must be in [2,16]")
    scenes = []
    for i in range(n):
        rng = rng_stream(seed, "scene", i)
        image, gt = render_scene(num_classes, rng, size=size)
        scenes.append(SyntheticScene(image=image, gt=gt, seed=seed))
    return scenes


def corrupted_scene(scene: SyntheticScene, kind: str, severity: int, seed: int,
                    index: int) -> SyntheticScene:
    """Corrupt the pixels; ground truth passes through untouched (label-preserving)."""
    spec = CorruptionSpec(kind, severity, file_seed(seed, f"scene-{index}", kind))
    return SyntheticScene(image=corrupt_image(scene.image, spec), gt=scene.gt, seed=scene.seed)


# ---------------------------------------------------------------------------
# proposal source and label plumbing for the desk-scale surrogates

def make_proposals(gt_boxes: list[OrientedBox], image_size: int, rng: np.random.Generator,
                   cfg: PipelineConfig) -> list[OrientedBox]:
    """Jittered copies of the ground-truth boxes plus uniform random distractors."""
    proposals = []
    for box in gt_boxes:
        for _ in range(cfg.proposals_per_gt):
            w = max(4.0, box.w * math.exp(cfg.jitter_size * rng.standard_normal()))
            h = max(4.0, box.h * math.exp(cfg.jitter_size * rng.standard_normal()))
            proposals.append(OrientedBox(
                cx=float(np.clip(box.cx + cfg.jitter_center * box.w * rng.standard_normal(), 1, image_size - 1)),
                cy=float(np.clip(box.cy + cfg.jitter_center * box.h * rng.standard_normal(), 1, image_size - 1)),
                w=w, h=h,
                theta=box.theta + cfg.jitter_angle * rng.standard_normal(),
            ))
    for _ in range(cfg.distractors):
        proposals.append(OrientedBox(
            cx=rng.uniform(0.15, 0.85) * image_size,
            cy=rng.uniform(0.15, 0.85) * image_size,
            w=rng.uniform(0.12, 0.3) * image_size,
            h=rng.uniform(0.12, 0.3) * image_size,
            theta=rng.uniform(-math.pi / 2, math.pi / 2),
        ))
    return proposals


def true_classes_for_boxes(boxes: list[OrientedBox], gts: list[GtBox],
                           num_classes: int) -> list[int]:
    """Generation-time class per box: the best-overlapping GT's class.

    Boxes that touch no GT (background) get a deterministic pseudo-class from
    their coordinates, mimicking a zero-shot model's confident guess on a
    background crop.
    """
    out = []
    for box in boxes:
        best_iou, best_cls = 0.0, None
        for gt in gts:
            iou = rotated_iou(box, gt.box)
            if iou > best_iou:
                best_iou, best_cls = iou, gt.class_id
        if best_cls is None:
            key = f"{box.cx:.4f}|{box.cy:.4f}|{box.w:.4f}|{box.h:.4f}|{box.theta:.4f}"
            best_cls = int(rng_stream(0, "bg-class", key).integers(0, num_classes))
        out.append(best_cls)
    return out


def assign_training_labels(proposals: list[OrientedBox], gts: list[GtBox],
                           pos_iou: float = 0.4) -> list[int]:
    """Best-IoU class when overlap reaches pos_iou, else BACKGROUND."""
    labels = []
    for box in proposals:
        best_iou, best_cls = 0.0, BACKGROUND
        for gt in gts:
            iou = rotated_iou(box, gt.box)
            if iou > best_iou:
                best_iou, best_cls = iou, gt.class_id
        labels.append(best_cls if best_iou >= pos_iou else BACKGROUND)
    return labels


def sample_background_boxes(avoid: list[OrientedBox], image_size: int,
                            rng: np.random.Generator, count: int) -> list[OrientedBox]:
    boxes = []
    for _ in range(count):
        for _attempt in range(10):
            box = OrientedBox(
                cx=rng.uniform(0.15, 0.85) * image_size,
                cy=rng.uniform(0.15, 0.85) * image_size,
                w=rng.uniform(0.12, 0.28) * image_size,
                h=rng.uniform(0.12, 0.28) * image_size,
                theta=rng.uniform(-math.pi / 2, math.pi / 2),
            )
            if all(rotated_iou(box, a) <= 0.1 for a in avoid):
                boxes.append(box)
                break
    return boxes


# ---------------------------------------------------------------------------
# source training and direct testing

def train_source(scenes: list[SyntheticScene], cfg: PipelineConfig) -> ToyDetector:
    """Supervised training of the toy detector on labeled (source-domain) scenes."""
    cfg.validate()
    detector = ToyDetector(cfg.num_classes, feature=_feature_spec(cfg))
    optimizer = MomentumSgd(cfg.momentum)
    n = len(scenes)
    steps = cfg.source_epochs * max(1, math.ceil(n / cfg.source_batch))
    order = []
    for step in range(steps):
        if not order:
            epoch = step * cfg.source_batch // max(n, 1)
            order = list(rng_stream(cfg.seed, "source-order", epoch).permutation(n))
        batch = [order.pop() for _ in range(min(cfg.source_batch, len(order)))]
        grads_acc, count = None, 0
        for i in batch:
            scene = scenes[i]
            rng = rng_stream(cfg.seed, "source-proposals", step, i)
            proposals = make_proposals([g.box for g in scene.gt], cfg.image_size, rng, cfg)
            labels = assign_training_labels(proposals, scene.gt)
            patches, dropped = extract_patches(scene.image, proposals, cfg.patch_size)
            if patches.shape[0] == 0:
                continue
            kept_labels = [l for j, l in enumerate(labels) if j not in set(dropped)]
            _, grads = detector.loss_and_grad(patches, kept_labels)
            grads_acc = _accumulate(grads_acc, grads)
            count += 1
        if count:
            optimizer.step(detector, _scale(grads_acc, 1.0 / count), cfg.source_lr)
    return detector


def _feature_spec(cfg: PipelineConfig):
    from .backends import FeatureSpec
    return FeatureSpec(patch_size=cfg.patch_size)


def _accumulate(acc, grads):
    if acc is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        acc[k] += v
    return acc


def _scale(grads, factor):
    return {k: v * factor for k, v in grads.items()}


def detections_to_labels(dets: list[Detection]) -> list[PseudoLabel]:
    return filter_by_confidence(dets, 0.0)


def direct_test(detector: ToyDetector, scenes: list[SyntheticScene],
                cfg: PipelineConfig, eval_tag: str = "eval") -> EvalResult:
    """Evaluate a frozen detector: infer, NMS, argmax scoring, VOC matching."""
    dets_per_image, gts_per_image = [], []
    for i, scene in enumerate(scenes):
        rng = rng_stream(cfg.seed, f"{eval_tag}-proposals", i)
        proposals = make_proposals([g.box for g in scene.gt], cfg.image_size, rng, cfg)
        dets = nms_rotated(detector.infer(scene.image, proposals), cfg.nms_iou)
        dets_per_image.append(detections_to_labels(dets))
        gts_per_image.append(scene.gt)
    return evaluate(dets_per_image, gts_per_image, cfg.num_classes)


# ---------------------------------------------------------------------------
# the self-training loop

@dataclass(frozen=True)
class StepRecord:
    step: int
    pseudo_count: int
    agreement: float  # teacher-vs-zero-shot argmax agreement; nan when CGA is off
    loss_total: float
    loss_classification: float
    loss_objectness: float
    skipped: bool


@dataclass
class RunReport:
    steps: list[StepRecord] = field(default_factory=list)
    final_eval: EvalResult | None = None

    @property
    def total_pseudo_labels(self) -> int:
        return sum(r.pseudo_count for r in self.steps)

    @property
    def skipped_steps(self) -> int:
        return sum(1 for r in self.steps if r.skipped)


def _teacher_labels_for_batch(cfg: PipelineConfig, teacher: ToyDetector,
                              classifier: ZeroShotClassifier | None, scene: SyntheticScene,
                              step: int, index: int):
    """One image's pseudo-label pipeline on the weak view.

    Returns (weak image, pseudo labels, post-NMS detection count, agreement
    pairs): agreement pairs counts (n_agree, n_total) between teacher and
    zero-shot argmax over refinable boxes.
    """
    weak_img, weak_gt_boxes = weak_augment(
        scene.image, [g.box for g in scene.gt], rng_stream(cfg.seed, "weak", step, index)
    )
    weak_gts = [GtBox(b, g.class_id, g.difficult) for b, g in zip(weak_gt_boxes, scene.gt)]
    prop_rng = rng_stream(cfg.seed, "proposals", step, index)
    proposals = make_proposals(weak_gt_boxes, cfg.image_size, prop_rng, cfg)
    dets = nms_rotated(teacher.infer(weak_img, proposals), cfg.nms_iou)
    agree_pairs = (0, 0)
    if dets and classifier is not None and cfg.use_cga:
        boxes = [d.box for d in dets]
        patches, dropped = extract_patches(weak_img, boxes, cfg.patch_size)
        kept_rows = [i for i in range(len(boxes)) if i not in set(dropped)]
        if kept_rows:
            keys = _classifier_keys(classifier, [boxes[i] for i in kept_rows], weak_gts, cfg)
            image_emb = classifier.embed_images(patches, keys=keys)
            text_emb = classifier.text_embeddings(build_prompts(class_names(cfg.num_classes)))
            scores_c = zero_shot_scores(image_emb, text_emb, cfg.temperature)
            scores_w = np.stack([dets[i].scores for i in kept_rows])
            refined = cga_refine(scores_w, scores_c, cfg.lam)
            n_agree = int((np.argmax(scores_w, 1) == np.argmax(scores_c, 1)).sum())
            agree_pairs = (n_agree, len(kept_rows))
            for row, i in enumerate(kept_rows):
                dets[i] = Detection(dets[i].box, refined[row])
    pseudo = filter_by_confidence(dets, cfg.tau)
    return weak_img, pseudo, len(dets), agree_pairs


def _classifier_keys(classifier: ZeroShotClassifier, boxes, weak_gts, cfg: PipelineConfig):
    if isinstance(classifier, CentroidClassifier):
        return true_classes_for_boxes(boxes, weak_gts, cfg.num_classes)
    # file-backed or real classifiers key patches however they were stored
    return None


def self_train(cfg: PipelineConfig, teacher: ToyDetector, student: ToyDetector,
               classifier: ZeroShotClassifier | None,
               scenes: list[SyntheticScene]) -> tuple[RunReport, ToyDetector]:
    """Mean-teacher adaptation on unlabeled target scenes.

    Per step and image: weak augment, teacher inference + NMS, optional
    zero-shot score aggregation, tau filtering, strong augment, student
    gradient step on the surviving pseudo-labels, then an EMA update of the
    teacher. Returns the per-step report and the adapted teacher.
    """
    cfg.validate()
    if cfg.use_cga and classifier is None:
        raise ValueError("use_cga requires a zero-shot classifier")
    ema = ema_init(teacher.parameters(), cfg.alpha)
    teacher.set_parameters(ema.teacher_params, copy=False)
    optimizer = MomentumSgd(cfg.momentum, cfg.weight_decay)
    n = len(scenes)
    if n == 0:
        raise ValueError("need at least one target scene")
    steps = cfg.steps if cfg.steps is not None else cfg.epochs * max(1, math.ceil(n / cfg.batch_size))
    report = RunReport()
    order: list[int] = []
    epoch = 0
    for step in range(steps):
        if len(order) < cfg.batch_size:
            order = order + list(rng_stream(cfg.seed, "batch-order", epoch).permutation(n))
            epoch += 1
        batch, order = order[:cfg.batch_size], order[cfg.batch_size:]
        grads_acc, img_count = None, 0
        pseudo_total, agree_n, agree_d = 0, 0, 0
        loss_sum = np.zeros(3)
        for index in batch:
            scene = scenes[index]
            weak_img, pseudo, _, agree = _teacher_labels_for_batch(
                cfg, teacher, classifier, scene, step, index
            )
            agree_n += agree[0]
            agree_d += agree[1]
            if not pseudo:
                continue
            pseudo_total += len(pseudo)
            strong_img = strong_augment(
                weak_img, rng_stream(cfg.seed, "strong", step, index), cfg.augment
            )
            boxes = [p.box for p in pseudo]
            targets = [p.class_id for p in pseudo]
            neg_rng = rng_stream(cfg.seed, "negatives", step, index)
            negatives = sample_background_boxes(boxes, cfg.image_size, neg_rng,
                                                cfg.negatives_per_image)
            patches, dropped = extract_patches(strong_img, boxes + negatives, cfg.patch_size)
            if patches.shape[0] == 0:
                continue
            all_targets = targets + [BACKGROUND] * len(negatives)
            kept_targets = [t for j, t in enumerate(all_targets) if j not in set(dropped)]
            loss, grads = student.loss_and_grad(patches, kept_targets)
            if not math.isfinite(loss.total):
                raise RuntimeError(
                    f"non-finite student loss at step {step} (cls={loss.classification}, "
                    f"obj={loss.objectness}); lower the learning rate"
                )
            loss_sum += (loss.total, loss.classification, loss.objectness)
            grads_acc = _accumulate(grads_acc, grads)
            img_count += 1
        skipped = img_count == 0
        if not skipped:
            optimizer.step(student, _scale(grads_acc, 1.0 / img_count), cfg.learning_rate)
            if (step + 1) % cfg.ema_stride == 0:
                ema_update(ema, student.parameters())
        agreement = agree_n / agree_d if agree_d else float("nan")
        mean_loss = loss_sum / img_count if img_count else np.full(3, float("nan"))
        report.steps.append(StepRecord(
            step=step, pseudo_count=pseudo_total, agreement=float(agreement),
            loss_total=float(mean_loss[0]), loss_classification=float(mean_loss[1]),
            loss_objectness=float(mean_loss[2]), skipped=skipped,
        ))
    return report, teacher


# ---------------------------------------------------------------------------
# sweeps and the experiment matrix

def make_classifier(cfg: PipelineConfig) -> CentroidClassifier:
    return CentroidClassifier(cfg.num_classes, cfg.embed_dim, cfg.classifier_sigma, cfg.seed)


def adapt_from_source(cfg: PipelineConfig, source: ToyDetector,
                      scenes: list[SyntheticScene]) -> tuple[RunReport, ToyDetector]:
    """Clone the source into teacher and student, build the classifier, run self_train."""
    teacher, student = source.clone(), source.clone()
    classifier = make_classifier(cfg) if cfg.use_cga else None
    return self_train(cfg, teacher, student, classifier, scenes)


def lambda_sweep(cfg: PipelineConfig, lambdas, source: ToyDetector,
                 train_scenes: list[SyntheticScene],
                 test_scenes: list[SyntheticScene]) -> dict[float, EvalResult]:
    """Re-run adaptation per lambda with identical seeds; report final mAP per lambda."""
    if len(list(lambdas)) < 2:
        raise ValueError("need at least 2 lambda values")
    results: dict[float, EvalResult] = {}
    for lam in lambdas:
        run_cfg = replace(cfg, lam=float(lam), use_cga=True)
        _, teacher = adapt_from_source(run_cfg, source, train_scenes)
        results[float(lam)] = direct_test(teacher, test_scenes, run_cfg)
    return results


METHODS = ("direct", "self_train", "cga")


def run_experiment_matrix(methods, kinds, cfg: PipelineConfig, n_scenes: int = 200,
                          train_frac: float = 0.7, severity: int = 3,
                          ) -> tuple[dict[str, dict[str, EvalResult]], EvalResult]:
    """Per (method, kind): adapt on the corrupted train split, evaluate on the corrupted test split.

    Returns (results[method][kind], clean direct-test baseline).
    """
    cfg.validate()
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    scenes = generate_scenes(n_scenes, cfg.num_classes, cfg.seed, cfg.image_size)
    n_train = int(len(scenes) * train_frac)
    train_clean, test_clean = scenes[:n_train], scenes[n_train:]
    source = train_source(train_clean, cfg)
    clean_direct = direct_test(source, test_clean, cfg, eval_tag="clean-eval")
    results: dict[str, dict[str, EvalResult]] = {m: {} for m in methods}
    for kind in kinds:
        train_c = [corrupted_scene(s, kind, severity, cfg.seed, i)
                   for i, s in enumerate(train_clean)]
        test_c = [corrupted_scene(s, kind, severity, cfg.seed, n_train + i)
                  for i, s in enumerate(test_clean)]
        for method in methods:
            if method == "direct":
                results[method][kind] = direct_test(source, test_c, cfg)
            elif method == "self_train":
                run_cfg = replace(cfg, use_cga=False)
                _, teacher = adapt_from_source(run_cfg, source, train_c)
                results[method][kind] = direct_test(teacher, test_c, run_cfg)
            else:
                _, teacher = adapt_from_source(cfg, source, train_c)
                results[method][kind] = direct_test(teacher, test_c, cfg)
    return results, clean_direct


# ---------------------------------------------------------------------------
# report serialization (byte-stable: repr for floats)

REPORT_HEADER = "sfodkit-run-report v1"


def format_run_report(report: RunReport) -> str:
    lines = [REPORT_HEADER,
             "step\tpseudo\tagreement\tloss\tloss_cls\tloss_obj\tskipped"]
    for r in report.steps:
        lines.append(
            f"{r.step}\t{r.pseudo_count}\t{r.agreement!r}\t{r.loss_total!r}"
            f"\t{r.loss_classification!r}\t{r.loss_objectness!r}\t{int(r.skipped)}"
        )
    lines.append(f"summary\tsteps={len(report.steps)}"
                 f"\tpseudo_total={report.total_pseudo_labels}"
                 f"\tskipped={report.skipped_steps}")
    if report.final_eval is not None:
        aps = ",".join(repr(float(a)) for a in report.final_eval.per_class_ap)
        lines.append(f"final\tmap={report.final_eval.mean_ap!r}\tper_class={aps}")
    return "\n".join(lines) + "\n"


def write_run_report(path, report: RunReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_run_report(report))
