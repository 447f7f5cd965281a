"""Command-line surface: dataset corruption, scene synthesis, adaptation, evaluation, ablations."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backends, corrupt, evaluation, pipeline
from .imageops import load_image, save_image_png

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_IO = 3


class ConfigError(ValueError):
    pass


def _load_config(args) -> pipeline.PipelineConfig:
    """Config file first, then CLI flags override individual keys."""
    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} does not exist")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config key '<root>' is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config key '<root>' must be a JSON object")
    overrides = {
        "seed": args.seed,
        "tau": getattr(args, "tau", None),
        "lam": getattr(args, "lam", None),
        "alpha": getattr(args, "alpha", None),
        "learning_rate": getattr(args, "learning_rate", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "num_classes": getattr(args, "num_classes", None),
        "image_size": getattr(args, "image_size", None),
        "classifier_sigma": getattr(args, "classifier_sigma", None),
    }
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    if getattr(args, "no_cga", False):
        data["use_cga"] = False
    try:
        return pipeline.PipelineConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _prepare_out(args, cfg: pipeline.PipelineConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = dict(cfg.to_dict())
    resolved["command"] = args.command
    (out / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out


def _scene_paths(root: Path):
    return sorted(root.glob("scene*.png"))


def _load_scene_dir(root: Path) -> list[pipeline.SyntheticScene]:
    scenes = []
    paths = _scene_paths(root)
    if not paths:
        raise FileNotFoundError(f"no scene*.png images under {root}")
    for img_path in paths:
        gt_path = img_path.with_suffix(".txt")
        if not gt_path.exists():
            raise FileNotFoundError(f"missing ground-truth file {gt_path}")
        scenes.append(pipeline.SyntheticScene(
            image=load_image(img_path),
            gt=evaluation.read_ground_truth(gt_path),
            seed=0,
        ))
    return scenes


# ---------------------------------------------------------------------------
# subcommands

def cmd_corrupt(args) -> int:
    kinds = list(corrupt.KINDS) if args.kinds == "all" else args.kinds.split(",")
    entries = corrupt.generate_dataset(args.src, args.dst, kinds, args.severity, args.seed)
    resolved = {"command": "corrupt", "src": str(args.src), "kinds": kinds,
                "severity": args.severity, "seed": args.seed}
    (Path(args.dst) / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    failed = sum(1 for e in entries if e.sha256 == "FAILED")
    print(f"wrote {len(entries) - failed} files ({failed} failed) under {args.dst}")
    return EXIT_OK


def cmd_scenes(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args, cfg)
    scenes = pipeline.generate_scenes(args.count, cfg.num_classes, cfg.seed, cfg.image_size)
    for i, scene in enumerate(scenes):
        save_image_png(out / f"scene{i:05d}.png", scene.image)
        evaluation.write_ground_truth(out / f"scene{i:05d}.txt", scene.gt)
    print(f"wrote {len(scenes)} scenes under {out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args, cfg)
    if args.scenes:
        scenes = _load_scene_dir(Path(args.scenes))
    else:
        scenes = pipeline.generate_scenes(args.count, cfg.num_classes, cfg.seed, cfg.image_size)
    n_train = max(1, int(len(scenes) * 0.7))
    train, test = scenes[:n_train], scenes[n_train:]
    source = pipeline.train_source(train, cfg)
    if args.kind:
        train = [pipeline.corrupted_scene(s, args.kind, args.severity, cfg.seed, i)
                 for i, s in enumerate(train)]
        test = [pipeline.corrupted_scene(s, args.kind, args.severity, cfg.seed, n_train + i)
                for i, s in enumerate(test)]
    report, teacher = pipeline.adapt_from_source(cfg, source, train)
    if test:
        report.final_eval = pipeline.direct_test(teacher, test, cfg)
    pipeline.write_run_report(out / "run_report.txt", report)
    backends.write_named_tensors(out / "teacher_params.tensors", teacher.parameters())
    if report.final_eval is not None:
        print(f"adapted mAP {report.final_eval.mean_ap:.4f} "
              f"({report.total_pseudo_labels} pseudo-labels, {report.skipped_steps} skipped steps)")
    else:
        print(f"adaptation finished ({report.total_pseudo_labels} pseudo-labels)")
    return EXIT_OK


def cmd_eval(args) -> int:
    det_dir, gt_dir = Path(args.dets), Path(args.gts)
    det_files = sorted(det_dir.glob("*.txt"))
    if not det_files:
        raise FileNotFoundError(f"no detection files under {det_dir}")
    dets, gts = [], []
    for det_path in det_files:
        gt_path = gt_dir / det_path.name
        if not gt_path.exists():
            raise FileNotFoundError(f"missing ground-truth file {gt_path}")
        dets.append(evaluation.read_detections(det_path))
        gts.append(evaluation.read_ground_truth(gt_path))
    num_classes = args.num_classes
    if num_classes is None:
        seen = [g.class_id for per in gts for g in per] + [d.class_id for per in dets for d in per]
        num_classes = max(seen) + 1 if seen else 1
    result = evaluation.evaluate(dets, gts, num_classes, use_07_metric=args.voc07)
    for cls, ap in enumerate(result.per_class_ap):
        print(f"class {cls}: AP {ap:.4f}" if not np.isnan(ap) else f"class {cls}: AP nan (no gt)")
    print(f"mAP {result.mean_ap:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args, cfg)
    lambdas = [float(v) for v in args.lambdas.split(",")]
    scenes = pipeline.generate_scenes(args.count, cfg.num_classes, cfg.seed, cfg.image_size)
    n_train = max(1, int(len(scenes) * 0.7))
    train, test = scenes[:n_train], scenes[n_train:]
    source = pipeline.train_source(train, cfg)
    if args.kind:
        train = [pipeline.corrupted_scene(s, args.kind, args.severity, cfg.seed, i)
                 for i, s in enumerate(train)]
        test = [pipeline.corrupted_scene(s, args.kind, args.severity, cfg.seed, n_train + i)
                for i, s in enumerate(test)]
    results = pipeline.lambda_sweep(cfg, lambdas, source, train, test)
    lines = ["lambda\tmap"]
    for lam in lambdas:
        lines.append(f"{lam!r}\t{results[lam].mean_ap!r}")
        print(f"lambda {lam}: mAP {results[lam].mean_ap:.4f}")
    (out / "sweep.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_matrix(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args, cfg)
    kinds = list(corrupt.KINDS) if args.kinds == "all" else args.kinds.split(",")
    methods = args.methods.split(",")
    results, clean = pipeline.run_experiment_matrix(methods, kinds, cfg,
                                                    n_scenes=args.count,
                                                    severity=args.severity)
    table = evaluation.methods_table(results)
    print(f"clean direct-test mAP: {clean.mean_ap:.4f}")
    print(table, end="")
    (out / "matrix.txt").write_text(table, encoding="utf-8")
    rows = ["method\tkind\tmap"]
    for method, per_kind in results.items():
        for kind, res in per_kind.items():
            rows.append(f"{method}\t{kind}\t{res.mean_ap!r}")
    rows.append(f"clean\t-\t{clean.mean_ap!r}")
    (out / "matrix.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_embed_io(args) -> int:
    path = Path(args.path)
    if args.export_npy:
        matrix, normalized = backends.read_embedding_file(path)
        np.save(args.export_npy, matrix)
        print(f"{path}: {matrix.shape[0]}x{matrix.shape[1]} float32, normalized={normalized}; "
              f"wrote {args.export_npy}")
        return EXIT_OK
    if args.import_npy:
        matrix = np.load(args.import_npy)
        backends.write_embedding_file(path, matrix.astype(np.float32),
                                      normalized=args.normalized)
        print(f"wrote {path}: {matrix.shape[0]}x{matrix.shape[1]} float32")
        return EXIT_OK
    matrix, normalized = backends.read_embedding_file(path)
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    print(f"{path}: rows={matrix.shape[0]} dim={matrix.shape[1]} normalized_flag={normalized} "
          f"row_norms=[{norms.min():.4f},{norms.max():.4f}]")
    if normalized and (abs(norms - 1.0) > 1e-3).any():
        print("warning: normalized flag set but row norms deviate from 1")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfodkit",
        description="Source-free adaptation toolkit for oriented object detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=None, help="global random seed")
        p.add_argument("--config", help="JSON config file; flags override its keys")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("corrupt", help="generate a corrupted copy of an image directory")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--kinds", default="all", help="comma list of kinds, or 'all'")
    p.add_argument("--severity", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("scenes", help="render synthetic scenes with ground truth to disk")
    common(p)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.set_defaults(func=cmd_scenes)

    p = sub.add_parser("adapt", help="run self-training adaptation (use --no-cga for the baseline)")
    common(p)
    p.add_argument("--scenes", help="directory of scene*.png + scene*.txt; generated when omitted")
    p.add_argument("--count", type=int, default=60, help="scenes to generate when --scenes omitted")
    p.add_argument("--kind", help="corruption kind for the target domain")
    p.add_argument("--severity", type=int, default=3)
    p.add_argument("--no-cga", action="store_true", help="plain self-training baseline")
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--classifier-sigma", dest="classifier_sigma", type=float)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate detection files against ground-truth files")
    p.add_argument("--dets", required=True, help="directory of per-image detection .txt files")
    p.add_argument("--gts", required=True, help="directory of matching ground-truth .txt files")
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--voc07", action="store_true", help="11-point AP variant")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="lambda ablation sweep")
    common(p)
    p.add_argument("--lambdas", default="0,0.2,0.5,0.8,1.0")
    p.add_argument("--count", type=int, default=60)
    p.add_argument("--kind", help="corruption kind for the target domain")
    p.add_argument("--severity", type=int, default=3)
    p.add_argument("--tau", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--classifier-sigma", dest="classifier_sigma", type=float)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("matrix", help="methods x corruption-kinds experiment table")
    common(p)
    p.add_argument("--kinds", default="gaussian_noise,frost,cloudy")
    p.add_argument("--methods", default="direct,self_train,cga")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--severity", type=int, default=3)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--classifier-sigma", dest="classifier_sigma", type=float)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("embed-io", help="validate or convert embedding files")
    p.add_argument("path", help="embedding file to inspect or write")
    p.add_argument("--export-npy", help="write the matrix to a .npy file")
    p.add_argument("--import-npy", help="build an embedding file from a .npy matrix")
    p.add_argument("--normalized", action="store_true", help="set the normalized flag on import")
    p.set_defaults(func=cmd_embed_io)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {EXIT_CONFIG}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError) as exc:
        print(f"error: {EXIT_CONFIG}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {EXIT_IO}: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # pragma: no cover - safety net
        print(f"error: {EXIT_ERROR}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
