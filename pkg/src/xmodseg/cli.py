"""Command-line entry points for every pipeline stage plus the composite runner."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline as pl
from .inference import InferenceConfig, finalize_labels, predict_volume
from .losses import ContrastConfig
from .metrics import evaluate_case, write_report
from .phantom import PhantomConfig, generate_phantoms
from .preprocess import CropRecord, PreprocessConfig, preprocess_case
from .segmenter import (
    SegCase,
    SegConfig,
    SegSchedule,
    load_checkpoint,
    save_checkpoint,
    split_folds,
    train_segmenter,
    build_segmenter,
)
from .self_training import self_train
from .translators import (
    STYLE_CHANNELS,
    GeneratorSpec,
    TrainSchedule,
    TranslatorBundle,
    make_slice_dataset,
    train_translator,
    translate_volume,
)
from .volumes import load_labelmap, load_volume, save_volume, stem

log = logging.getLogger(__name__)


def _load_yaml_section(path: str | None, key: str) -> dict:
    if path is None:
        return {}
    raw = yaml.safe_load(Path(path).read_text()) or {}
    section = raw.get(key, raw)
    return section or {}


def _tuplify(d: dict, keys: tuple[str, ...]) -> dict:
    return {k: tuple(v) if k in keys and v is not None else v for k, v in d.items()}


def cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = PhantomConfig(
        shape=tuple(args.shape), n_cases=args.n, seed=args.seed, domain=args.domain
    )
    for vol, lbl in generate_phantoms(cfg):
        save_volume(vol, out / f"{vol.source_id}.nii.gz")
        save_volume(lbl, out / f"{vol.source_id}_seg.nii.gz")
    print(f"wrote {cfg.n_cases} {cfg.domain} phantom(s) to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = PreprocessConfig(
        **_tuplify(
            _load_yaml_section(args.config, "preprocess"),
            ("target_spacing_mm", "crop_hw", "intensity_range"),
        )
    )
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vols = pl._volume_files(in_dir)
    if not vols:
        print(f"no volumes found in {in_dir}", file=sys.stderr)
        return 1
    for p in vols:
        vol = load_volume(p)
        lbl_path = pl._label_for(p)
        lbl = load_labelmap(lbl_path) if lbl_path else None
        out_vol, out_lbl, record = preprocess_case(vol, lbl, cfg)
        case = stem(p)
        save_volume(out_vol, out_dir / f"{case}.nii.gz")
        record.save(out_dir / f"{case}_crop.json")
        if out_lbl is not None:
            save_volume(out_lbl, out_dir / f"{case}_seg.nii.gz")
        print(f"preprocessed {case}: {vol.shape} -> {out_vol.shape}")
    return 0


def cmd_train_translate(args) -> int:
    style = args.style
    src = pl._load_dataset(Path(args.src_dir), with_labels=True)
    tgt = pl._load_dataset(Path(args.tgt_dir), with_labels=False)
    gen_raw = _load_yaml_section(args.config, "gen_spec")
    gen_raw.setdefault("in_channels", STYLE_CHANNELS[style])
    gen_spec = GeneratorSpec(**gen_raw)
    contrast = None
    if style in ("wcut", "cut"):
        contrast = ContrastConfig(
            **_tuplify(_load_yaml_section(args.config, "contrast"), ("layer_ids",))
        )
    sched_raw = _load_yaml_section(args.config, "schedule")
    sched_raw.setdefault("seed", args.seed)
    if args.epochs is not None:
        sched_raw["epochs"] = args.epochs
        sched_raw.setdefault("decay_start_epoch", max(0, args.epochs // 2))
    sched = TrainSchedule(**sched_raw)
    bundle = TranslatorBundle(style, gen_spec, contrast, seed=sched.seed)
    channels = STYLE_CHANNELS[style]
    _, history = train_translator(
        bundle,
        make_slice_dataset(src, channels),
        make_slice_dataset([(v, None) for v, _ in tgt], channels),
        sched,
        out_dir=args.out,
    )
    Path(args.out, "history.json").write_text(json.dumps(history, indent=2) + "\n")
    print(f"trained {style} translator: final g-loss {history['total_g'][-1]:.4f}")
    return 0


def cmd_translate(args) -> int:
    bundle = TranslatorBundle.load(args.ckpt)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in pl._volume_files(Path(args.in_dir)):
        vol = load_volume(p)
        fake = translate_volume(bundle, vol)
        case = f"{stem(p)}_{bundle.style}"
        save_volume(fake, out_dir / f"{case}.nii.gz")
        lbl_path = pl._label_for(p)
        if lbl_path is not None:
            save_volume(load_labelmap(lbl_path), out_dir / f"{case}_seg.nii.gz")
        print(f"translated {stem(p)} ({bundle.style})")
    return 0


def cmd_train_seg(args) -> int:
    cfg = SegConfig(
        **_tuplify(_load_yaml_section(args.config, "seg_config"), ("patch_size",)),
    )
    if args.folds is not None:
        cfg = SegConfig(
            patch_size=cfg.patch_size, n_classes=cfg.n_classes,
            base_width=cfg.base_width, depth=cfg.depth, folds=args.folds,
        )
    sched_raw = _load_yaml_section(args.config, "seg_schedule")
    sched_raw.setdefault("seed", args.seed)
    if args.epochs is not None:
        sched_raw["epochs"] = args.epochs
    sched = SegSchedule(**sched_raw)

    pairs = pl._load_dataset(Path(args.data_dir), with_labels=True)
    cases = [SegCase(v, l) for v, l in pairs if l is not None]
    if not cases:
        print(f"no labeled cases in {args.data_dir}", file=sys.stderr)
        return 1
    out = Path(args.out)
    splits = (
        [(cases, None)] if cfg.folds == 1 else split_folds(cases, cfg.folds, sched.seed)
    )
    for fold, (train_cases, val_cases) in enumerate(splits):
        seed = sched.seed + fold
        fold_sched = SegSchedule(
            epochs=sched.epochs, lr=sched.lr, momentum=sched.momentum,
            batch_size=sched.batch_size, poly_power=sched.poly_power, seed=seed,
            oversample_fg=sched.oversample_fg, val_every=sched.val_every,
        )
        model = build_segmenter(cfg, seed=seed)
        model, history = train_segmenter(
            model, train_cases, fold_sched, cfg, val_cases=val_cases
        )
        save_checkpoint(model, cfg, out / f"fold_{fold}.pt", fold=fold, epoch=sched.epochs)
        print(f"fold {fold}: final loss {history['loss'][-1]:.4f}")
    return 0


def cmd_self_train(args) -> int:
    cfg = SegConfig(
        **_tuplify(_load_yaml_section(args.config, "seg_config"), ("patch_size",)),
    )
    sched_raw = _load_yaml_section(args.config, "seg_schedule")
    sched_raw.setdefault("seed", args.seed)
    if args.epochs is not None:
        sched_raw["epochs"] = args.epochs
    sched = SegSchedule(**sched_raw)
    fake = [
        (v, l) for v, l in pl._load_dataset(Path(args.fake_dir), with_labels=True)
        if l is not None
    ]
    real = [v for v, _ in pl._load_dataset(Path(args.real_dir), with_labels=False)]
    result = self_train(
        fake_labeled=fake,
        real_unlabeled=real,
        max_rounds=args.rounds,
        seg_cfg=cfg,
        seg_sched=sched,
        out_dir=args.out,
        confidence_threshold=args.confidence_threshold,
    )
    for report in result.rounds:
        dice = "n/a" if report.val_dice is None else f"{report.val_dice:.4f}"
        print(f"round {report.round}: train_size={report.train_size} val_dice={dice}")
    return 0


def cmd_predict(args) -> int:
    models = [load_checkpoint(p) for p in args.ckpts.split(",")]
    cfg = InferenceConfig(overlap=args.overlap, blend=args.blend, flip_tta=args.flip_tta)
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in pl._volume_files(in_dir):
        vol = load_volume(p)
        record_path = in_dir / f"{stem(p)}_crop.json"
        if not record_path.exists():
            print(f"missing crop record for {stem(p)}: {record_path}", file=sys.stderr)
            return 1
        probs = predict_volume(models, vol, cfg)
        pred = finalize_labels(probs, CropRecord.load(record_path))
        save_volume(pred, out_dir / f"{stem(p)}_pred.nii.gz")
        print(f"predicted {stem(p)}")
    return 0


def cmd_evaluate(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    reports = {}
    for p in sorted(pred_dir.glob("*_pred.nii*")):
        case = stem(p)[: -len("_pred")]
        gt_path = None
        for suffix in (".nii.gz", ".nii"):
            cand = gt_dir / f"{case}_seg{suffix}"
            if cand.exists():
                gt_path = cand
        if gt_path is None:
            print(f"no ground truth for {case}", file=sys.stderr)
            return 1
        reports[case] = evaluate_case(load_labelmap(p), load_labelmap(gt_path))
    if not reports:
        print(f"no predictions in {pred_dir}", file=sys.stderr)
        return 1
    write_report(args.out, reports)
    print(Path(args.out).read_text())
    return 0


def cmd_run(args) -> int:
    if args.print_config:
        cfg = pl.PipelineConfig(
            raw_src=Path("raw/src"), raw_tgt=Path("raw/tgt"), workdir=Path("work")
        )
        print(yaml.safe_dump(cfg.as_dict(), sort_keys=False))
        return 0
    cfg = pl.PipelineConfig.from_yaml(args.config)
    if args.seed is not None:
        raw = cfg.as_dict()
        raw["seed"] = args.seed
        cfg = pl.PipelineConfig.from_dict(raw)
    stages = args.stages.split(",") if args.stages else None
    result = pl.run_pipeline(cfg, stages)
    for stage in result.executed:
        print(f"executed: {stage}")
    for stage in result.skipped:
        print(f"up to date: {stage}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmodseg",
        description="Translate-then-segment toolkit for unpaired cross-modality 3D segmentation",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic two-domain dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--domain", choices=("src", "tgt"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", type=int, nargs=3, default=(32, 64, 64))
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("preprocess", help="reorient/resample/scale/crop a dataset")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None, help="YAML with a `preprocess` section")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train-translate", help="train one translation style")
    p.add_argument("--style", choices=("wcut", "cyclegan", "cut"), required=True)
    p.add_argument("--src-dir", required=True)
    p.add_argument("--tgt-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_translate)

    p = sub.add_parser("translate", help="translate volumes with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("train-seg", help="train 3D segmentation model(s)")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_seg)

    p = sub.add_parser("self-train", help="iterative pseudo-label self-training")
    p.add_argument("--fake-dir", required=True)
    p.add_argument("--real-dir", required=True)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--confidence-threshold", type=float, default=None)
    p.set_defaults(fn=cmd_self_train)

    p = sub.add_parser("predict", help="sliding-window ensemble prediction")
    p.add_argument("--ckpts", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--blend", choices=("gaussian", "uniform"), default="gaussian")
    p.add_argument("--flip-tta", action="store_true")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="Dice / surface-distance evaluation")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("run", help="run the composite pipeline from a config file")
    p.add_argument("--config", default=None)
    p.add_argument("--stages", default=None, help="comma-separated stage subset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(fn=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.fn is cmd_run and not args.print_config and args.config is None:
        print("run requires --config (or --print-config)", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except Exception as exc:  # surface a clean one-liner, non-zero exit
        log.debug("fatal error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
