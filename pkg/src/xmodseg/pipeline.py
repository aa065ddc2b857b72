"""Pipeline driver: stage orchestration, manifests, and staleness tracking.

Stages form a fixed linear DAG. Each completed stage records a manifest
entry with its config hash, input file hashes, output paths, and wall
time. A stage re-executes when its entry is missing, its config or input
hashes changed, an output vanished, or any upstream stage re-executed in
the same run; otherwise re-running is a no-op. Staleness is content-hash
based, never timestamp based.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .inference import InferenceConfig, finalize_labels, predict_volume
from .losses import ContrastConfig
from .metrics import evaluate_case, write_report
from .preprocess import CropRecord, PreprocessConfig, preprocess_case
from .segmenter import SegConfig, SegSchedule, load_checkpoint
from .self_training import file_sha256, self_train
from .translators import (
    STYLE_CHANNELS,
    STYLES,
    GeneratorSpec,
    TrainSchedule,
    TranslatorBundle,
    generate_multistyle_dataset,
    make_slice_dataset,
    train_translator,
)
from .volumes import LabelMap, Volume, load_labelmap, load_volume, save_volume, stem

log = logging.getLogger(__name__)

STAGE_ORDER = (
    "preprocess",
    "translate-train",
    "translate",
    "seg-train",
    "self-train",
    "predict",
    "evaluate",
)

# immediate upstream stages, by data flow
STAGE_DEPS: dict[str, tuple[str, ...]] = {
    "preprocess": (),
    "translate-train": ("preprocess",),
    "translate": ("translate-train", "preprocess"),
    "seg-train": ("translate",),
    "self-train": ("seg-train", "translate", "preprocess"),
    "predict": ("self-train", "preprocess"),
    "evaluate": ("predict",),
}


class MissingPrerequisiteError(RuntimeError):
    def __init__(self, stage: str, missing: str):
        self.stage = stage
        super().__init__(f"stage {stage!r} is missing its prerequisite: {missing}")


class WorkdirLockedError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    raw_src: Path
    raw_tgt: Path
    workdir: Path
    seed: int = 0
    styles: tuple[str, ...] = STYLES
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    gen_specs: dict[str, GeneratorSpec] = field(default_factory=dict)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    translate_schedules: dict[str, TrainSchedule] = field(default_factory=dict)
    seg_config: SegConfig = field(default_factory=SegConfig)
    seg_schedule: SegSchedule = field(default_factory=SegSchedule)
    self_train_rounds: int = 3
    confidence_threshold: float | None = None
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        self.raw_src = Path(self.raw_src)
        self.raw_tgt = Path(self.raw_tgt)
        self.workdir = Path(self.workdir)
        paths = [self.raw_src.resolve(), self.raw_tgt.resolve(), self.workdir.resolve()]
        if len(set(paths)) != 3:
            raise ValueError("raw_src, raw_tgt, and workdir must be distinct paths")
        bad = [s for s in self.styles if s not in STYLES]
        if bad:
            raise ValueError(f"unknown styles {bad}; expected subset of {STYLES}")
        for style in self.styles:
            self.gen_specs.setdefault(
                style, GeneratorSpec(in_channels=STYLE_CHANNELS[style])
            )
            self.translate_schedules.setdefault(
                style, TrainSchedule(seed=self.seed + STYLES.index(style))
            )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["raw_src"] = str(self.raw_src)
        d["raw_tgt"] = str(self.raw_tgt)
        d["workdir"] = str(self.workdir)
        d["styles"] = list(self.styles)
        return d

    def to_yaml(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.as_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        def tup(x):
            return tuple(x) if isinstance(x, (list, tuple)) else x

        def build(klass, data, tuple_fields=()):
            data = dict(data or {})
            for f in tuple_fields:
                if f in data and data[f] is not None:
                    data[f] = tup(data[f])
            return klass(**data)

        seed = int(raw.get("seed", 0))
        styles = tuple(raw.get("styles", STYLES))
        gen_specs = {
            k: build(GeneratorSpec, v) for k, v in (raw.get("gen_specs") or {}).items()
        }
        schedules = {
            k: build(TrainSchedule, v)
            for k, v in (raw.get("translate_schedules") or {}).items()
        }
        return cls(
            raw_src=Path(raw["raw_src"]),
            raw_tgt=Path(raw["raw_tgt"]),
            workdir=Path(raw["workdir"]),
            seed=seed,
            styles=styles,
            preprocess=build(
                PreprocessConfig, raw.get("preprocess"),
                ("target_spacing_mm", "crop_hw", "intensity_range"),
            ),
            gen_specs=gen_specs,
            contrast=build(ContrastConfig, raw.get("contrast"), ("layer_ids",)),
            translate_schedules=schedules,
            seg_config=build(SegConfig, raw.get("seg_config"), ("patch_size",)),
            seg_schedule=build(SegSchedule, raw.get("seg_schedule")),
            self_train_rounds=int(raw.get("self_train_rounds", 3)),
            confidence_threshold=raw.get("confidence_threshold"),
            inference=build(InferenceConfig, raw.get("inference")),
        )

    @classmethod
    def from_yaml(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


@dataclass
class WorkPaths:
    root: Path

    @property
    def pre_src(self) -> Path:
        return self.root / "preprocessed" / "src"

    @property
    def pre_tgt(self) -> Path:
        return self.root / "preprocessed" / "tgt"

    @property
    def translate_train(self) -> Path:
        return self.root / "translate_train"

    @property
    def translated(self) -> Path:
        return self.root / "translated"

    @property
    def selftrain(self) -> Path:
        return self.root / "selftrain"

    @property
    def predictions(self) -> Path:
        return self.root / "predictions"

    @property
    def evaluation(self) -> Path:
        return self.root / "evaluation"


def _volume_files(directory: Path) -> list[Path]:
    """Image files in a dataset directory (labels and sidecars excluded)."""
    files = []
    for p in sorted(directory.glob("*.nii*")):
        s = stem(p)
        if s.endswith("_seg") or s.endswith("_pred"):
            continue
        files.append(p)
    return files


def _label_for(vol_path: Path) -> Path | None:
    for suffix in (".nii.gz", ".nii"):
        cand = vol_path.parent / f"{stem(vol_path)}_seg{suffix}"
        if cand.exists():
            return cand
    return None


def _load_dataset(directory: Path, with_labels: bool) -> list[tuple[Volume, LabelMap | None]]:
    out = []
    for p in _volume_files(directory):
        vol = load_volume(p)
        lbl = None
        if with_labels:
            lp = _label_for(p)
            if lp is not None:
                lbl = load_labelmap(lp)
        out.append((vol, lbl))
    return out


def _existing(paths: list[Path]) -> list[Path]:
    return [p for p in paths if p.exists()]


def _all_files(directory: Path, pattern: str = "**/*") -> list[Path]:
    if not directory.exists():
        return []
    return sorted(p for p in directory.glob(pattern) if p.is_file())


# ---------------------------------------------------------------- stages


def _stage_preprocess(cfg: PipelineConfig, wp: WorkPaths) -> list[Path]:
    outputs = []
    for raw_dir, out_dir, with_labels in (
        (cfg.raw_src, wp.pre_src, True),
        (cfg.raw_tgt, wp.pre_tgt, False),
    ):
        if out_dir.exists():
            shutil.rmtree(out_dir)
        out_dir.mkdir(parents=True)
        vols = _volume_files(raw_dir)
        if not vols:
            raise MissingPrerequisiteError("preprocess", f"no volumes in {raw_dir}")
        for p in vols:
            vol = load_volume(p)
            lbl_path = _label_for(p) if with_labels else None
            lbl = load_labelmap(lbl_path) if lbl_path else None
            out_vol, out_lbl, record = preprocess_case(vol, lbl, cfg.preprocess)
            case = stem(p)
            vol_out = out_dir / f"{case}.nii.gz"
            save_volume(out_vol, vol_out)
            outputs.append(vol_out)
            record_out = out_dir / f"{case}_crop.json"
            record.save(record_out)
            outputs.append(record_out)
            if out_lbl is not None:
                lbl_out = out_dir / f"{case}_seg.nii.gz"
                save_volume(out_lbl, lbl_out)
                outputs.append(lbl_out)
    return outputs


def _stage_translate_train(cfg: PipelineConfig, wp: WorkPaths) -> list[Path]:
    src = _load_dataset(wp.pre_src, with_labels=True)
    tgt = _load_dataset(wp.pre_tgt, with_labels=False)
    if not src:
        raise MissingPrerequisiteError("translate-train", f"no preprocessed src in {wp.pre_src}")
    if not tgt:
        raise MissingPrerequisiteError("translate-train", f"no preprocessed tgt in {wp.pre_tgt}")
    outputs = []
    for style in cfg.styles:
        out_dir = wp.translate_train / style
        if out_dir.exists():
            shutil.rmtree(out_dir)
        out_dir.mkdir(parents=True)
        sched = cfg.translate_schedules[style]
        bundle = TranslatorBundle(
            style,
            gen_spec=cfg.gen_specs[style],
            contrast_cfg=cfg.contrast if style in ("wcut", "cut") else None,
            seed=sched.seed,
        )
        channels = STYLE_CHANNELS[style]
        src_ds = make_slice_dataset(src, channels)
        tgt_ds = make_slice_dataset(tgt, channels)
        _, history = train_translator(bundle, src_ds, tgt_ds, sched, out_dir=out_dir)
        hist_path = out_dir / "history.json"
        hist_path.write_text(json.dumps(history, indent=2) + "\n")
        outputs += [out_dir / "ckpt_final.pt", hist_path]
    return outputs


def _stage_translate(cfg: PipelineConfig, wp: WorkPaths) -> list[Path]:
    src = [(v, l) for v, l in _load_dataset(wp.pre_src, with_labels=True)]
    if not src or any(l is None for _, l in src):
        raise MissingPrerequisiteError("translate", f"no labeled preprocessed src in {wp.pre_src}")
    bundles = []
    for style in cfg.styles:
        ckpt = wp.translate_train / style / "ckpt_final.pt"
        if not ckpt.exists():
            raise MissingPrerequisiteError("translate", f"missing checkpoint {ckpt}")
        bundles.append(TranslatorBundle.load(ckpt))
    if wp.translated.exists():
        shutil.rmtree(wp.translated)
    wp.translated.mkdir(parents=True)
    outputs = []
    for fake, lbl, style in generate_multistyle_dataset(bundles, src):
        case = f"{fake.source_id}_{style}"
        vol_out = wp.translated / f"{case}.nii.gz"
        lbl_out = wp.translated / f"{case}_seg.nii.gz"
        save_volume(fake, vol_out)
        save_volume(lbl, lbl_out)
        outputs += [vol_out, lbl_out]
    return outputs


def _load_fake_dataset(wp: WorkPaths) -> list[tuple[Volume, LabelMap]]:
    pairs = []
    for p in _volume_files(wp.translated):
        lp = _label_for(p)
        if lp is None:
            raise MissingPrerequisiteError("seg-train", f"translated case {p} has no label")
        pairs.append((load_volume(p), load_labelmap(lp)))
    return pairs


def _clear_rounds(selftrain_dir: Path, start: int) -> None:
    if not selftrain_dir.exists():
        return
    for d in selftrain_dir.glob("round_*"):
        if int(d.name.split("_")[1]) >= start:
            shutil.rmtree(d)
    state = selftrain_dir / "state.json"
    if state.exists() and start == 0:
        state.unlink()


def _stage_seg_train(cfg: PipelineConfig, wp: WorkPaths) -> list[Path]:
    fake = _load_fake_dataset(wp)
    if not fake:
        raise MissingPrerequisiteError("seg-train", f"no translated volumes in {wp.translated}")
    _clear_rounds(wp.selftrain, start=0)
    self_train(
        fake_labeled=fake,
        real_unlabeled=[],
        max_rounds=0,
        seg_cfg=cfg.seg_config,
        seg_sched=cfg.seg_schedule,
        out_dir=wp.selftrain,
        infer_cfg=cfg.inference,
        confidence_threshold=cfg.confidence_threshold,
    )
    round0 = wp.selftrain / "round_0"
    return _all_files(round0)


def _stage_self_train(cfg: PipelineConfig, wp: WorkPaths) -> list[Path]:
    fake = _load_fake_dataset(wp)
    real = [v for v, _ in _load_dataset(wp.pre_tgt, with_labels=False)]
    if not (wp.selftrain / "round_0" / "report.json").exists():
        raise MissingPrerequisiteError("self-train", "round_0 checkpoints (run seg-train)")
    if not real:
        raise MissingPrerequisiteError("self-train", f"no preprocessed tgt in {wp.pre_tgt}")
    _clear_rounds(wp.selftrain, start=1)
    self_train(
        fake_labeled=fake,
        real_unlabeled=real,
        max_rounds=cfg.self_train_rounds,
        seg_cfg=cfg.seg_config,
        seg_sched=cfg.seg_schedule,
        out_dir=wp.selftrain,
        infer_cfg=cfg.inference,
        confidence_threshold=cfg.confidence_threshold,
    )
    outputs = [wp.selftrain / "state.json"]
    for r in range(1, cfg.self_train_rounds + 1):
        outputs += _all_files(wp.selftrain / f"round_{r}")
    return outputs


def _final_ckpts(cfg: PipelineConfig, wp: WorkPaths) -> list[Path]:
    final = wp.selftrain / f"round_{cfg.self_train_rounds}" / "ckpts"
    return sorted(final.glob("fold_*.pt"))


def _stage_predict(cfg: PipelineConfig, wp: WorkPaths) -> list[Path]:
    ckpts = _final_ckpts(cfg, wp)
    if not ckpts:
        raise MissingPrerequisiteError("predict", "final-round checkpoints (run self-train)")
    models = [load_checkpoint(p) for p in ckpts]
    if wp.predictions.exists():
        shutil.rmtree(wp.predictions)
    wp.predictions.mkdir(parents=True)
    outputs = []
    vols = _volume_files(wp.pre_tgt)
    if not vols:
        raise MissingPrerequisiteError("predict", f"no preprocessed tgt in {wp.pre_tgt}")
    for p in vols:
        vol = load_volume(p)
        record_path = p.parent / f"{stem(p)}_crop.json"
        if not record_path.exists():
            raise MissingPrerequisiteError("predict", f"missing crop record {record_path}")
        record = CropRecord.load(record_path)
        probs = predict_volume(models, vol, cfg.inference)
        pred = finalize_labels(probs, record)
        out = wp.predictions / f"{stem(p)}_pred.nii.gz"
        save_volume(pred, out)
        outputs.append(out)
    return outputs


def _stage_evaluate(cfg: PipelineConfig, wp: WorkPaths) -> list[Path]:
    preds = sorted(wp.predictions.glob("*_pred.nii*"))
    if not preds:
        raise MissingPrerequisiteError("evaluate", f"no predictions in {wp.predictions}")
    reports = {}
    for p in preds:
        case = stem(p)[: -len("_pred")]
        gt_path = None
        for suffix in (".nii.gz", ".nii"):
            cand = cfg.raw_tgt / f"{case}_seg{suffix}"
            if cand.exists():
                gt_path = cand
                break
        if gt_path is None:
            raise MissingPrerequisiteError("evaluate", f"no ground truth for case {case}")
        reports[case] = evaluate_case(load_labelmap(p), load_labelmap(gt_path))
    wp.evaluation.mkdir(parents=True, exist_ok=True)
    out = wp.evaluation / "report.txt"
    write_report(out, reports)
    return [out, out.with_suffix(".json")]


_STAGE_RUNNERS = {
    "preprocess": _stage_preprocess,
    "translate-train": _stage_translate_train,
    "translate": _stage_translate,
    "seg-train": _stage_seg_train,
    "self-train": _stage_self_train,
    "predict": _stage_predict,
    "evaluate": _stage_evaluate,
}


def _stage_inputs(stage: str, cfg: PipelineConfig, wp: WorkPaths) -> list[Path]:
    """Files whose content decides whether `stage` is stale."""
    if stage == "preprocess":
        return _all_files(cfg.raw_src) + _all_files(cfg.raw_tgt)
    if stage == "translate-train":
        return _all_files(wp.pre_src) + _all_files(wp.pre_tgt)
    if stage == "translate":
        ckpts = [wp.translate_train / s / "ckpt_final.pt" for s in cfg.styles]
        return _existing(ckpts) + _all_files(wp.pre_src)
    if stage == "seg-train":
        return _all_files(wp.translated)
    if stage == "self-train":
        return (
            _all_files(wp.translated)
            + _all_files(wp.pre_tgt)
            + _all_files(wp.selftrain / "round_0")
        )
    if stage == "predict":
        return _existing(_final_ckpts(cfg, wp)) + _all_files(wp.pre_tgt)
    if stage == "evaluate":
        return _all_files(wp.predictions) + _all_files(cfg.raw_tgt)
    raise KeyError(stage)


def _stage_config(stage: str, cfg: PipelineConfig) -> dict:
    """The configuration subset a stage's outputs depend on."""
    full = cfg.as_dict()
    common = {"seed": full["seed"]}
    if stage == "preprocess":
        return {**common, "preprocess": full["preprocess"]}
    if stage == "translate-train":
        return {
            **common,
            "styles": full["styles"],
            "gen_specs": full["gen_specs"],
            "contrast": full["contrast"],
            "translate_schedules": full["translate_schedules"],
        }
    if stage == "translate":
        return {**common, "styles": full["styles"]}
    if stage == "seg-train":
        return {**common, "seg_config": full["seg_config"], "seg_schedule": full["seg_schedule"]}
    if stage == "self-train":
        return {
            **common,
            "seg_config": full["seg_config"],
            "seg_schedule": full["seg_schedule"],
            "self_train_rounds": full["self_train_rounds"],
            "confidence_threshold": full["confidence_threshold"],
            "inference": full["inference"],
        }
    if stage == "predict":
        return {**common, "inference": full["inference"], "self_train_rounds": full["self_train_rounds"]}
    if stage == "evaluate":
        return {}
    raise KeyError(stage)


def _hash_config(data: dict) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


@dataclass
class RunResult:
    executed: list[str]
    skipped: list[str]
    manifest: dict


class _Lock:
    """Exclusive workdir lock; stale locks from dead processes are stolen."""

    def __init__(self, workdir: Path):
        self.path = workdir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            try:
                pid = int(self.path.read_text().strip())
                os.kill(pid, 0)
            except (ValueError, ProcessLookupError, PermissionError):
                self.path.unlink(missing_ok=True)
            else:
                raise WorkdirLockedError(
                    f"workdir already in use by pid {pid} ({self.path})"
                )
        fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _load_manifest(path: Path) -> dict:
    if path.exists():
        return json.loads(path.read_text())
    return {"stages": {}}


def _write_manifest(path: Path, manifest: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _relpaths(paths: list[Path], root: Path) -> list[str]:
    out = []
    for p in paths:
        try:
            out.append(str(p.resolve().relative_to(root.resolve())))
        except ValueError:
            out.append(str(p))
    return out


def _is_stale(stage: str, entry: dict | None, cfg_hash: str,
              input_hashes: dict[str, str], workdir: Path) -> str | None:
    """Reason this stage must run, or None if it is fresh."""
    if entry is None:
        return "no previous run"
    if entry["config_hash"] != cfg_hash:
        return "configuration changed"
    if entry["input_hashes"] != input_hashes:
        return "inputs changed"
    for rel in entry["outputs"]:
        p = Path(rel)
        if not p.is_absolute():
            p = workdir / rel
        if not p.exists():
            return f"output missing: {rel}"
    return None


def run_pipeline(cfg: PipelineConfig, stages: list[str] | None = None) -> RunResult:
    """Execute the requested stages in canonical order.

    Unrequested stages are never run; requested, fresh stages are skipped.
    Raises MissingPrerequisiteError when a requested stage's upstream
    outputs do not exist.
    """
    requested = list(STAGE_ORDER) if stages is None else list(stages)
    unknown = [s for s in requested if s not in STAGE_ORDER]
    if unknown:
        raise ValueError(f"unknown stages {unknown}; valid: {list(STAGE_ORDER)}")
    requested = [s for s in STAGE_ORDER if s in requested]

    cfg.workdir.mkdir(parents=True, exist_ok=True)
    wp = WorkPaths(cfg.workdir)
    manifest_path = cfg.workdir / "manifest.json"

    executed: list[str] = []
    skipped: list[str] = []
    with _Lock(cfg.workdir):
        manifest = _load_manifest(manifest_path)
        for stage in requested:
            cfg_hash = _hash_config(_stage_config(stage, cfg))
            inputs = _stage_inputs(stage, cfg, wp)
            input_hashes = {
                rel: file_sha256(p)
                for rel, p in zip(_relpaths(inputs, cfg.workdir), inputs)
            }
            entry = manifest["stages"].get(stage)
            reason = _is_stale(stage, entry, cfg_hash, input_hashes, cfg.workdir)
            if reason is None and not any(d in executed for d in STAGE_DEPS[stage]):
                log.info("stage %s is up to date, skipping", stage)
                skipped.append(stage)
                continue
            if reason is None:
                reason = "upstream stage re-executed"
            log.info("running stage %s (%s)", stage, reason)
            start = time.monotonic()
            outputs = _STAGE_RUNNERS[stage](cfg, wp)
            wall = time.monotonic() - start
            manifest["stages"][stage] = {
                "config_hash": cfg_hash,
                "input_hashes": input_hashes,
                "outputs": _relpaths(outputs, cfg.workdir),
                "wall_time_s": round(wall, 3),
                "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            }
            _write_manifest(manifest_path, manifest)
            executed.append(stage)
    return RunResult(executed=executed, skipped=skipped, manifest=manifest)
