"""Iterative pseudo-label self-training.

Round 0 trains on the translated (fake target) data only. Every later
round r pseudo-labels the real target volumes with the round r-1
checkpoints, then retrains from scratch on the union of the original fake
data and the pseudo-labeled real data. Rounds are resumable: a completed
round (its report exists) is skipped, and per-round seeds are derived
from the base seed so a resumed run reproduces the same checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inference import InferenceConfig, argmax_labels, predict_volume
from .segmenter import (
    SegCase,
    SegConfig,
    SegModel,
    SegSchedule,
    build_segmenter,
    load_checkpoint,
    save_checkpoint,
    split_folds,
    train_segmenter,
)
from .volumes import LabelMap, Volume, save_volume

log = logging.getLogger(__name__)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class PseudoLabel:
    label: LabelMap
    round_generated: int
    model_ids: tuple[str, ...]


@dataclass
class RoundReport:
    round: int
    train_size: int
    ckpt_hashes: dict[str, str]
    val_dice: float | None = None
    seeds: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "train_size": self.train_size,
            "ckpt_hashes": self.ckpt_hashes,
            "val_dice": self.val_dice,
            "seeds": self.seeds,
        }


@dataclass
class SelfTrainResult:
    rounds: list[RoundReport]
    final_ckpts: list[Path]
    trained_rounds: list[int]

    @property
    def n_training_runs(self) -> int:
        return len(self.trained_rounds)


def generate_pseudo_labels(
    models: list[SegModel],
    unlabeled: list[Volume],
    infer_cfg: InferenceConfig,
    round_generated: int = 0,
    model_ids: tuple[str, ...] = (),
    confidence_threshold: float | None = None,
    device: str = "cpu",
) -> dict[str, PseudoLabel]:
    """Sliding-window ensemble labels for each unlabeled volume.

    With a confidence threshold set, voxels whose max class probability
    falls below it are mapped to background.
    """
    out = {}
    for vol in unlabeled:
        probs = predict_volume(models, vol, infer_cfg, device=device)
        labels = argmax_labels(probs)
        if confidence_threshold is not None:
            labels = labels.copy()
            labels[probs.max(axis=0) < confidence_threshold] = 0
        lbl = LabelMap(
            data=labels,
            spacing_mm=vol.spacing_mm,
            orientation=vol.orientation,
            source_id=vol.source_id,
        )
        out[vol.source_id] = PseudoLabel(
            label=lbl, round_generated=round_generated, model_ids=tuple(model_ids)
        )
    return out


def _round_dir(out_dir: Path, r: int) -> Path:
    return out_dir / f"round_{r}"


def _train_round(
    cases: list[SegCase],
    seg_cfg: SegConfig,
    seg_sched: SegSchedule,
    round_idx: int,
    ckpt_dir: Path,
    val_cases: list[SegCase] | None,
    device: str,
) -> tuple[list[Path], dict[str, int], float | None]:
    """Train the round's model(s) from scratch and checkpoint them.

    folds == 1 trains a single model on every case; folds >= 2 runs
    k-fold cross-validation and keeps one checkpoint per fold.
    """
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    paths, seeds = [], {}
    if seg_cfg.folds == 1:
        splits = [(cases, None)]
    else:
        splits = split_folds(cases, seg_cfg.folds, seed=seg_sched.seed + round_idx)
    for fold, (train_cases, fold_val) in enumerate(splits):
        seed = seg_sched.seed + 1000 * round_idx + fold
        seeds[f"fold_{fold}"] = seed
        sched = SegSchedule(
            epochs=seg_sched.epochs,
            lr=seg_sched.lr,
            momentum=seg_sched.momentum,
            batch_size=seg_sched.batch_size,
            poly_power=seg_sched.poly_power,
            seed=seed,
            oversample_fg=seg_sched.oversample_fg,
            val_every=seg_sched.val_every,
        )
        model = build_segmenter(seg_cfg, seed=seed)
        model, _ = train_segmenter(
            model, train_cases, sched, seg_cfg,
            val_cases=fold_val, device=device,
        )
        path = ckpt_dir / f"fold_{fold}.pt"
        save_checkpoint(model, seg_cfg, path, fold=fold, epoch=sched.epochs,
                        extra={"round": round_idx, "seed": seed})
        paths.append(path)

    val_dice = None
    if val_cases:
        models = [load_checkpoint(p) for p in paths]
        infer = InferenceConfig()
        dices = []
        for case in val_cases:
            probs = predict_volume(models, case.vol, infer, device=device)
            pred = argmax_labels(probs)
            per_class = []
            for c in range(1, seg_cfg.n_classes):
                p, g = pred == c, case.lbl.data == c
                per_class.append(
                    1.0 if not p.any() and not g.any()
                    else 2.0 * np.logical_and(p, g).sum() / max(1, p.sum() + g.sum())
                )
            dices.append(float(np.mean(per_class)))
        val_dice = float(np.mean(dices))
    return paths, seeds, val_dice


def self_train(
    fake_labeled: list[tuple[Volume, LabelMap]],
    real_unlabeled: list[Volume],
    max_rounds: int,
    seg_cfg: SegConfig,
    seg_sched: SegSchedule,
    out_dir: str | Path,
    infer_cfg: InferenceConfig | None = None,
    val_cases: list[tuple[Volume, LabelMap]] | None = None,
    confidence_threshold: float | None = None,
    device: str = "cpu",
) -> SelfTrainResult:
    """Run rounds 0..max_rounds; round 0 uses fake data only.

    The fake labeled set is never dropped or relabeled. Completed rounds
    found in out_dir are skipped, so a killed run resumes at the next
    round boundary with identical results.
    """
    if max_rounds < 0:
        raise ValueError("max_rounds must be >= 0")
    if not fake_labeled:
        raise ValueError("fake labeled dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    infer_cfg = infer_cfg or InferenceConfig()

    fake_cases = [SegCase(v, l) for v, l in fake_labeled]
    val = [SegCase(v, l) for v, l in val_cases] if val_cases else None

    reports: list[RoundReport] = []
    trained: list[int] = []
    prev_ckpts: list[Path] = []
    for r in range(max_rounds + 1):
        rdir = _round_dir(out_dir, r)
        report_path = rdir / "report.json"
        ckpt_dir = rdir / "ckpts"
        if report_path.exists():
            raw = json.loads(report_path.read_text())
            reports.append(RoundReport(
                round=raw["round"], train_size=raw["train_size"],
                ckpt_hashes=raw["ckpt_hashes"], val_dice=raw["val_dice"],
                seeds=raw["seeds"],
            ))
            prev_ckpts = sorted(ckpt_dir.glob("fold_*.pt"))
            log.info("round %d already complete, skipping", r)
            continue

        if r == 0:
            train_cases = list(fake_cases)
        else:
            if not real_unlabeled:
                raise ValueError("self-training rounds past 0 need real unlabeled volumes")
            models = [load_checkpoint(p) for p in prev_ckpts]
            model_ids = tuple(file_sha256(p) for p in prev_ckpts)
            try:
                pseudo = generate_pseudo_labels(
                    models, real_unlabeled, infer_cfg,
                    round_generated=r, model_ids=model_ids,
                    confidence_threshold=confidence_threshold, device=device,
                )
            except Exception as exc:
                raise RuntimeError(f"round {r}: pseudo-labeling failed") from exc
            pseudo_dir = rdir / "pseudo"
            pseudo_dir.mkdir(parents=True, exist_ok=True)
            provenance = {}
            for case_id, pl in pseudo.items():
                save_volume(pl.label, pseudo_dir / f"{case_id}_seg.nii.gz")
                provenance[case_id] = {
                    "round_generated": pl.round_generated,
                    "model_ids": list(pl.model_ids),
                }
            (pseudo_dir / "provenance.json").write_text(
                json.dumps(provenance, indent=2) + "\n"
            )
            by_id = {v.source_id: v for v in real_unlabeled}
            train_cases = list(fake_cases) + [
                SegCase(by_id[cid], pl.label) for cid, pl in pseudo.items()
            ]

        try:
            paths, seeds, val_dice = _train_round(
                train_cases, seg_cfg, seg_sched, r, ckpt_dir, val, device
            )
        except Exception as exc:
            raise RuntimeError(f"self-training round {r} aborted") from exc
        trained.append(r)
        prev_ckpts = paths
        report = RoundReport(
            round=r,
            train_size=len(train_cases),
            ckpt_hashes={p.name: file_sha256(p) for p in paths},
            val_dice=val_dice,
            seeds=seeds,
        )
        reports.append(report)
        report_path.write_text(json.dumps(report.to_json(), indent=2) + "\n")

    state = {
        "max_rounds": max_rounds,
        "completed_rounds": [rep.round for rep in reports],
        "final_round": max_rounds,
    }
    (out_dir / "state.json").write_text(json.dumps(state, indent=2) + "\n")
    return SelfTrainResult(rounds=reports, final_ckpts=prev_ckpts, trained_rounds=trained)
