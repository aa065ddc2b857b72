"""3D segmentation model, fold splitting, and the supervised training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .losses import aux_seg_loss
from .networks import UNet3D, pad_to_multiple
from .volumes import LabelMap, Volume, require_aligned

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegConfig:
    patch_size: tuple[int, int, int] = (48, 192, 192)
    n_classes: int = 4
    base_width: int = 32
    depth: int = 5
    folds: int = 5

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        div = 2 ** (self.depth - 1)
        for p in self.patch_size:
            if p < div or p % div:
                raise ValueError(
                    f"each patch dimension must be >= {div} and divisible by it, "
                    f"got {self.patch_size} at depth {self.depth}"
                )

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)


@dataclass(frozen=True)
class SegSchedule:
    epochs: int = 300
    lr: float = 0.01
    momentum: float = 0.99
    batch_size: int = 1
    poly_power: float = 0.9
    seed: int = 0
    oversample_fg: float = 0.33
    val_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def poly_lr(t: int, total: int, lr0: float, power: float = 0.9) -> float:
    """Polynomial decay: lr0 at t=0, exactly 0 at t=total."""
    return lr0 * (1.0 - t / total) ** power


def build_segmenter(cfg: SegConfig, seed: int | None = None) -> UNet3D:
    if seed is not None:
        torch.manual_seed(seed)
    return UNet3D(
        n_classes=cfg.n_classes,
        in_channels=1,
        base_width=cfg.base_width,
        depth=cfg.depth,
    )


def split_folds(cases: list, k: int, seed: int) -> list[tuple[list, list]]:
    """Seeded shuffle, then k near-equal train/val partitions."""
    if k < 2:
        raise ValueError("k-fold splitting needs k >= 2")
    if len(cases) < k:
        raise ValueError(f"cannot split {len(cases)} cases into {k} folds")
    order = np.random.default_rng(seed).permutation(len(cases))
    chunks = np.array_split(order, k)
    folds = []
    for i, chunk in enumerate(chunks):
        val = [cases[j] for j in chunk]
        train = [cases[j] for c in chunks[:i] + chunks[i + 1 :] for j in c]
        folds.append((train, val))
    return folds


class SegCase:
    """A training case with cached foreground voxel coordinates."""

    def __init__(self, vol: Volume, lbl: LabelMap):
        require_aligned(vol, lbl)
        self.vol = vol
        self.lbl = lbl
        self.fg = np.argwhere(lbl.data > 0)

    @property
    def source_id(self) -> str:
        return self.vol.source_id


def _pad_case(img: np.ndarray, lbl: np.ndarray, patch: tuple[int, int, int], fill: float):
    pads = [(0, max(0, p - s)) for s, p in zip(img.shape, patch)]
    if any(hi for _, hi in pads):
        img = np.pad(img, pads, constant_values=fill)
        lbl = np.pad(lbl, pads, constant_values=0)
    return img, lbl


def sample_patch(
    case: SegCase,
    patch: tuple[int, int, int],
    rng: np.random.Generator,
    fg_prob: float = 0.33,
    fill: float = -1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """One random patch, centered on a random foreground voxel with
    probability fg_prob; volumes smaller than the patch are padded."""
    img, lbl = _pad_case(case.vol.data, case.lbl.data, patch, fill)
    shape = img.shape
    if len(case.fg) and rng.random() < fg_prob:
        center = case.fg[rng.integers(len(case.fg))]
        origin = [
            int(np.clip(c - p // 2, 0, s - p))
            for c, p, s in zip(center, patch, shape)
        ]
    else:
        origin = [int(rng.integers(0, s - p + 1)) for p, s in zip(patch, shape)]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
    return img[sl].copy(), lbl[sl].copy()


def augment_patch(
    img: np.ndarray, lbl: np.ndarray, rng: np.random.Generator,
    jitter: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Random axis flips, in-plane 90-degree rotation, and intensity jitter."""
    for axis in range(3):
        if rng.random() < 0.5:
            img = np.flip(img, axis)
            lbl = np.flip(lbl, axis)
    k = int(rng.integers(0, 4))
    if k and img.shape[1] == img.shape[2]:
        img = np.rot90(img, k, axes=(1, 2))
        lbl = np.rot90(lbl, k, axes=(1, 2))
    img = img + rng.uniform(-jitter, jitter)
    return np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(lbl)


def _ds_targets(lbl: torch.Tensor, n_heads: int) -> list[torch.Tensor]:
    targets = [lbl]
    for _ in range(1, n_heads):
        lbl = lbl[:, ::2, ::2, ::2]
        targets.append(lbl)
    return targets


def deep_supervision_loss(logits: list[torch.Tensor], target: torch.Tensor) -> torch.Tensor:
    """Dice+CE summed over heads with weights halving per coarser level."""
    weights = np.array([0.5 ** i for i in range(len(logits))])
    weights = weights / weights.sum()
    targets = _ds_targets(target, len(logits))
    loss = torch.zeros((), dtype=logits[0].dtype, device=logits[0].device)
    for w, lg, tg in zip(weights, logits, targets):
        loss = loss + w * aux_seg_loss(lg, tg)
    return loss


class SegDiverged(RuntimeError):
    def __init__(self, epoch: int, iteration: int, loss: float):
        self.epoch = epoch
        self.iteration = iteration
        super().__init__(f"non-finite segmentation loss {loss} at epoch {epoch}, iter {iteration}")


@torch.no_grad()
def case_foreground_dice(model: UNet3D, case: SegCase, cfg: SegConfig,
                         device: str = "cpu") -> float:
    """Mean Dice over foreground classes from one padded full-volume pass."""
    model.eval()
    x = torch.tensor(case.vol.data[None, None], dtype=torch.float32, device=device)
    x, orig = pad_to_multiple(x, (cfg.divisor,) * 3)
    logits = model(x)[0]
    pred = logits.argmax(dim=1)[0][: orig[0], : orig[1], : orig[2]].cpu().numpy()
    gt = case.lbl.data
    dices = []
    for c in range(1, cfg.n_classes):
        p, g = pred == c, gt == c
        if not p.any() and not g.any():
            dices.append(1.0)
        else:
            dices.append(2.0 * np.logical_and(p, g).sum() / (p.sum() + g.sum()))
    return float(np.mean(dices))


def train_segmenter(
    model: UNet3D,
    train_cases: list[SegCase],
    sched: SegSchedule,
    cfg: SegConfig,
    val_cases: list[SegCase] | None = None,
    device: str = "cpu",
) -> tuple[UNet3D, dict]:
    """Patch-based supervised training with momentum SGD and poly LR decay.

    Returns the model and a history dict with per-epoch mean loss, the lr
    trace, and (epoch, dice) validation points when val_cases is given.
    """
    if not train_cases:
        raise ValueError("no training cases")
    torch.manual_seed(sched.seed)
    rng = np.random.default_rng(sched.seed)
    model.to(device)

    opt = torch.optim.SGD(
        model.parameters(), lr=sched.lr, momentum=sched.momentum, nesterov=True
    )
    history: dict = {"loss": [], "lr": [], "val_dice": []}
    n_iters = (len(train_cases) + sched.batch_size - 1) // sched.batch_size

    for epoch in range(sched.epochs):
        lr = poly_lr(epoch, sched.epochs, sched.lr, sched.poly_power)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = rng.permutation(len(train_cases))
        total = 0.0
        for it in range(n_iters):
            ids = order[it * sched.batch_size : (it + 1) * sched.batch_size]
            imgs, lbls = [], []
            for i in ids:
                img, lbl = sample_patch(
                    train_cases[int(i)], cfg.patch_size, rng, sched.oversample_fg
                )
                img, lbl = augment_patch(img, lbl, rng)
                imgs.append(img)
                lbls.append(lbl)
            x = torch.tensor(np.stack(imgs)[:, None], dtype=torch.float32, device=device)
            y = torch.tensor(np.stack(lbls), dtype=torch.long, device=device)
            opt.zero_grad(set_to_none=True)
            loss = deep_supervision_loss(model(x), y)
            value = float(loss)
            if not np.isfinite(value):
                raise SegDiverged(epoch, it, value)
            loss.backward()
            opt.step()
            total += value
        history["loss"].append(total / n_iters)
        history["lr"].append(lr)
        if val_cases and ((epoch + 1) % sched.val_every == 0 or epoch == sched.epochs - 1):
            dice = float(np.mean([
                case_foreground_dice(model, c, cfg, device) for c in val_cases
            ]))
            history["val_dice"].append((epoch, dice))
            log.info("epoch %d/%d loss=%.4f val_dice=%.4f",
                     epoch + 1, sched.epochs, history["loss"][-1], dice)
        else:
            log.info("epoch %d/%d loss=%.4f", epoch + 1, sched.epochs, history["loss"][-1])
    model.eval()
    return model, history


@dataclass
class SegModel:
    """A loaded segmentation checkpoint: network plus its configuration."""

    net: UNet3D
    config: SegConfig
    fold: int = 0
    epoch: int | None = None

    @torch.no_grad()
    def predict_logits(self, patch: torch.Tensor) -> torch.Tensor:
        self.net.eval()
        return self.net(patch)[0]


def save_checkpoint(
    model: UNet3D, cfg: SegConfig, path: str | Path,
    fold: int = 0, epoch: int | None = None, extra: dict | None = None,
) -> None:
    payload = {
        "format": "xmodseg-segmenter/1",
        "config": asdict(cfg),
        "fold": fold,
        "epoch": epoch,
        "state": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> SegModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "xmodseg-segmenter/1":
        raise ValueError(f"{path} is not a segmenter checkpoint")
    raw = payload["config"]
    cfg = SegConfig(**{**raw, "patch_size": tuple(raw["patch_size"])})
    net = build_segmenter(cfg)
    net.load_state_dict(payload["state"])
    net.eval()
    return SegModel(net=net, config=cfg, fold=payload["fold"], epoch=payload["epoch"])
