"""Unpaired translation networks and their training loops.

Three styles share the same encoder / translation decoder / segmentation
decoder / discriminator building blocks:

  wcut      2D single-slice input, contrastive loss with similarity-weighted
            negatives
  cut       2.5D three-slice input, plain patch contrastive loss
  cyclegan  2.5D three-slice input, two generator/discriminator pairs with
            cycle consistency

All styles add an auxiliary segmentation loss on source slices, where
labels exist. 2.5D generators emit the translated center slice; when a
synthetic slice has to re-enter a 3-channel network (cycle reconstruction,
identity contrastive term) it is stacked to 3 channels by replication,
the same stacking a single-slice volume would get.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import networks
from .losses import (
    ContrastConfig,
    PatchFeatureSet,
    adversarial_loss,
    aux_seg_loss,
    cycle_loss,
    patch_nce,
    weight_nce,
)
from .volumes import LabelMap, Volume, require_aligned

log = logging.getLogger(__name__)

STYLES = ("wcut", "cyclegan", "cut")
STYLE_CHANNELS = {"wcut": 1, "cyclegan": 3, "cut": 3}
DEFAULT_LOSS_WEIGHTS = {"adv": 1.0, "contrast": 1.0, "cycle": 10.0, "seg": 1.0}


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries a snapshot of the loss components."""

    def __init__(self, epoch: int, iteration: int, components: dict[str, float]):
        self.epoch = epoch
        self.iteration = iteration
        self.components = components
        super().__init__(
            f"non-finite loss at epoch {epoch}, iteration {iteration}: {components}"
        )


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 1
    base_width: int = 64
    n_residual_blocks: int = 9
    downsamplings: int = 2

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.n_residual_blocks < 1:
            raise ValueError("need at least one residual block")


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 400
    lr: float = 2e-4
    batch_size: int = 1
    decay_start_epoch: int = 200
    seed: int = 0
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.decay_start_epoch > self.epochs:
            raise ValueError("decay_start_epoch must not exceed epochs")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs and batch_size must be positive")


def linear_decay_factor(epoch: int, epochs: int, decay_start: int) -> float:
    """1.0 until decay_start, then linear to 0 at `epochs`."""
    if epoch < decay_start:
        return 1.0
    return (epochs - epoch) / max(1, epochs - decay_start)


class SliceDataset:
    """Axial slice samples from preprocessed volumes.

    channels=1 yields single slices; channels=3 yields (i-1, i, i+1)
    stacks with edge slices replicate-padded. One sample per slice either
    way; labels, when present, are the center slice's label.
    """

    def __init__(self, volumes: list[tuple[Volume, LabelMap | None]], channels: int):
        if channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {channels}")
        if not volumes:
            raise ValueError("empty volume list")
        self.channels = channels
        self.volumes = volumes
        self.index: list[tuple[int, int]] = []
        plane = volumes[0][0].shape[1:]
        for vi, (vol, lbl) in enumerate(volumes):
            if vol.shape[0] < 1:
                raise ValueError(f"volume {vol.source_id!r} has no slices")
            if vol.shape[1:] != plane:
                raise ValueError("all volumes must share the in-plane shape")
            if lbl is not None:
                require_aligned(vol, lbl)
            self.index.extend((vi, si) for si in range(vol.shape[0]))
        self.plane = plane

    def __len__(self) -> int:
        return len(self.index)

    @property
    def has_labels(self) -> bool:
        return all(lbl is not None for _, lbl in self.volumes)

    def sample(self, i: int) -> tuple[np.ndarray, np.ndarray | None]:
        vi, si = self.index[i]
        vol, lbl = self.volumes[vi]
        n = vol.shape[0]
        if self.channels == 1:
            img = vol.data[si][None]
        else:
            idx = [max(si - 1, 0), si, min(si + 1, n - 1)]
            img = vol.data[idx]
        label = lbl.data[si] if lbl is not None else None
        return np.ascontiguousarray(img), label


def make_slice_dataset(
    volumes: list[tuple[Volume, LabelMap | None]], channels: int
) -> SliceDataset:
    return SliceDataset(volumes, channels)


class TranslatorBundle:
    """One translation style's networks plus its loss configuration."""

    def __init__(
        self,
        style: str,
        gen_spec: GeneratorSpec | None = None,
        contrast_cfg: ContrastConfig | None = None,
        loss_weights: dict[str, float] | None = None,
        n_classes: int = 4,
        seed: int = 0,
    ):
        style = style.lower()
        if style not in STYLES:
            raise ValueError(f"unknown style {style!r}, expected one of {STYLES}")
        expected_ch = STYLE_CHANNELS[style]
        if gen_spec is None:
            gen_spec = GeneratorSpec(in_channels=expected_ch)
        if gen_spec.in_channels != expected_ch:
            raise ValueError(f"{style} requires in_channels={expected_ch}")
        if style in ("wcut", "cut") and contrast_cfg is None:
            contrast_cfg = ContrastConfig()

        self.style = style
        self.gen_spec = gen_spec
        self.contrast_cfg = contrast_cfg if style in ("wcut", "cut") else None
        self.loss_weights = dict(DEFAULT_LOSS_WEIGHTS, **(loss_weights or {}))
        self.n_classes = n_classes
        self.seed = seed

        torch.manual_seed(seed)
        g = gen_spec
        self.encoder = networks.ResnetEncoder(
            g.in_channels, g.base_width, g.downsamplings, g.n_residual_blocks
        )
        self.decoder = networks.ResnetDecoder(1, g.base_width, g.downsamplings)
        self.seg_decoder = networks.UnetSegDecoder(g.base_width, g.downsamplings, n_classes)
        self.disc = networks.PatchDiscriminator(1, g.base_width)
        self.encoder_b = self.decoder_b = self.disc_b = None
        if style == "cyclegan":
            self.encoder_b = networks.ResnetEncoder(
                g.in_channels, g.base_width, g.downsamplings, g.n_residual_blocks
            )
            self.decoder_b = networks.ResnetDecoder(1, g.base_width, g.downsamplings)
            self.disc_b = networks.PatchDiscriminator(1, g.base_width)
        self.projector = None
        if self.contrast_cfg is not None:
            taps = self.contrast_taps()
            channels = {t: self.encoder.tap_channels[t] for t in taps}
            self.projector = networks.PatchProjector(channels, self.contrast_cfg.proj_dim)
        for m in self.modules().values():
            networks.init_weights(m)

    def contrast_taps(self) -> tuple[int, ...]:
        cfg = self.contrast_cfg
        if cfg is not None and cfg.layer_ids is not None:
            bad = [t for t in cfg.layer_ids if not 0 <= t < self.encoder.n_taps]
            if bad:
                raise ValueError(f"encoder layer ids {bad} out of range 0..{self.encoder.n_taps - 1}")
            return tuple(cfg.layer_ids)
        return networks.default_contrast_taps(self.encoder)

    def modules(self) -> dict[str, torch.nn.Module]:
        mods = {
            "encoder": self.encoder,
            "decoder": self.decoder,
            "seg_decoder": self.seg_decoder,
            "disc": self.disc,
        }
        for name in ("encoder_b", "decoder_b", "disc_b", "projector"):
            m = getattr(self, name)
            if m is not None:
                mods[name] = m
        return mods

    def generator_parameters(self):
        params = list(self.encoder.parameters()) + list(self.decoder.parameters())
        params += list(self.seg_decoder.parameters())
        if self.encoder_b is not None:
            params += list(self.encoder_b.parameters()) + list(self.decoder_b.parameters())
        if self.projector is not None:
            params += list(self.projector.parameters())
        return params

    def discriminator_parameters(self):
        params = list(self.disc.parameters())
        if self.disc_b is not None:
            params += list(self.disc_b.parameters())
        return params

    def parameter_count(self) -> int:
        return sum(p.numel() for m in self.modules().values() for p in m.parameters())

    def train_mode(self, flag: bool = True):
        for m in self.modules().values():
            m.train(flag)

    def save(self, path: str | Path) -> None:
        payload = {
            "format": "xmodseg-translator/1",
            "style": self.style,
            "gen_spec": asdict(self.gen_spec),
            "contrast_cfg": asdict(self.contrast_cfg) if self.contrast_cfg else None,
            "loss_weights": self.loss_weights,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "state": {name: m.state_dict() for name, m in self.modules().items()},
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)

    @classmethod
    def load(cls, path: str | Path) -> "TranslatorBundle":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format") != "xmodseg-translator/1":
            raise ValueError(f"{path} is not a translator checkpoint")
        contrast = payload["contrast_cfg"]
        cc = ContrastConfig(**{**contrast, "layer_ids": tuple(contrast["layer_ids"]) if contrast["layer_ids"] else None}) if contrast else None
        bundle = cls(
            style=payload["style"],
            gen_spec=GeneratorSpec(**payload["gen_spec"]),
            contrast_cfg=cc,
            loss_weights=payload["loss_weights"],
            n_classes=payload["n_classes"],
            seed=payload["seed"],
        )
        for name, m in bundle.modules().items():
            m.load_state_dict(payload["state"][name])
        return bundle


def _stack3(center: torch.Tensor) -> torch.Tensor:
    """Replicate a (B, 1, H, W) synthetic slice into a 3-channel stack."""
    return center.repeat(1, 3, 1, 1)


def _as_input(img: torch.Tensor, in_channels: int) -> torch.Tensor:
    if img.shape[1] == in_channels:
        return img
    if img.shape[1] == 1 and in_channels == 3:
        return _stack3(img)
    raise ValueError(f"cannot adapt {img.shape[1]}-channel image to {in_channels} channels")


def sample_patch_features(
    encoder: networks.ResnetEncoder,
    projector: networks.PatchProjector,
    real: torch.Tensor,
    fake: torch.Tensor,
    cfg: ContrastConfig,
    taps: tuple[int, ...],
    rng: np.random.Generator,
) -> list[PatchFeatureSet]:
    """Project encoder features of (real, fake) at shared random locations.

    Anchors come from the synthetic image, positives from the original;
    per layer, min(patches_per_layer, spatial positions) locations.
    """
    if real.shape[2:] != fake.shape[2:]:
        raise ValueError("real and fake images must share spatial shape")
    _, real_feats = encoder(_as_input(real, encoder.tap_channels[0]), taps)
    _, fake_feats = encoder(_as_input(fake, encoder.tap_channels[0]), taps)
    sets = []
    for tap in taps:
        rf, ff = real_feats[tap], fake_feats[tap]
        b, c, h, w = rf.shape
        n = min(cfg.patches_per_layer, h * w)
        locs = rng.permutation(h * w)[:n]
        idx = torch.as_tensor(locs.copy(), dtype=torch.long, device=rf.device)
        rf = rf.flatten(2).permute(0, 2, 1).reshape(b * h * w, c)
        ff = ff.flatten(2).permute(0, 2, 1).reshape(b * h * w, c)
        anchors = projector(tap, ff[idx])
        positives = projector(tap, rf[idx])
        anchors = torch.nn.functional.normalize(anchors, dim=1)
        positives = torch.nn.functional.normalize(positives, dim=1)
        sets.append(PatchFeatureSet(anchors, positives, layer_id=tap, locations=locs))
    return sets


def _contrast_term(bundle: TranslatorBundle, original: torch.Tensor,
                   synthetic: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    cfg = bundle.contrast_cfg
    taps = bundle.contrast_taps()
    sets = sample_patch_features(
        bundle.encoder, bundle.projector, original, synthetic, cfg, taps, rng
    )
    # the op contract is the per-set sum; normalize per patch so a 1.0
    # weight keeps this term on the same scale as the other objectives
    if bundle.style == "wcut":
        per_layer = [weight_nce(fs, cfg.tau, cfg.beta) / fs.n for fs in sets]
    else:
        per_layer = [patch_nce(fs, cfg.tau) / fs.n for fs in sets]
    return torch.stack(per_layer).mean()


def _check_plane(shape: tuple[int, int], downsamplings: int) -> None:
    div = 2 ** downsamplings
    if shape[0] % div or shape[1] % div:
        raise ValueError(
            f"in-plane shape {shape} must be divisible by {div} for this generator"
        )


def train_translator(
    bundle: TranslatorBundle,
    src: SliceDataset,
    tgt: SliceDataset,
    sched: TrainSchedule,
    out_dir: str | Path | None = None,
    device: str = "cpu",
) -> tuple[TranslatorBundle, dict[str, list[float]]]:
    """Adversarial training of one translation bundle.

    Per iteration the discriminator(s) and then the generator stack are
    updated; returns per-epoch mean losses. Any non-finite loss raises
    TrainingDiverged with a component snapshot.
    """
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("source and target datasets must be nonempty")
    if not src.has_labels:
        raise ValueError("source dataset must carry labels for the auxiliary segmentation loss")
    _check_plane(src.plane, bundle.gen_spec.downsamplings)
    _check_plane(tgt.plane, bundle.gen_spec.downsamplings)

    torch.manual_seed(sched.seed)
    rng = np.random.default_rng(sched.seed)
    for m in bundle.modules().values():
        m.to(device)
    bundle.train_mode(True)

    opt_g = torch.optim.Adam(bundle.generator_parameters(), lr=sched.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(bundle.discriminator_parameters(), lr=sched.lr, betas=(0.5, 0.999))

    w = bundle.loss_weights
    keys = ["adv_g", "adv_d", "contrast", "cycle", "seg", "total_g"]
    history: dict[str, list[float]] = {k: [] for k in keys}
    history["lr"] = []
    n_iters = (len(src) + sched.batch_size - 1) // sched.batch_size

    def batch(dataset: SliceDataset, ids: np.ndarray):
        imgs, lbls = [], []
        for i in ids:
            img, lbl = dataset.sample(int(i))
            imgs.append(img)
            if lbl is not None:
                lbls.append(lbl)
        images = torch.tensor(np.stack(imgs), dtype=torch.float32, device=device)
        labels = (
            torch.tensor(np.stack(lbls), dtype=torch.long, device=device) if lbls else None
        )
        return images, labels

    for epoch in range(sched.epochs):
        factor = linear_decay_factor(epoch, sched.epochs, sched.decay_start_epoch)
        for group in list(opt_g.param_groups) + list(opt_d.param_groups):
            group["lr"] = sched.lr * factor
        src_order = rng.permutation(len(src))
        tgt_order = np.resize(rng.permutation(len(tgt)), len(src))
        sums = dict.fromkeys(keys, 0.0)

        for it in range(n_iters):
            lo, hi = it * sched.batch_size, (it + 1) * sched.batch_size
            src_img, src_lbl = batch(src, src_order[lo:hi])
            tgt_img, _ = batch(tgt, tgt_order[lo:hi][: len(src_order[lo:hi])])
            center = src_img[:, src_img.shape[1] // 2 : src_img.shape[1] // 2 + 1]
            tgt_center = tgt_img[:, tgt_img.shape[1] // 2 : tgt_img.shape[1] // 2 + 1]

            bottleneck, skip_feats = bundle.encoder(src_img, bundle.encoder.skip_taps())
            fake = bundle.decoder(bottleneck)
            fake_src = None
            if bundle.style == "cyclegan":
                fake_src = bundle.decoder_b(bundle.encoder_b(tgt_img)[0])

            # discriminator step
            for p in bundle.discriminator_parameters():
                p.requires_grad_(True)
            opt_d.zero_grad(set_to_none=True)
            d_loss = 0.5 * (
                adversarial_loss(bundle.disc(tgt_center), True)
                + adversarial_loss(bundle.disc(fake.detach()), False)
            )
            if bundle.style == "cyclegan":
                d_loss = d_loss + 0.5 * (
                    adversarial_loss(bundle.disc_b(center), True)
                    + adversarial_loss(bundle.disc_b(fake_src.detach()), False)
                )
            d_loss.backward()
            opt_d.step()
            for p in bundle.discriminator_parameters():
                p.requires_grad_(False)

            # generator step
            opt_g.zero_grad(set_to_none=True)
            adv_g = adversarial_loss(bundle.disc(fake), True)
            skips = [skip_feats[t] for t in bundle.encoder.skip_taps()]
            seg_logits = bundle.seg_decoder(bottleneck, skips)
            seg = aux_seg_loss(seg_logits, src_lbl)

            contrast = torch.zeros((), device=device)
            cycle = torch.zeros((), device=device)
            if bundle.style in ("wcut", "cut"):
                c_src = _contrast_term(bundle, src_img, fake, rng)
                idt_w = bundle.contrast_cfg.identity_weight
                if idt_w > 0:
                    fake_idt = bundle.decoder(bundle.encoder(tgt_img)[0])
                    c_idt = _contrast_term(bundle, tgt_img, fake_idt, rng)
                    contrast = (c_src + idt_w * c_idt) / (1.0 + idt_w)
                else:
                    contrast = c_src
            else:
                adv_g = adv_g + adversarial_loss(bundle.disc_b(fake_src), True)
                rec_src = bundle.decoder_b(bundle.encoder_b(_stack3(fake))[0])
                rec_tgt = bundle.decoder(bundle.encoder(_stack3(fake_src))[0])
                cycle = cycle_loss(center, rec_src) + cycle_loss(tgt_center, rec_tgt)

            g_loss = (
                w["adv"] * adv_g
                + w["contrast"] * contrast
                + w["cycle"] * cycle
                + w["seg"] * seg
            )
            g_loss.backward()
            opt_g.step()

            values = {
                "adv_g": float(adv_g),
                "adv_d": float(d_loss),
                "contrast": float(contrast),
                "cycle": float(cycle),
                "seg": float(seg),
                "total_g": float(g_loss),
            }
            if not all(np.isfinite(v) for v in values.values()):
                raise TrainingDiverged(epoch, it, values)
            for k, v in values.items():
                sums[k] += v

        for k in keys:
            history[k].append(sums[k] / n_iters)
        history["lr"].append(sched.lr * factor)
        log.info(
            "epoch %d/%d g=%.4f d=%.4f", epoch + 1, sched.epochs,
            history["total_g"][-1], history["adv_d"][-1],
        )
        if out_dir is not None and (epoch + 1) % sched.checkpoint_every == 0:
            bundle.save(Path(out_dir) / f"ckpt_epoch{epoch + 1:04d}.pt")

    bundle.train_mode(False)
    if out_dir is not None:
        bundle.save(Path(out_dir) / "ckpt_final.pt")
    return bundle, history


def translate_volume(bundle: TranslatorBundle, vol: Volume, device: str = "cpu") -> Volume:
    """Translate every axial slice; geometry metadata rides along unchanged."""
    _check_plane(vol.shape[1:], bundle.gen_spec.downsamplings)
    dataset = SliceDataset([(vol, None)], channels=bundle.gen_spec.in_channels)
    bundle.train_mode(False)
    for m in bundle.modules().values():
        m.to(device)
    out = np.empty_like(vol.data)
    with torch.no_grad():
        for i in range(len(dataset)):
            img, _ = dataset.sample(i)
            x = torch.tensor(img[None], dtype=torch.float32, device=device)
            fake = bundle.decoder(bundle.encoder(x)[0])
            out[i] = fake[0, 0].clamp(-1.0, 1.0).cpu().numpy()
    return Volume(
        data=out,
        spacing_mm=vol.spacing_mm,
        orientation=vol.orientation,
        source_id=vol.source_id,
        flags=vol.flags,
    )


def generate_multistyle_dataset(
    bundles: list[TranslatorBundle],
    labeled_src: list[tuple[Volume, LabelMap]],
    device: str = "cpu",
) -> list[tuple[Volume, LabelMap, str]]:
    """Translate every source volume with every bundle; labels pass through."""
    if not 1 <= len(bundles) <= 3:
        raise ValueError("expected between 1 and 3 trained bundles")
    out = []
    for bundle in bundles:
        for vol, lbl in labeled_src:
            fake = translate_volume(bundle, vol, device=device)
            out.append((fake, lbl, bundle.style))
    return out
