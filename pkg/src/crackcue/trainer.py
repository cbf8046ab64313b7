"""Losses, joint training of the reconstruction and segmentation networks, inference."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import diffengine as de
from .cuegen import block_max_upsample
from .errors import ConfigError, ParameterError, ShapeError, TrainingDiverged
from .imagecore import as_image, as_mask, dilate_mask, resize_image, resize_mask
from .networks import (CUE_MODES, Checkpoint, ReconNet, ReconNetConfig, SegNet,
                       SegNetConfig)

log = logging.getLogger(__name__)

CONFIG_KEYS = ("epochs", "batch_size", "lr", "lambda", "kernel", "dilation_d", "seed",
               "resolution", "detach_cue", "recon", "seg", "data")
SEG_KEYS = ("depth", "base_channels", "skip_connections", "seed", "cue_mode")
RECON_KEYS = tuple(f.name for f in fields(ReconNetConfig))


def _t(x, dtype=None):
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    return t.to(dtype) if dtype is not None else t


def _nchw_image(x) -> torch.Tensor:
    """Accept (H, W, 3) arrays or (N, 3, H, W) tensors."""
    t = _t(x)
    if t.dim() == 3:
        t = t.permute(2, 0, 1)[None]
    return t


def _nchw_field(x) -> torch.Tensor:
    t = _t(x)
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[:, None]
    return t


def reconstruction_loss(image, background, dilated_mask) -> torch.Tensor:
    """Masked squared error: sum over channels and unmasked pixels, divided by H*W.

    Batched inputs average this per-image quantity over the batch.
    """
    i = _nchw_image(image)
    b = _nchw_image(background)
    yd = _nchw_field(dilated_mask)
    if i.shape != b.shape:
        raise ShapeError(f"image {tuple(i.shape)} and background {tuple(b.shape)} differ")
    if yd.shape[0] != i.shape[0] or yd.shape[2:] != i.shape[2:]:
        raise ShapeError(f"mask {tuple(yd.shape)} does not match image {tuple(i.shape)}")
    b = b.to(torch.promote_types(i.dtype, b.dtype))
    i = i.to(b.dtype)
    keep = 1.0 - yd.to(b.dtype)
    n = i.shape[2] * i.shape[3]
    per_image = (keep * (i - b) ** 2).sum(dim=(1, 2, 3)) / n
    return per_image.mean()


def segmentation_loss(target, logits) -> torch.Tensor:
    y = _nchw_field(target)
    z = _nchw_field(logits)
    if y.shape != z.shape:
        raise ShapeError(f"target {tuple(y.shape)} and logits {tuple(z.shape)} differ")
    return de.bce_with_logits(z, y)


def total_loss(l_seg, l_rec, lam: float):
    if lam < 0:
        raise ParameterError("lambda must be >= 0")
    return l_seg + lam * l_rec


def fine_cue_t(image: torch.Tensor, background: torch.Tensor) -> torch.Tensor:
    """Batched (N, 3, H, W) -> (N, 1, H, W) channel-mean absolute difference."""
    if image.shape != background.shape:
        raise ShapeError(f"image {tuple(image.shape)} and background {tuple(background.shape)} differ")
    return (image - background).abs().mean(dim=1, keepdim=True)


@dataclass
class TrainConfig:
    epochs: int = 700
    batch_size: int = 4
    lr: float = 1e-4
    lam: float = 1.0
    kernel: int = 8
    dilation_d: int = 4
    seed: int = 0
    resolution: int = 512
    detach_cue: bool = False
    cue_mode: str = "fine"
    recon: ReconNetConfig = field(default_factory=ReconNetConfig)
    seg: SegNetConfig = field(default_factory=SegNetConfig)
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "kernel", "dilation_d", "resolution"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.kernel < 2:
            raise ConfigError("kernel must be >= 2")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.cue_mode not in CUE_MODES:
            raise ConfigError(f"cue_mode must be one of {CUE_MODES}, got {self.cue_mode!r}")
        want = 3 if self.cue_mode == "none" else 4
        if self.seg.in_channels != want:
            self.seg = SegNetConfig(**{**asdict(self.seg), "in_channels": want})

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(CONFIG_KEYS))
        missing = [k for k in CONFIG_KEYS if k not in doc]
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if missing:
            raise ConfigError(f"missing config keys: {missing}")
        recon = doc["recon"] or {}
        seg = dict(doc["seg"] or {})
        if not isinstance(recon, dict) or not isinstance(seg, dict):
            raise ConfigError("recon and seg must be objects")
        bad = sorted(set(recon) - set(RECON_KEYS)) + sorted(set(seg) - set(SEG_KEYS))
        if bad:
            raise ConfigError(f"unknown network config keys: {bad}")
        data = doc["data"]
        if not isinstance(data, dict) or not (("train_dir" in data) ^ ("synthetic" in data)):
            raise ConfigError("data must name exactly one of train_dir or synthetic")
        if set(data) - {"train_dir", "synthetic", "n", "seed"}:
            raise ConfigError(f"unknown data keys: {sorted(set(data) - {'train_dir', 'synthetic', 'n', 'seed'})}")
        cue_mode = seg.pop("cue_mode", "fine")
        _check_types(doc)
        try:
            return cls(epochs=doc["epochs"], batch_size=doc["batch_size"], lr=float(doc["lr"]),
                       lam=float(doc["lambda"]), kernel=doc["kernel"],
                       dilation_d=doc["dilation_d"], seed=doc["seed"],
                       resolution=doc["resolution"], detach_cue=doc["detach_cue"],
                       cue_mode=cue_mode, recon=ReconNetConfig(**recon),
                       seg=SegNetConfig(**seg), data=dict(data))
        except (TypeError, ParameterError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        seg = asdict(self.seg)
        seg.pop("in_channels")
        seg["cue_mode"] = self.cue_mode
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
                "lambda": self.lam, "kernel": self.kernel, "dilation_d": self.dilation_d,
                "seed": self.seed, "resolution": self.resolution,
                "detach_cue": self.detach_cue, "recon": asdict(self.recon), "seg": seg,
                "data": dict(self.data)}

    @classmethod
    def load(cls, path) -> TrainConfig:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)


def _check_types(doc):
    ints = ("epochs", "batch_size", "kernel", "dilation_d", "seed", "resolution")
    for k in ints:
        if not isinstance(doc[k], int) or isinstance(doc[k], bool):
            raise ConfigError(f"{k} must be an integer")
    for k in ("lr", "lambda"):
        if not isinstance(doc[k], (int, float)) or isinstance(doc[k], bool):
            raise ConfigError(f"{k} must be a number")
    if not isinstance(doc["detach_cue"], bool):
        raise ConfigError("detach_cue must be a boolean")


def paper_config(**overrides) -> TrainConfig:
    """Full-scale settings: 700 epochs, 512x512, 10+10 reconstruction layers."""
    return TrainConfig(**overrides)


def desk_config(**overrides) -> TrainConfig:
    """64x64 images, shrunken networks and 30 epochs; optimiser settings unchanged."""
    base = dict(epochs=30, resolution=64,
                recon=ReconNetConfig(encoder_layers=4, decoder_layers=4, base_channels=8),
                seg=SegNetConfig(depth=3, base_channels=8))
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, **rec):
        self.records.append(rec)

    def epoch_means(self, key: str = "l_total") -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.records:
            by_epoch.setdefault(r["epoch"], []).append(r[key])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]

    def losses(self) -> list[tuple]:
        """Loss columns only; the part of the log that is deterministic."""
        return [(r["step"], r["l_rec"], r["l_seg"], r["l_total"]) for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "l_rec", "l_seg", "l_total", "wall_ms"])
            for r in self.records:
                w.writerow([r["step"], repr(r["l_rec"]), repr(r["l_seg"]),
                            repr(r["l_total"]), f"{r['wall_ms']:.3f}"])


@dataclass
class _Batchable:
    image: torch.Tensor
    coarse_bg: torch.Tensor
    coarse_q: torch.Tensor
    gt: torch.Tensor
    gt_dilated: torch.Tensor


def prepare(dataset, config: TrainConfig) -> _Batchable:
    """Resize pairs to the training resolution and precompute the data-only tensors."""
    size = (config.resolution, config.resolution)
    imgs, bgs, qs, ys, yds = [], [], [], [], []
    for image, gt in dataset:
        img = resize_image(as_image(image), size)
        y = resize_mask(as_mask(gt), size)
        bg = block_max_upsample(img, config.kernel)
        imgs.append(img.transpose(2, 0, 1))
        bgs.append(bg.transpose(2, 0, 1))
        qs.append(np.abs(img - bg).mean(axis=2)[None])
        ys.append(y[None])
        yds.append(dilate_mask(y, config.dilation_d)[None])

    def stack(xs):
        return torch.from_numpy(np.stack(xs).astype(np.float32))

    return _Batchable(stack(imgs), stack(bgs), stack(qs), stack(ys), stack(yds))


def build_checkpoint(config: TrainConfig) -> Checkpoint:
    torch.manual_seed(config.seed)
    recon = None
    if config.cue_mode == "fine":
        recon = ReconNet(ReconNetConfig(**{**asdict(config.recon), "seed": config.seed}))
    seg = SegNet(SegNetConfig(**{**asdict(config.seg), "seed": config.seed + 1}))
    return Checkpoint(seg=seg, recon=recon,
                      adam=de.AdamState(lr=config.lr), cue_mode=config.cue_mode,
                      kernel=config.kernel, train_config=config.to_dict())


def pipeline_losses(ckpt: Checkpoint, x, bc, qc, y, yd, lam: float, detach_cue: bool = False):
    """Forward one batch through the configured pipeline; returns (l_rec, l_seg, total)."""
    if ckpt.cue_mode == "fine":
        bf = ckpt.recon(bc)
        l_rec = reconstruction_loss(x, bf, yd)
        q = fine_cue_t(x, bf.detach() if detach_cue else bf)
        seg_in = de.concat_channels(x, q)
    else:
        l_rec = torch.zeros((), dtype=x.dtype)
        seg_in = de.concat_channels(x, qc) if ckpt.cue_mode == "coarse" else x
    logits = ckpt.seg(seg_in)
    l_seg = segmentation_loss(y, logits)
    return l_rec, l_seg, total_loss(l_seg, l_rec, lam)


def train(dataset, config: TrainConfig, progress=None) -> tuple[Checkpoint, TrainLog]:
    """Jointly train both networks with Adam on the sum of both losses.

    ``dataset`` is a sequence of (image, gt) pairs. Batches are drawn from a
    seeded per-epoch permutation; the last partial batch is kept.
    """
    dataset = list(dataset)
    if not dataset:
        raise ParameterError("training set is empty")
    torch.use_deterministic_algorithms(True)
    data = prepare(dataset, config)
    ckpt = build_checkpoint(config)
    params = ckpt.named_parameters()
    rng = np.random.default_rng(config.seed)
    tlog = TrainLog()
    n = len(dataset)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            t0 = time.perf_counter()
            idx = torch.from_numpy(order[start:start + config.batch_size])
            l_rec, l_seg, loss = pipeline_losses(
                ckpt, data.image[idx], data.coarse_bg[idx], data.coarse_q[idx],
                data.gt[idx], data.gt_dilated[idx], config.lam, config.detach_cue)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step + 1}", de.param_norms(params))
            grads = de.backward(loss, params)
            de.adam_step(params, grads, ckpt.adam)
            step += 1
            tlog.append(step=step, epoch=epoch, l_rec=l_rec.item(), l_seg=l_seg.item(),
                        l_total=loss.item(), wall_ms=(time.perf_counter() - t0) * 1e3)
        if progress is not None:
            progress(epoch, tlog)
        log.debug("epoch %d mean loss %.5f", epoch, tlog.epoch_means()[-1])
    ckpt.step = step
    ckpt.rng_state = rng.bit_generator.state
    return ckpt, tlog


@torch.no_grad()
def predict(images, ckpt: Checkpoint, batch_size: int = 8):
    """Run the test-time pipeline over a list of (H, W, 3) images.

    Returns (cues, probs): per-image cue maps (None for the cue-free model)
    and sigmoid probability maps, all as float64 (H, W) arrays.
    """
    cues, probs = [], []
    images = [as_image(im) for im in images]
    groups: dict[tuple, list[int]] = {}
    for i, im in enumerate(images):
        groups.setdefault(im.shape, []).append(i)
    out_q: dict[int, np.ndarray | None] = {}
    out_p: dict[int, np.ndarray] = {}
    for shape, members in groups.items():
        for s in range(0, len(members), batch_size):
            chunk = members[s:s + batch_size]
            batch = np.stack([images[i] for i in chunk])
            bg = np.stack([block_max_upsample(images[i], ckpt.kernel) for i in chunk])
            x = torch.from_numpy(batch.transpose(0, 3, 1, 2).astype(np.float32))
            if ckpt.cue_mode == "fine":
                bf = ckpt.recon(torch.from_numpy(bg.transpose(0, 3, 1, 2).astype(np.float32)))
                q = fine_cue_t(x, bf)
                seg_in = de.concat_channels(x, q)
            elif ckpt.cue_mode == "coarse":
                q = torch.from_numpy(np.abs(batch - bg).mean(axis=3)[:, None].astype(np.float32))
                seg_in = de.concat_channels(x, q)
            else:
                q = None
                seg_in = x
            p = de.sigmoid(ckpt.seg(seg_in))
            for j, i in enumerate(chunk):
                out_p[i] = p[j, 0].double().numpy()
                out_q[i] = None if q is None else q[j, 0].double().numpy()
    for i in range(len(images)):
        cues.append(out_q[i])
        probs.append(out_p[i])
    return cues, probs


def infer(image, ckpt: Checkpoint):
    """Coarse background -> reconstruction -> cue -> concat -> segment -> sigmoid."""
    cues, probs = predict([image], ckpt, batch_size=1)
    return cues[0], probs[0]
