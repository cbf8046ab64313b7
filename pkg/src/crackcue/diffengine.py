"""Differentiable building blocks, Adam, finite-difference checks and the CCKPT1 container.

Activations are ``torch.Tensor`` objects laid out as (batch, channels, height,
width). The ops below are thin, shape-checked wrappers over torch kernels so
that the networks and losses only ever touch this narrow surface; reverse-mode
rules come from torch autograd and are verified against central finite
differences by :func:`gradient_check`.
"""
from __future__ import annotations

import json
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, ParameterError, ShapeError, TrainingDiverged

CKPT_MAGIC = b"CCKPT1"

# While a finite-difference probe runs, relu and maxpool append the branch
# they took (sign pattern / argmax) here so kinks inside the window show up.
_branch_log: list | None = None


def _check4(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise ShapeError(f"{name} must be a 4-D (N, C, H, W) tensor, got shape {tuple(x.shape)}")


def tensor4(array, requires_grad: bool = False, dtype=torch.float64) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(array), dtype=dtype)
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[None]
    _check4(t)
    return t.clone().requires_grad_(requires_grad)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Zero-padded cross-correlation."""
    _check4(x)
    if weight.dim() != 4:
        raise ShapeError(f"kernel must be (out, in, kh, kw), got {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match {weight.shape[0]} outputs")
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def maxpool2d(x, k: int, ceil_mode: bool = False) -> torch.Tensor:
    """Non-overlapping k x k max pool; gradient goes to the first maximum in row-major order."""
    _check4(x)
    if _branch_log is not None:
        _branch_log.append(F.max_pool2d(x.detach(), kernel_size=k, stride=k, ceil_mode=ceil_mode,
                                        return_indices=True)[1])
    return F.max_pool2d(x, kernel_size=k, stride=k, ceil_mode=ceil_mode)


def upsample_nearest(x, k: int) -> torch.Tensor:
    _check4(x)
    return F.interpolate(x, scale_factor=k, mode="nearest")


def relu(x) -> torch.Tensor:
    if _branch_log is not None:
        _branch_log.append(x.detach() > 0)
    return torch.relu(x)


def sigmoid(x) -> torch.Tensor:
    return torch.sigmoid(x)


def concat_channels(*xs) -> torch.Tensor:
    for x in xs:
        _check4(x)
    sizes = {(x.shape[0], x.shape[2], x.shape[3]) for x in xs}
    if len(sizes) != 1:
        raise ShapeError(f"cannot concatenate tensors with (N, H, W) {sorted(sizes)}")
    return torch.cat(xs, dim=1)


def slice_channels(x, start: int, stop: int) -> torch.Tensor:
    _check4(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel range [{start}, {stop}) outside 0..{x.shape[1]}")
    return x[:, start:stop]


def crop(x, height: int, width: int) -> torch.Tensor:
    _check4(x)
    if x.shape[2] < height or x.shape[3] < width:
        raise ShapeError(f"cannot crop {tuple(x.shape[2:])} to {(height, width)}")
    return x[:, :, :height, :width]


def bce_with_logits(logits, target) -> torch.Tensor:
    """Mean binary cross-entropy computed from logits in the log-sum-exp stable form."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def _as_named(params) -> dict[str, torch.Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {str(i): p for i, p in enumerate(params)}


def backward(loss: torch.Tensor, params) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. ``params`` (mapping or sequence).

    Each call starts from zero, so calling it twice on the same graph gives
    the same result rather than accumulating. Parameters that do not
    influence the loss get an all-zero gradient.
    """
    if loss.numel() != 1:
        raise ParameterError(f"backward needs a scalar root, got shape {tuple(loss.shape)}")
    named = _as_named(params)
    grads = torch.autograd.grad(loss.reshape(()), list(named.values()),
                                retain_graph=True, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g
            for (n, p), g in zip(named.items(), grads)}


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "t": self.t}


def param_norms(params) -> dict[str, float]:
    return {n: float(p.detach().double().norm()) for n, p in _as_named(params).items()}


def adam_step(params, grads, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Raises :class:`TrainingDiverged` (with a parameter-norm dump) on any
    non-finite gradient instead of applying it.
    """
    if state.lr <= 0:
        raise ParameterError("learning rate must be positive")
    named = _as_named(params)
    named_grads = _as_named(grads)
    for n, g in named_grads.items():
        if n not in named:
            raise ShapeError(f"gradient for unknown parameter {n!r}")
        if g.shape != named[n].shape:
            raise ShapeError(f"gradient {n!r} has shape {tuple(g.shape)}, "
                             f"parameter has {tuple(named[n].shape)}")
        if not torch.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {n!r} at step {state.t + 1}",
                                   param_norms(named))

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    with torch.no_grad():
        for n, p in named.items():
            g = named_grads.get(n)
            if g is None:
                g = torch.zeros_like(p)
            m = state.m.get(n)
            v = state.v.get(n)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            state.m[n], state.v[n] = m, v
            p -= state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps)
    return state


def _probe(f) -> tuple[float, list]:
    global _branch_log
    _branch_log = []
    try:
        return f().item(), _branch_log
    finally:
        _branch_log = None


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def gradient_check(f: Callable[[], torch.Tensor], params, eps: float = 1e-5,
                   n_samples: int | None = 64, seed: int = 0, floor: float = 1e-6,
                   skip_kinks: bool = True, stats: dict | None = None) -> float:
    """Max relative error between autograd and central differences.

    ``f`` re-evaluates the scalar objective from the current parameter
    values. Coordinates are sampled uniformly per parameter tensor (all of
    them when ``n_samples`` is None). The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.

    A central difference whose two evaluations took different relu or
    maxpool branches straddles a kink, where the objective has no derivative
    to compare against; with ``skip_kinks`` such coordinates are left out.
    ``stats``, if given, receives ``checked`` and ``skipped`` counts.
    """
    named = _as_named(params)
    analytic = backward(f(), named)
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    for name, p in named.items():
        flat = p.detach().view(-1)
        count = flat.numel()
        if n_samples is None or n_samples >= count:
            idx = np.arange(count)
        else:
            idx = rng.choice(count, size=n_samples, replace=False)
        grad_flat = analytic[name].reshape(-1)
        for i in idx:
            i = int(i)
            with torch.no_grad():
                orig = flat[i].item()
                flat[i] = orig + eps
                up, up_branches = _probe(f)
                flat[i] = orig - eps
                down, down_branches = _probe(f)
                flat[i] = orig
            if skip_kinks and not _same_branches(up_branches, down_branches):
                skipped += 1
                continue
            checked += 1
            numeric = (up - down) / (2.0 * eps)
            a = grad_flat[i].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst


def write_cckpt(path, manifest: dict, tensors: Sequence[tuple[str, np.ndarray]]) -> None:
    """Write a CCKPT1 file: tag line, JSON manifest, little-endian float32 payload."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        blobs.append(a.tobytes())
    doc = dict(manifest)
    doc["tensors"] = entries
    text = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + b" " + str(len(text)).encode("ascii") + b"\n")
        fh.write(text)
        for blob in blobs:
            fh.write(blob)


def read_cckpt(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        head = fh.readline().split()
        if len(head) != 2 or head[0] != CKPT_MAGIC:
            raise FormatError(f"{path}: missing {CKPT_MAGIC.decode()} tag")
        manifest = json.loads(fh.read(int(head[1])).decode("utf-8"))
        payload = fh.read()
    data = np.frombuffer(payload, dtype="<f4")
    out = {}
    for e in manifest["tensors"]:
        n = math.prod(e["shape"])
        start = e["offset"]
        if start + n > data.size:
            raise FormatError(f"{path}: truncated payload for {e['name']!r}")
        out[e["name"]] = data[start:start + n].reshape(e["shape"]).copy()
    return manifest, out
