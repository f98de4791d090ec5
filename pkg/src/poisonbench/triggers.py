"""Trigger functions x' = T(x, t) and the optimized (UAP) trigger generator."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .core import TriggerSpec, torch_seed_from
from .training import device_of

log = logging.getLogger(__name__)

_PLUGINS: dict[str, Callable[[np.ndarray, dict], np.ndarray]] = {}


class UnknownPluginError(KeyError):
    pass


def register_trigger_plugin(plugin_id: str, fn: Callable[[np.ndarray, dict], np.ndarray]) -> None:
    """Register ``fn(images_nchw, params) -> poisoned_nchw`` under ``plugin_id``.

    This is the extension point for trigger families that need their own
    generators (ISSBA, WaNet, ...).
    """
    _PLUGINS[plugin_id] = fn


@dataclass(frozen=True)
class PoisonedImage:
    pixels: np.ndarray
    source_index: int
    trigger_ref: str


# ---------------------------------------------------------------------------
# defaults
# ---------------------------------------------------------------------------


def checkerboard_patch(size: int = 3, channels: int = 3) -> np.ndarray:
    board = (np.indices((size, size)).sum(axis=0) % 2 == 0).astype(np.float32)
    return np.repeat(board[None], channels, axis=0)


def badnets_trigger(image_shape, patch: Optional[np.ndarray] = None, location=None) -> TriggerSpec:
    """Patch trigger; defaults to a 3x3 checkerboard in the bottom-right corner."""
    c = image_shape[0]
    if patch is None:
        patch = checkerboard_patch(3, c)
    if location is None:
        location = (-patch.shape[1], -patch.shape[2])
    return TriggerSpec("badnets_patch", patch=patch, location=location)


def default_blend_image(image_shape) -> np.ndarray:
    c, h, w = image_shape
    with resources.files("poisonbench.assets").joinpath("blend_noise.npy").open("rb") as fh:
        noise = np.load(fh).astype(np.float32) / 255.0
    t = torch.from_numpy(noise)[None]
    if (h, w) != tuple(noise.shape[1:]):
        t = F.interpolate(t, size=(h, w), mode="nearest")
    out = t[0].numpy()
    if c != out.shape[0]:
        out = np.repeat(out.mean(axis=0, keepdims=True), c, axis=0)
    return np.ascontiguousarray(out, dtype=np.float32)


def blended_trigger(image_shape, blend_lambda: float = 0.15, blend_image: Optional[np.ndarray] = None,
                    path: Optional[str] = None) -> TriggerSpec:
    if blend_image is None and path is not None:
        from PIL import Image

        pil = Image.open(path).convert("RGB" if image_shape[0] == 3 else "L")
        pil = pil.resize((image_shape[2], image_shape[1]))
        arr = np.asarray(pil, dtype=np.float32) / 255.0
        blend_image = arr.transpose(2, 0, 1) if arr.ndim == 3 else arr[None]
    if blend_image is None:
        blend_image = default_blend_image(image_shape)
    return TriggerSpec("blended", blend_image=blend_image, blend_lambda=blend_lambda)


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------


def _patch_box(spec: TriggerSpec, h: int, w: int) -> tuple[int, int, int, int]:
    ph, pw = spec.patch.shape[1:]
    r, c = spec.location
    r = r if r >= 0 else h + r
    c = c if c >= 0 else w + c
    if r < 0 or c < 0 or r + ph > h or c + pw > w:
        raise ValueError(f"patch of size {ph}x{pw} at {spec.location} does not fit a {h}x{w} image")
    return r, r + ph, c, c + pw


def apply_trigger_batch(images: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Stamp ``spec`` onto a batch of NCHW images in [0, 1]; returns a new array."""
    x = np.asarray(images, dtype=np.float32)
    if x.ndim != 4:
        raise ValueError(f"expected an NCHW batch, got shape {x.shape}")
    shape = x.shape[1:]
    if spec.kind == "badnets_patch":
        r0, r1, c0, c1 = _patch_box(spec, shape[1], shape[2])
        if spec.patch.shape[0] not in (1, shape[0]):
            raise ValueError("patch channel count does not match the image")
        out = x.copy()
        out[:, :, r0:r1, c0:c1] = spec.patch
    elif spec.kind == "blended":
        if spec.blend_image.shape != shape:
            raise ValueError(f"blend image shape {spec.blend_image.shape} != image shape {shape}")
        lam = np.float32(spec.blend_lambda)
        if lam == 0:
            return x.copy()
        out = lam * spec.blend_image + (np.float32(1) - lam) * x
    elif spec.kind == "optimized_uap":
        if spec.perturbation.shape != shape:
            raise ValueError(f"perturbation shape {spec.perturbation.shape} != image shape {shape}")
        out = x + spec.perturbation
    else:
        if spec.plugin_id not in _PLUGINS:
            raise UnknownPluginError(spec.plugin_id)
        out = np.asarray(_PLUGINS[spec.plugin_id](x.copy(), dict(spec.plugin_params)), dtype=np.float32)
        if out.shape != x.shape:
            raise ValueError("trigger plugin changed the image shape")
    return np.clip(out, 0.0, 1.0, out=out if out is not x else None)


def apply_trigger(image: np.ndarray, spec: TriggerSpec, source_index: int = -1) -> PoisonedImage:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise ValueError(f"expected a CHW image, got shape {img.shape}")
    return PoisonedImage(apply_trigger_batch(img[None], spec)[0], source_index, spec.hash)


def apply_trigger_torch(images: torch.Tensor, spec: TriggerSpec) -> torch.Tensor:
    return torch.from_numpy(apply_trigger_batch(images.numpy(), spec))


# ---------------------------------------------------------------------------
# optimized universal perturbation
# ---------------------------------------------------------------------------


@dataclass
class UAPResult:
    trigger: TriggerSpec
    fooling_rate: float
    base_rate: float
    status: str
    losses: list


def _predict_rate(model, x: torch.Tensor, delta: torch.Tensor, target: int, batch_size: int) -> float:
    if len(x) == 0:
        return float("nan")
    hits = 0
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            xb = torch.clamp(x[s:s + batch_size] + delta, 0, 1)
            hits += int((model(xb).argmax(1) == target).sum())
    return hits / len(x)


def generate_uap(model: torch.nn.Module, dataset, target: int, eps: float = 8 / 255, steps: int = 200,
                 step_size: Optional[float] = None, rng: Optional[np.random.Generator] = None,
                 batch_size: int = 128, holdout: int = 1000, fooling_floor: float = 0.5) -> UAPResult:
    """Targeted universal perturbation by projected sign-gradient descent.

    Each step lowers the mean cross-entropy toward ``target`` over a random
    mini-batch and projects back onto the L-inf ball of radius ``eps``. The
    fooling rate is measured on a held-out slice of non-target samples.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    step_size = eps / 10 if step_size is None else step_size
    rng = rng if rng is not None else np.random.default_rng(0)
    model.eval()

    n = len(dataset)
    order = rng.permutation(n)
    n_hold = min(holdout, max(1, n // 5))
    hold_idx, fit_idx = np.sort(order[:n_hold]), order[n_hold:]
    if len(fit_idx) == 0:
        fit_idx = hold_idx
    hold_idx = hold_idx[dataset.labels[hold_idx] != target]
    dev = device_of(model)
    x_hold = dataset.tensor(hold_idx).to(dev)

    delta = torch.zeros(dataset.image_shape, device=dev)
    gen = torch.Generator().manual_seed(torch_seed_from(rng))
    base_rate = _predict_rate(model, x_hold, delta, target, batch_size)
    losses = []
    for _ in range(steps):
        pick = torch.randint(len(fit_idx), (min(batch_size, len(fit_idx)),), generator=gen).numpy()
        xb = dataset.tensor(np.sort(fit_idx[pick])).to(dev)
        d = delta.clone().requires_grad_(True)
        logits = model(torch.clamp(xb + d, 0, 1))
        loss = F.cross_entropy(logits, torch.full((len(xb),), target, dtype=torch.long, device=dev))
        (grad,) = torch.autograd.grad(loss, d)
        with torch.no_grad():
            delta = torch.clamp(delta - step_size * grad.sign(), -eps, eps)
        losses.append(float(loss.detach()))

    fooling = _predict_rate(model, x_hold, delta, target, batch_size)
    status = "ok"
    if steps > 0 and fooling < fooling_floor:
        status = "warning"
        warnings.warn(f"UAP fooling rate {fooling:.3f} below floor {fooling_floor}", RuntimeWarning)
    spec = TriggerSpec("optimized_uap", perturbation=delta.cpu().numpy().astype(np.float32), linf_bound=eps)
    log.info("uap: target=%d eps=%.4f steps=%d fooling=%.3f base=%.3f", target, eps, steps, fooling, base_rate)
    return UAPResult(spec, fooling, base_rate, status, losses)
