"""Noise schedules and the recursive denoising forward/reverse kernels.

Masks live in signed view ([-1, 1]): background -1, scratch +1.  All kernels
here compute in float64 regardless of the caller's dtype — schedule tails are
tiny (alpha_bar at the last step of the default schedule is ~2e-5) and
float32 arithmetic visibly corrupts round trips through them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence, Union

import numpy as np
import torch

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "register_schedule_family",
    "forward_sample",
    "estimate_x0",
    "reverse_step",
    "run_inference",
    "InferenceResult",
]

StepArg = Union[int, Sequence[int], np.ndarray, torch.Tensor]

_SCHEDULE_FAMILIES: dict[str, Callable[[int], np.ndarray]] = {}


def register_schedule_family(name: str, beta_fn: Callable[[int], np.ndarray]) -> None:
    """Register a schedule family under ``name``.

    ``beta_fn(num_steps)`` must return a float64 array of per-step noise
    variances, one per step, each in (0, 1).
    """
    if not name or not isinstance(name, str):
        raise ValueError("schedule family name must be a non-empty string")
    _SCHEDULE_FAMILIES[name] = beta_fn


def _linear_betas(num_steps: int) -> np.ndarray:
    # The classic 1000-step linear ramp, rescaled so shorter schedules keep
    # the same endpoint noise level.  Clipped away from 1 so short schedules
    # stay valid.
    scale = 1000.0 / num_steps
    betas = np.linspace(1e-4 * scale, 0.02 * scale, num_steps, dtype=np.float64)
    return np.clip(betas, 1e-8, 0.999)


register_schedule_family("linear", _linear_betas)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention factors ``alphas`` and their running products."""

    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        if alphas.ndim != 1 or alphas.size < 1:
            raise ValueError("alphas must be a non-empty 1-D array")
        if alpha_bars.shape != alphas.shape:
            raise ValueError("alphas and alpha_bars must have the same length")
        if np.any(alphas <= 0.0) or np.any(alphas >= 1.0):
            raise ValueError("every alpha must lie strictly inside (0, 1)")
        prev = np.concatenate(([1.0], alpha_bars[:-1]))
        if np.any(np.abs(alpha_bars - prev * alphas) > 1e-12):
            raise ValueError("alpha_bars must be the running product of alphas")
        if np.any(np.diff(alpha_bars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return int(self.alphas.size)

    def _check_steps(self, t: np.ndarray) -> None:
        if np.any(t < 1) or np.any(t > self.num_steps):
            raise ValueError(
                f"step index out of range [1, {self.num_steps}]: got {t.tolist()}"
            )

    def alpha(self, t: StepArg):
        """Retention factor at step ``t`` (1-based); scalar or per-element."""
        arr = np.asarray(t, dtype=np.int64)
        self._check_steps(np.atleast_1d(arr))
        out = self.alphas[arr - 1]
        return float(out) if arr.ndim == 0 else out

    def alpha_bar(self, t: StepArg):
        """Cumulative retention at step ``t``; ``t == 0`` maps to exactly 1."""
        arr = np.asarray(t, dtype=np.int64)
        flat = np.atleast_1d(arr)
        if np.any(flat < 0) or np.any(flat > self.num_steps):
            raise ValueError(
                f"step index out of range [0, {self.num_steps}]: got {flat.tolist()}"
            )
        table = np.concatenate(([1.0], self.alpha_bars))
        out = table[arr]
        return float(out) if arr.ndim == 0 else out


def make_schedule(num_steps: int, kind: str = "linear") -> NoiseSchedule:
    """Build a ``NoiseSchedule`` with ``num_steps`` steps from a named family."""
    if int(num_steps) != num_steps or num_steps < 1:
        raise ValueError(f"num_steps must be a positive integer, got {num_steps!r}")
    if kind not in _SCHEDULE_FAMILIES:
        known = ", ".join(sorted(_SCHEDULE_FAMILIES))
        raise ValueError(f"unknown schedule kind {kind!r} (known: {known})")
    betas = np.asarray(_SCHEDULE_FAMILIES[kind](int(num_steps)), dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(alphas=alphas, alpha_bars=np.cumprod(alphas))


def _as_f64(x, name: str) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _per_step(values, t_arr: np.ndarray, ndim: int) -> torch.Tensor:
    """Schedule coefficients shaped to broadcast over a (possibly batched) field."""
    coef = torch.as_tensor(np.asarray(values, dtype=np.float64))
    if t_arr.ndim == 0:
        return coef
    return coef.reshape((-1,) + (1,) * (ndim - 1))


def _step_array(t: StepArg) -> np.ndarray:
    arr = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(arr)
        if np.any(rounded != arr):
            raise ValueError(f"step indices must be integers, got {arr!r}")
        arr = rounded.astype(np.int64)
    if arr.ndim > 1:
        raise ValueError("step indices must be a scalar or a 1-D sequence")
    return arr


def forward_sample(y, t: StepArg, eps, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise a clean signed mask ``y`` up to step ``t`` with unit noise ``eps``.

    ``t`` may be a single step shared by the whole field or a 1-D batch of
    steps whose length matches the leading dimension of ``y``.
    """
    y64 = _as_f64(y, "y")
    eps64 = _as_f64(eps, "eps")
    if y64.shape != eps64.shape:
        raise ValueError(f"y and eps shapes differ: {tuple(y64.shape)} vs {tuple(eps64.shape)}")
    t_arr = _step_array(t)
    if np.any(np.atleast_1d(t_arr) < 1):
        raise ValueError("forward_sample needs t >= 1")
    if t_arr.ndim == 1 and (y64.ndim == 0 or y64.shape[0] != t_arr.size):
        raise ValueError("batched t must match the leading dimension of y")
    abar = schedule.alpha_bar(t_arr) if t_arr.ndim else schedule.alpha_bar(int(t_arr))
    root = _per_step(np.sqrt(abar), t_arr, y64.ndim)
    comp = _per_step(np.sqrt(1.0 - np.asarray(abar)), t_arr, y64.ndim)
    return root * y64 + comp * eps64


def estimate_x0(x_t, t: StepArg, eps_hat, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert the forward map at step ``t`` for a predicted noise, clamped to [-1, 1]."""
    x64 = _as_f64(x_t, "x_t")
    e64 = _as_f64(eps_hat, "eps_hat")
    if x64.shape != e64.shape:
        raise ValueError(
            f"x_t and eps_hat shapes differ: {tuple(x64.shape)} vs {tuple(e64.shape)}"
        )
    t_arr = _step_array(t)
    if np.any(np.atleast_1d(t_arr) < 1):
        raise ValueError("estimate_x0 needs t >= 1")
    if t_arr.ndim == 1 and (x64.ndim == 0 or x64.shape[0] != t_arr.size):
        raise ValueError("batched t must match the leading dimension of x_t")
    abar = np.asarray(schedule.alpha_bar(t_arr))
    inv_root = _per_step(1.0 / np.sqrt(abar), t_arr, x64.ndim)
    comp = _per_step(np.sqrt(1.0 - abar), t_arr, x64.ndim)
    return torch.clamp(inv_root * (x64 - comp * e64), -1.0, 1.0)


def reverse_step(
    x_t,
    t: StepArg,
    eps_hat,
    z,
    schedule: NoiseSchedule,
    noise_mode: str = "gaussian",
) -> torch.Tensor:
    """One ancestral denoising step from ``x_t`` toward step ``t - 1``.

    ``noise_mode`` selects the stochastic term added for ``t > 1``:
    ``"gaussian"`` adds ``sqrt(1 - alpha_t) * z``; ``"literal"`` adds the
    deterministic offset ``(1 - alpha_t)`` instead and ignores ``z``.
    ``z`` may be None whenever the stochastic term is not used.
    """
    if noise_mode not in ("gaussian", "literal"):
        raise ValueError(f"noise_mode must be 'gaussian' or 'literal', got {noise_mode!r}")
    x64 = _as_f64(x_t, "x_t")
    e64 = _as_f64(eps_hat, "eps_hat")
    if x64.shape != e64.shape:
        raise ValueError(
            f"x_t and eps_hat shapes differ: {tuple(x64.shape)} vs {tuple(e64.shape)}"
        )
    t_arr = _step_array(t)
    if np.any(np.atleast_1d(t_arr) < 1):
        raise ValueError("reverse_step needs t >= 1")
    if t_arr.ndim == 1 and (x64.ndim == 0 or x64.shape[0] != t_arr.size):
        raise ValueError("batched t must match the leading dimension of x_t")
    alpha = np.asarray(schedule.alpha(t_arr))
    abar = np.asarray(schedule.alpha_bar(t_arr))
    inv_root = _per_step(1.0 / np.sqrt(alpha), t_arr, x64.ndim)
    eps_coef = _per_step((1.0 - alpha) / np.sqrt(1.0 - abar), t_arr, x64.ndim)
    mean = inv_root * (x64 - eps_coef * e64)

    # No stochastic term on the final step: the chain ends deterministically.
    active = _per_step((np.atleast_1d(t_arr) > 1).astype(np.float64), t_arr, x64.ndim)
    if t_arr.ndim == 0:
        active = float(np.atleast_1d(t_arr)[0] > 1)
    sigma = _per_step(np.sqrt(1.0 - alpha), t_arr, x64.ndim)
    if noise_mode == "literal":
        offset = _per_step(1.0 - alpha, t_arr, x64.ndim)
        return mean + active * offset
    needs_z = bool(np.any(np.atleast_1d(t_arr) > 1))
    if z is None:
        if needs_z:
            raise ValueError("z is required for gaussian noise_mode when t > 1")
        return mean
    z64 = _as_f64(z, "z")
    if z64.shape != x64.shape:
        raise ValueError(f"z and x_t shapes differ: {tuple(z64.shape)} vs {tuple(x64.shape)}")
    return mean + active * sigma * z64


class InferenceResult(NamedTuple):
    mask: torch.Tensor
    x0_trace: list


def run_inference(
    image,
    denoiser,
    schedule: NoiseSchedule,
    steps: Sequence[int],
    rng,
    noise_mode: str = "gaussian",
) -> InferenceResult:
    """Run the recursive denoising chain over ``steps`` for one image.

    ``steps`` must be strictly decreasing step indices in [1, T].  The chain
    starts from pure unit noise and a zero prior; after every visited step the
    clean-mask estimate is refined and fed back as the prior for the next
    step.  Returns the final signed mask (clamped to [-1, 1]) and the list of
    intermediate clean-mask estimates, one per visited step.

    ``rng`` is an integer seed or a ``numpy.random.Generator``; the same seed
    reproduces the output bit for bit.
    """
    from .denoiser import predict_noise

    steps = [int(s) for s in steps]
    if len(steps) == 0:
        raise ValueError("steps must be non-empty")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"steps must be strictly decreasing, got {steps}")
    if steps[0] > schedule.num_steps or steps[-1] < 1:
        raise ValueError(
            f"steps must lie in [1, {schedule.num_steps}], got {steps[0]}..{steps[-1]}"
        )
    gen = np.random.default_rng(rng)

    img = torch.as_tensor(np.asarray(image)) if not isinstance(image, torch.Tensor) else image
    if img.ndim not in (2, 3):
        raise ValueError(f"image must be (H, W) or (C, H, W), got shape {tuple(img.shape)}")
    height, width = img.shape[-2], img.shape[-1]

    x = torch.from_numpy(gen.standard_normal((height, width)))
    prior = torch.zeros((height, width), dtype=torch.float64)
    trace = []
    with torch.no_grad():
        for t in steps:
            eps_hat = predict_noise(denoiser, x, t, img, prior)
            prior = estimate_x0(x, t, eps_hat, schedule)
            trace.append(prior)
            z = None
            if noise_mode == "gaussian" and t > 1:
                z = torch.from_numpy(gen.standard_normal((height, width)))
            x = reverse_step(x, t, eps_hat, z, schedule, noise_mode=noise_mode)
    return InferenceResult(mask=torch.clamp(x, -1.0, 1.0), x0_trace=trace)
