"""Variance-preserving noise schedule and probability-flow ODE solvers.

The schedule is indexed by discrete train time ``t = 0 .. T`` with
``alpha_bar[0] = 1`` (clean data) and ``alpha_bar[t] = prod_{i<t} (1 - beta_i)``.
Signal and noise coefficients are ``alpha_t = sqrt(alpha_bar_t)`` and
``sigma_t = sqrt(1 - alpha_bar_t)``; the half log-SNR is
``lambda_t = log(alpha_t / sigma_t)``.

All solvers are the multistep DPM-Solver++ family written in data-prediction
form. With ``D_k = (x_k - sigma_k * eps_k) / alpha_k`` the model output at grid
point ``k`` and ``h = lambda_t - lambda_s`` for a step ``s -> t``::

    order 1 (DDIM):  x_t = (sigma_t / sigma_s) x_s - alpha_t (e^{-h} - 1) D_0
    order 2:         x_t = <order 1> - 0.5 alpha_t (e^{-h} - 1) D1
                     D1 = (D_0 - D_{-1}) / r0,          r0 = h_{-1} / h
    order 3:         x_t = <order 1> + alpha_t ((e^{-h} - 1) / h + 1) D1'
                                     - alpha_t ((e^{-h} - 1 + h) / h^2 - 0.5) D2
                     D1' = D1_0 + r0 / (r0 + r1) (D1_0 - D1_1)
                     D2  = (D1_0 - D1_1) / (r0 + r1)

where ``h_{-1}`` is the log-SNR increment of the previous step. Inversion
(``direction="forward"``, image to noise) uses exactly the same formulas with
``s < t``, so ``h`` is negative; nothing else changes. A multistep solver with
fewer stored outputs than its order falls back to the highest order the
history supports, which gives the usual first-order warmup step. With
``lower_order_final`` (default) the order is also capped by the number of
steps left, so the steps next to either end of the grid are low order in both
directions; the final step into ``t = 0`` spans a much larger log-SNR
increment than the others and multistep corrections blow up there.

Alpha-bar values are clamped to ``[1e-6, 1 - 1e-6]`` before any ratio or
logarithm is taken.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError, NumericalError, StepError

ALPHA_BAR_CLAMP = 1e-6
DIRECTIONS = ("forward", "backward")


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete VP schedule; ``alpha_bar`` has ``num_train_steps + 1`` entries."""

    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def num_train_steps(self) -> int:
        return len(self.betas)

    def signal(self, t):
        return np.sqrt(self.alpha_bar[t])

    def noise(self, t):
        return np.sqrt(1.0 - self.alpha_bar[t])

    def _clamped(self, t):
        return np.clip(self.alpha_bar[t], ALPHA_BAR_CLAMP, 1.0 - ALPHA_BAR_CLAMP)

    def alpha(self, t) -> float:
        return float(np.sqrt(self._clamped(t)))

    def sigma(self, t) -> float:
        return float(np.sqrt(1.0 - self._clamped(t)))

    def log_snr(self, t):
        ab = self._clamped(t)
        return 0.5 * (np.log(ab) - np.log1p(-ab))


def build_schedule(num_train_steps: int = 1000, beta_range=(0.00085, 0.012),
                   kind: str = "scaled_linear") -> NoiseSchedule:
    """Build a VP schedule from a beta range.

    ``kind="linear"`` spaces betas linearly; ``"scaled_linear"`` spaces their
    square roots linearly (the latent-diffusion convention).
    """
    if int(num_train_steps) != num_train_steps or num_train_steps < 1:
        raise ConfigError(f"num_train_steps must be a positive integer, got {num_train_steps}")
    beta_min, beta_max = (float(b) for b in beta_range)
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ConfigError(f"need 0 < beta_min < beta_max < 1, got {beta_range}")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, num_train_steps)
    elif kind == "scaled_linear":
        betas = np.linspace(beta_min ** 0.5, beta_max ** 0.5, num_train_steps) ** 2
    else:
        raise ConfigError(f"unknown beta schedule {kind!r}")
    if np.any(np.diff(betas) < 0) or np.any(betas <= 0) or np.any(betas >= 1):
        raise ConfigError("betas must be non-decreasing and inside (0, 1)")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(betas=betas, alpha_bar=alpha_bar)


def _uniform_spacing(schedule: NoiseSchedule, num_steps: int) -> np.ndarray:
    return np.round(np.linspace(0, schedule.num_train_steps, num_steps + 1)).astype(int)


def _logsnr_spacing(schedule: NoiseSchedule, num_steps: int) -> np.ndarray:
    lam = schedule.log_snr(np.arange(schedule.num_train_steps + 1))
    targets = np.linspace(lam[0], lam[-1], num_steps + 1)
    # lam is decreasing in t; search on the reversed (increasing) array
    idx = np.searchsorted(lam[::-1], targets[::-1])[::-1]
    return schedule.num_train_steps - np.clip(idx, 0, schedule.num_train_steps)


SPACINGS: Dict[str, Callable[[NoiseSchedule, int], np.ndarray]] = {
    "uniform": _uniform_spacing,
    "logsnr": _logsnr_spacing,
}


def timestep_grid(schedule: NoiseSchedule, num_steps: int, spacing: str = "uniform") -> np.ndarray:
    """Ascending train-time indices ``grid[0] = 0 .. grid[num_steps] = T``.

    Inversion and sampling share this grid, which is what lets attention
    records from one run be matched step-by-step to another.
    """
    if spacing not in SPACINGS:
        raise ConfigError(f"unknown timestep spacing {spacing!r}; known: {sorted(SPACINGS)}")
    if num_steps < 1 or num_steps > schedule.num_train_steps:
        raise ConfigError(f"num_steps must be in [1, {schedule.num_train_steps}], got {num_steps}")
    grid = np.asarray(SPACINGS[spacing](schedule, num_steps), dtype=int)
    if grid[0] != 0 or grid[-1] != schedule.num_train_steps or np.any(np.diff(grid) <= 0):
        raise ConfigError(f"spacing {spacing!r} gave a non-monotone grid for {num_steps} steps")
    return grid


def cfg_noise(eps_cond, eps_uncond, s: float):
    """Classifier-free guidance blend ``s * eps_cond + (1 - s) * eps_uncond``."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ContractError(f"cfg_noise shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    return s * eps_cond + (1.0 - s) * eps_uncond


@dataclass(frozen=True)
class SolverConfig:
    order: int = 2
    num_steps: int = 20
    direction: str = "backward"
    guidance_scale: float = 1.0
    timestep_spacing: str = "uniform"
    lower_order_final: bool = True

    def __post_init__(self):
        if self.order not in (1, 2, 3):
            raise ConfigError(f"solver order must be 1, 2 or 3, got {self.order}")
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be positive, got {self.num_steps}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.guidance_scale < 0:
            raise ConfigError(f"guidance_scale must be >= 0, got {self.guidance_scale}")


@dataclass(frozen=True)
class LatentState:
    """Latent array ``(c, h, w)`` at position ``time_index`` of the step grid."""

    data: np.ndarray
    time_index: int


@dataclass
class Trajectory:
    states: List[LatentState]
    direction: str
    grid: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.states)

    def stack(self) -> np.ndarray:
        return np.stack([s.data for s in self.states])

    def at(self, time_index: int) -> LatentState:
        for s in self.states:
            if s.time_index == time_index:
                return s
        raise KeyError(time_index)


class Denoiser(Protocol):
    """What the solvers need from a noise-prediction network.

    ``t`` is a train-time index. ``taps`` (a list) receives per-layer
    captures when given; ``attention_override`` replaces self-attention maps.
    """

    def denoise(self, x: np.ndarray, t: int, prompt, taps: Optional[list] = None,
                attention_override=None) -> np.ndarray:
        ...


@dataclass
class StepEvent:
    """Passed to step hooks after each solver step.

    ``t`` is the grid position the step started from (Algorithm-style
    index); ``taps`` holds whatever the denoiser captured for that step.
    """

    t: int
    t_next: int
    state: LatentState
    taps: list = field(default_factory=list)


StepHook = Callable[[StepEvent], Optional[LatentState]]
OverrideProvider = Callable[[int], object]


def _model_eps(denoiser, x, t, prompt, uncond, scale, taps, override):
    eps = denoiser.denoise(x, t, prompt, taps=taps, attention_override=override)
    if uncond is not None:
        eps_u = denoiser.denoise(x, t, uncond, taps=None, attention_override=override)
        eps = cfg_noise(eps, eps_u, scale)
    return eps


def _dpmpp_update(schedule: NoiseSchedule, x, history, t_next):
    s0, m0 = history[-1]
    lam_s0 = schedule.log_snr(s0)
    h = schedule.log_snr(t_next) - lam_s0
    alpha_t = schedule.alpha(t_next)
    phi = np.expm1(-h)
    x_next = (schedule.sigma(t_next) / schedule.sigma(s0)) * x - alpha_t * phi * m0
    order = len(history)
    if order == 1:
        return x_next
    s1, m1 = history[-2]
    lam_s1 = schedule.log_snr(s1)
    r0 = (lam_s0 - lam_s1) / h
    d1_0 = (m0 - m1) / r0
    if order == 2:
        return x_next - 0.5 * alpha_t * phi * d1_0
    s2, m2 = history[-3]
    r1 = (lam_s1 - schedule.log_snr(s2)) / h
    d1_1 = (m1 - m2) / r1
    d1 = d1_0 + r0 / (r0 + r1) * (d1_0 - d1_1)
    d2 = (d1_0 - d1_1) / (r0 + r1)
    return (x_next + alpha_t * (phi / h + 1.0) * d1
            - alpha_t * ((phi + h) / h ** 2 - 0.5) * d2)


def ode_step(state: LatentState, denoiser: Denoiser, prompt, config: SolverConfig,
             history: list, *, schedule: NoiseSchedule, grid: Optional[np.ndarray] = None,
             uncond=None, taps: Optional[list] = None, attention_override=None) -> LatentState:
    """Advance one grid step along the probability-flow ODE.

    ``history`` is a list of ``(train_t, data_prediction)`` pairs from earlier
    steps of the same trajectory; this call appends its own model output and
    trims the list to ``config.order`` entries. CFG is applied only when an
    ``uncond`` prompt is given.
    """
    if grid is None:
        grid = timestep_grid(schedule, config.num_steps, config.timestep_spacing)
    k = state.time_index
    k_next = k - 1 if config.direction == "backward" else k + 1
    if not (0 <= k < len(grid) and 0 <= k_next < len(grid)):
        raise ContractError(f"time_index {k} cannot step {config.direction} on a {len(grid) - 1}-step grid")
    s, t_next = int(grid[k]), int(grid[k_next])
    x = np.asarray(state.data, dtype=np.float64)
    eps = _model_eps(denoiser, x, s, prompt, uncond, config.guidance_scale, taps, attention_override)
    if not np.all(np.isfinite(eps)):
        raise NumericalError(f"non-finite denoiser output at step {k} (t={s})", step=k)
    x0 = (x - schedule.sigma(s) * eps) / schedule.alpha(s)
    history.append((s, x0))
    del history[:-config.order]
    order = len(history)
    if config.lower_order_final:
        remaining = k if config.direction == "backward" else len(grid) - 1 - k
        order = min(order, remaining)
    x_next = _dpmpp_update(schedule, x, history[-order:], t_next)
    if not np.all(np.isfinite(x_next)):
        raise NumericalError(f"non-finite state after step {k} (t={s})", step=k)
    return LatentState(x_next, k_next)


def iterate(x_start: LatentState, denoiser: Denoiser, prompt, config: SolverConfig, *,
            schedule: NoiseSchedule, uncond=None, hooks: Sequence[StepHook] = (),
            attention_override: Optional[OverrideProvider] = None,
            capture_taps: bool = False) -> Iterator[StepEvent]:
    """Yield a :class:`StepEvent` after every step (hooks already applied).

    Lets several trajectories advance in lock-step. A hook may return a
    replacement state, which the next step continues from.
    """
    grid = timestep_grid(schedule, config.num_steps, config.timestep_spacing)
    n = config.num_steps
    expected = n if config.direction == "backward" else 0
    if x_start.time_index != expected:
        raise ContractError(f"{config.direction} integration must start at time_index "
                            f"{expected}, got {x_start.time_index}")
    state = x_start
    history: list = []
    capture = capture_taps or bool(hooks)
    for _ in range(n):
        k = state.time_index
        taps = [] if capture else None
        override = attention_override(k) if attention_override is not None else None
        state = ode_step(state, denoiser, prompt, config, history, schedule=schedule, grid=grid,
                         uncond=uncond, taps=taps, attention_override=override)
        event = StepEvent(t=k, t_next=state.time_index, state=state, taps=taps or [])
        for hook in hooks:
            try:
                replaced = hook(event)
            except Exception as exc:
                raise StepError(k, exc) from exc
            if replaced is not None:
                state = replaced
                event.state = state
        yield event


def integrate(x_start: LatentState, denoiser: Denoiser, prompt, config: SolverConfig, *,
              schedule: NoiseSchedule, uncond=None, hooks: Sequence[StepHook] = (),
              attention_override: Optional[OverrideProvider] = None
              ) -> Tuple[LatentState, Trajectory]:
    """Run all ``config.num_steps`` steps; return the final state and trajectory."""
    grid = timestep_grid(schedule, config.num_steps, config.timestep_spacing)
    states = [LatentState(np.asarray(x_start.data, dtype=np.float64), x_start.time_index)]
    for event in iterate(x_start, denoiser, prompt, config, schedule=schedule, uncond=uncond,
                         hooks=hooks, attention_override=attention_override):
        states.append(event.state)
    return states[-1], Trajectory(states, config.direction, grid)


def invert(x0: np.ndarray, denoiser: Denoiser, prompt, *, schedule: NoiseSchedule,
           order: int = 2, num_steps: int = 20, spacing: str = "uniform",
           hooks: Sequence[StepHook] = ()) -> Tuple[LatentState, Trajectory]:
    """Forward-integrate a clean latent to noise (no guidance)."""
    cfg = SolverConfig(order=order, num_steps=num_steps, direction="forward",
                       timestep_spacing=spacing)
    return integrate(LatentState(np.asarray(x0, dtype=np.float64), 0), denoiser, prompt, cfg,
                     schedule=schedule, hooks=hooks)


def reconstruct(x_T: np.ndarray, denoiser: Denoiser, prompt, *, schedule: NoiseSchedule,
                order: int = 2, num_steps: int = 20, spacing: str = "uniform",
                hooks: Sequence[StepHook] = ()) -> Tuple[LatentState, Trajectory]:
    """Backward-integrate an inverted latent to data (no guidance)."""
    cfg = SolverConfig(order=order, num_steps=num_steps, direction="backward",
                       timestep_spacing=spacing)
    return integrate(LatentState(np.asarray(x_T, dtype=np.float64), num_steps), denoiser, prompt,
                     cfg, schedule=schedule, hooks=hooks)
