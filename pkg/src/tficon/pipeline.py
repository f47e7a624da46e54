"""Training-free composition: invert, incorporate noise, run three ODEs in lock-step.

With ``N`` grid steps, a backward step starting at grid position ``t`` injects
composite attention when ``t > int(tau_a * N)`` and rectifies the background
when ``t > int(tau_b * N)``. So ``tau = 0`` means every step and ``tau = 1``
means none; the default ``tau_a = 0.4`` covers the 12 noisiest of 20 steps.

The reference ODE integrates the full zero-padded frame; its features are
sliced to the user box when attention records are built.
"""

from __future__ import annotations

import contextlib
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .attention import AttentionRecord, ComposeOptions, build_index_map, in_window, inject_hook, record_hook
from .errors import ConfigError, ContractError, InputError, TficonError
from .preprocess import Mask, downsample_mask, place_reference
from .prompts import DEFAULT_TOKEN, build_exceptional, build_normal, build_null
from .solver import LatentState, SolverConfig, integrate, iterate

log = logging.getLogger(__name__)

START_MODES = ("noise_space", "latent_paste")

# file key -> CompositionConfig attribute
CONFIG_KEYS = {
    "steps": "steps",
    "order": "order",
    "tau_a": "tau_a",
    "tau_b": "tau_b",
    "cfg_scale": "cfg_scale",
    "start_mode": "start_mode",
    "inject_values": "inject_values",
    "renormalize": "renormalize",
    "reverse_cross": "reverse_cross",
    "seed": "seed",
    "composition_prompt": "composition_prompt",
    "timestep_spacing": "timestep_spacing",
    "prompt.text": "prompt_text",
    "prompt.exceptional_token": "token_value",
    "prompt.max_length": "max_length",
}


@dataclass(frozen=True)
class CompositionConfig:
    steps: int = 20
    order: int = 2
    tau_a: float = 0.4
    tau_b: float = 0.0
    cfg_scale: float = 2.5
    token_value: int = DEFAULT_TOKEN
    start_mode: str = "noise_space"
    inject_values: bool = False
    renormalize: bool = False
    reverse_cross: bool = False
    seed: int = 0
    prompt_text: str = ""
    max_length: Optional[int] = None
    composition_prompt: str = "normal"
    timestep_spacing: str = "uniform"

    def __post_init__(self):
        for name in ("tau_a", "tau_b"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.start_mode not in START_MODES:
            raise ConfigError(f"start_mode must be one of {START_MODES}, got {self.start_mode!r}")
        if self.composition_prompt not in ("normal", "exceptional"):
            raise ConfigError("composition_prompt must be 'normal' or 'exceptional'")
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be >= 0")
        # validates order / steps / spacing name
        SolverConfig(order=self.order, num_steps=self.steps, timestep_spacing=self.timestep_spacing)

    def items(self):
        """``(file_key, value)`` pairs in a stable order, for echoing and reports."""
        return [(key, getattr(self, attr)) for key, attr in CONFIG_KEYS.items()]

    def replace(self, **changes) -> "CompositionConfig":
        return CompositionConfig(**{**asdict(self), **changes})


@dataclass
class CompositionJob:
    main_image: str
    reference_image: str
    seg_mask: str
    user_mask: Optional[str] = None
    user_box: Optional[tuple] = None
    prompt: str = ""
    config: CompositionConfig = field(default_factory=CompositionConfig)
    output: Optional[str] = None
    report: Optional[str] = None


class RunReport:
    """Flat ``key = value`` report; only deterministic values go into the text."""

    def __init__(self):
        self.entries: List[tuple] = []
        self.timings: Dict[str, float] = {}

    def add(self, key, value):
        self.entries.append((key, value))

    def get(self, key):
        for k, v in self.entries:
            if k == key:
                return v
        raise KeyError(key)

    def to_text(self, include_timings: bool = False) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in self.entries]
        if include_timings:
            lines += [f"timing.{k} = {v:.6f}" for k, v in self.timings.items()]
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return f'"{v}"'
    if v is None:
        return '""'
    return str(v)


def _sha(a) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


@contextlib.contextmanager
def _stage(name, report: Optional[RunReport] = None):
    start = time.perf_counter()
    try:
        yield
    except TficonError as exc:
        exc.stage = name
        if exc.args:
            exc.args = (f"[{name}] {exc.args[0]}",) + exc.args[1:]
        raise
    finally:
        if report is not None:
            report.timings[name] = time.perf_counter() - start


def _mask_array(m):
    return np.asarray(getattr(m, "data", m), dtype=np.float64)


def incorporate_noise(x_m_T, x_r_T, z, M_user, M_seg):
    """``x_r * M_seg + x_m * (1 - M_user) + z * (M_user XOR M_seg)``."""
    mu, ms = _mask_array(M_user), _mask_array(M_seg)
    x_m_T, x_r_T, z = (np.asarray(a, dtype=np.float64) for a in (x_m_T, x_r_T, z))
    if not (x_m_T.shape == x_r_T.shape == z.shape):
        raise ContractError(f"latent shapes differ: {x_m_T.shape}, {x_r_T.shape}, {z.shape}")
    if mu.shape != x_m_T.shape[-2:] or ms.shape != mu.shape:
        raise ContractError(f"mask shapes {mu.shape}/{ms.shape} do not match latent {x_m_T.shape}")
    if np.any(ms > mu):
        raise ContractError("segmentation mask is not contained in the user mask")
    xor = np.logical_xor(mu > 0, ms > 0).astype(np.float64)
    return x_r_T * ms + x_m_T * (1.0 - mu) + z * xor


def rectify_background(x_star, x_m, M_user, t: int, tau_b: float, num_steps: int):
    """Replace the region outside the user mask with the main reconstruction."""
    if not in_window(t, tau_b, num_steps):
        return np.asarray(x_star, dtype=np.float64)
    mu = _mask_array(M_user)
    return np.asarray(x_star, dtype=np.float64) * mu + np.asarray(x_m, dtype=np.float64) * (1.0 - mu)


@dataclass
class CompositionResult:
    latent: np.ndarray
    main_latent: np.ndarray
    reference_latent: np.ndarray
    start_latent: np.ndarray
    report: RunReport
    record: AttentionRecord
    overrides: Dict[int, object]
    image: Optional[np.ndarray] = None
    main_image: Optional[np.ndarray] = None
    trajectories: Dict[str, list] = field(default_factory=dict)


def compose_latents(x_m0, x_r0, user_mask, seg_mask, backbone, config: CompositionConfig,
                    report: Optional[RunReport] = None) -> CompositionResult:
    """Run both inversions and the three lock-stepped backward ODEs on latents.

    ``user_mask`` / ``seg_mask`` are latent-resolution 0/1 arrays (or Masks).
    ``backbone`` provides ``denoiser``, ``text_encoder`` and ``schedule``.
    """
    report = report or RunReport()
    den, enc, schedule = backbone.denoiser, backbone.text_encoder, backbone.schedule
    cfg = config
    n = cfg.steps
    mu, ms = _mask_array(user_mask), _mask_array(seg_mask)
    x_m0 = np.asarray(x_m0, dtype=np.float64)
    x_r0 = np.asarray(x_r0, dtype=np.float64)
    if np.any(ms > mu):
        raise ContractError("segmentation mask is not contained in the user mask")

    with _stage("prompts", report):
        W = build_exceptional(enc, cfg.token_value, cfg.max_length)
        if cfg.composition_prompt == "exceptional":
            E, uncond = W, None
        else:
            E = build_normal(enc, cfg.prompt_text, cfg.max_length)
            uncond = build_null(enc, cfg.max_length)

    fwd = SolverConfig(order=cfg.order, num_steps=n, direction="forward",
                       timestep_spacing=cfg.timestep_spacing)
    bwd = SolverConfig(order=cfg.order, num_steps=n, direction="backward",
                       timestep_spacing=cfg.timestep_spacing)
    bwd_guided = SolverConfig(order=cfg.order, num_steps=n, direction="backward",
                              guidance_scale=cfg.cfg_scale, timestep_spacing=cfg.timestep_spacing)

    with _stage("inversion", report):
        x_m_T, _ = integrate(LatentState(x_m0, 0), den, W, fwd, schedule=schedule)
        x_r_T, _ = integrate(LatentState(x_r0, 0), den, W, fwd, schedule=schedule)

    with _stage("incorporation", report):
        if cfg.start_mode == "noise_space":
            z = np.random.default_rng(cfg.seed).standard_normal(x_m0.shape)
            x_star_T = incorporate_noise(x_m_T.data, x_r_T.data, z, mu, ms)
            report.add("z.seed", cfg.seed)
            report.add("z.sha256", _sha(z))
        else:
            pasted = x_r0 * ms + x_m0 * (1.0 - ms)
            x_star_T = integrate(LatentState(pasted, 0), den, W, fwd, schedule=schedule)[0].data
            report.add("z.seed", "unused")

    index_maps = {layer: build_index_map(mu, grid) for layer, grid in den.layer_grids.items()}
    skipped = [layer for layer, idx in index_maps.items() if idx is None]
    report.add("layers.injected", ",".join(str(k) for k, v in sorted(index_maps.items()) if v is not None))
    report.add("layers.skipped", ",".join(map(str, skipped)))
    record = AttentionRecord(index_maps, cfg.tau_a, n,
                             ComposeOptions(cfg.reverse_cross, cfg.renormalize, cfg.inject_values))
    provider = inject_hook(record)
    overrides: Dict[int, object] = {}

    def tracked_provider(t):
        ov = provider(t)
        if ov is None or not ov.maps:
            return None
        overrides[t] = ov
        return ov

    main_states = [x_m_T]

    def rectify_hook(event):
        if not in_window(event.t, cfg.tau_b, n):
            return None
        x_m = main_states[-1]
        if x_m.time_index != event.t_next:
            raise ContractError(f"main reconstruction not at step {event.t_next}")
        return LatentState(rectify_background(event.state.data, x_m.data, mu, event.t, cfg.tau_b, n),
                           event.t_next)

    main_it = iterate(x_m_T, den, W, bwd, schedule=schedule, hooks=[record_hook("main", record)])
    ref_it = iterate(x_r_T, den, W, bwd, schedule=schedule, hooks=[record_hook("reference", record)])
    comp_it = iterate(LatentState(x_star_T, n), den, E, bwd_guided, schedule=schedule, uncond=uncond,
                      hooks=[rectify_hook], attention_override=tracked_provider)

    traj = {"main": [x_m_T.data], "reference": [x_r_T.data], "composite": [x_star_T]}
    with _stage("composition", report):
        for _ in range(n):
            ev_m = next(main_it)
            main_states.append(ev_m.state)
            ev_r = next(ref_it)
            ev_c = next(comp_it)
            t = ev_c.t
            for name, ev in (("main", ev_m), ("reference", ev_r), ("composite", ev_c)):
                traj[name].append(ev.state.data)
            report.add(f"step.{t}.t_train", int(_grid(schedule, cfg)[t]))
            report.add(f"step.{t}.injected", t in overrides)
            report.add(f"step.{t}.rectified", in_window(t, cfg.tau_b, n))
            report.add(f"step.{t}.norm.composite", float(np.linalg.norm(ev_c.state.data)))
            report.add(f"step.{t}.norm.main", float(np.linalg.norm(ev_m.state.data)))
            report.add(f"step.{t}.norm.reference", float(np.linalg.norm(ev_r.state.data)))

    x_star_0, x_main_0 = traj["composite"][-1], traj["main"][-1]
    outside = mu == 0
    bg_diff = float(np.max(np.abs(x_star_0[:, outside] - x_main_0[:, outside]), initial=0.0))
    report.add("result.background_max_abs_diff", bg_diff)
    report.add("result.equals_main_reconstruction", bool(np.array_equal(x_star_0, x_main_0)))
    report.add("result.latent_sha256", _sha(x_star_0))
    return CompositionResult(latent=x_star_0, main_latent=x_main_0, reference_latent=traj["reference"][-1],
                             start_latent=x_star_T, report=report, record=record, overrides=overrides,
                             trajectories=traj)


def _grid(schedule, cfg):
    from .solver import timestep_grid
    return timestep_grid(schedule, cfg.steps, cfg.timestep_spacing)


def prepare_inputs(main_image, ref_image, ref_seg: Mask, user_mask: Mask, backbone):
    """Place the reference, encode both images and bring masks to latent resolution."""
    ae = backbone.autoencoder
    size = backbone.dims.image_size
    if main_image.shape[1:] != (size, size):
        raise InputError(f"main image is {main_image.shape[2]}x{main_image.shape[1]}, "
                         f"the backbone expects {size}x{size}")
    if user_mask.shape != main_image.shape[1:]:
        raise InputError(f"user mask {user_mask.shape} does not match main image {main_image.shape[1:]}")
    latent_hw = backbone.denoiser.latent_shape[1:]
    if user_mask.box() is None:
        log.warning("user mask is empty; output will be the main reconstruction")
        placed_img = np.zeros_like(main_image)
        seg_pix = Mask(np.zeros(user_mask.shape), "segmentation")
    else:
        placed = place_reference(ref_image, ref_seg, user_mask)
        placed_img, seg_pix = placed.image, placed.seg_mask_placed
    mu = downsample_mask(user_mask, latent_hw)
    ms = downsample_mask(seg_pix, latent_hw)
    return ae.encode(main_image), ae.encode(placed_img), mu, ms, placed_img


def compose(job: CompositionJob, backbone) -> CompositionResult:
    """Run a file-based job; writes the PNG and report when paths are set."""
    from . import io as tio

    report = RunReport()
    cfg = job.config
    if job.prompt and not cfg.prompt_text:
        cfg = cfg.replace(prompt_text=job.prompt)
    for key, value in cfg.items():
        report.add(f"config.{key}", value)
    report.add("weights.checksum", getattr(backbone, "checksum", "external"))

    with _stage("load", report):
        main = tio.load_image(job.main_image)
        ref = tio.load_image(job.reference_image)
        seg = Mask(tio.load_mask(job.seg_mask), "segmentation")
        if job.user_box is not None:
            user = Mask(tio.box_mask(main.shape[1:], job.user_box), "user")
        elif job.user_mask is not None:
            user = Mask(tio.load_mask(job.user_mask), "user")
        else:
            raise InputError("either a user mask or a box is required")
    with _stage("preprocess", report):
        x_m0, x_r0, mu, ms, _ = prepare_inputs(main, ref, seg, user, backbone)
    result = compose_latents(x_m0, x_r0, mu, ms, backbone, cfg, report)
    with _stage("decode", report):
        result.image = backbone.autoencoder.decode(result.latent)
        result.main_image = backbone.autoencoder.decode(result.main_latent)
    if job.output:
        with _stage("write", report):
            tio.save_image(job.output, result.image)
    if job.report:
        Path(job.report).write_text(report.to_text())
    return result


def _parse_value(raw: str, key: str):
    if raw[:1] in "\"'":
        end = raw.find(raw[0], 1)
        if end < 0:
            raise ConfigError(f"unterminated string for {key}")
        return raw[1:end]
    raw = raw.split("#", 1)[0].strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    raise ConfigError(f"cannot parse value {raw!r} for {key}")


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Returns attribute names."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[CONFIG_KEYS[key]] = _parse_value(raw, key)
    return out


def load_config(path, base: Optional[CompositionConfig] = None, **overrides) -> CompositionConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    values = parse_config_text(text)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(base or CompositionConfig(), values)


def build_config(base: CompositionConfig, values: dict) -> CompositionConfig:
    """Apply ``values`` (attribute names) to ``base`` with light type checking."""
    types = {f.name: str(f.type) for f in fields(CompositionConfig)}
    clean = {}
    for k, v in values.items():
        if k not in types:
            raise ConfigError(f"unknown config field {k!r}")
        t = types[k]
        if t == "float" and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        ok = {"int": lambda x: isinstance(x, int) and not isinstance(x, bool),
              "Optional[int]": lambda x: x is None or isinstance(x, int) and not isinstance(x, bool),
              "float": lambda x: isinstance(x, float),
              "bool": lambda x: isinstance(x, bool),
              "str": lambda x: isinstance(x, str)}[t]
        if not ok(v):
            raise ConfigError(f"{k} expects {t}, got {v!r}")
        clean[k] = v
    return base.replace(**clean)


def config_to_text(cfg: CompositionConfig) -> str:
    """Config-file text that :func:`load_config` reads back to ``cfg``; unset keys are omitted."""
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in cfg.items() if v is not None)
