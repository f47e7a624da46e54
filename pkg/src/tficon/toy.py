"""Deterministic toy latent-diffusion backbone.

Three handles mirror what a real latent diffusion model provides:

* :class:`ToyDenoiser` - noise predictor with three attention blocks at two
  token resolutions (``s x s``, ``s/2 x s/2``, ``s x s``). Each block runs
  self-attention, text cross-attention and a small MLP on layer-normalised
  tokens. The prediction is the exact noise for Gaussian data of std
  ``data_std`` plus ``gain`` times the network output, so the ODE behaves
  like a trained model's while every attention path still matters. The
  time embedding is deliberately low-frequency: an untrained net with the
  usual high-frequency sinusoids is rough in ``t`` between grid points,
  which no trained model is, and that roughness defeats higher-order solvers.
* :class:`ToyAutoencoder` - ``identity`` or ``small-conv`` (pixel-unshuffle
  by ``factor`` followed by an orthonormal projection; the first three basis
  vectors are per-colour patch means).
* :class:`ToyTextEncoder` - token table, sinusoidal position table and a
  row-wise projection. Row-wise means repeated tokens stay identical rows.

Weights are drawn from one seed, stored as float32, and checked by SHA-256.
Adapters for a real backbone implement the same ``denoise`` / ``encode`` /
``decode`` / ``embed`` surface; attention overrides may then carry a head axis.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .attention import attention_maps
from .errors import ConfigError, ContractError, InputError
from .solver import NoiseSchedule, build_schedule

WEIGHTS_MAGIC = b"TFTOY1\0\0"
NUM_BLOCKS = 3


@dataclass(frozen=True)
class ToyDims:
    latent_channels: int = 4
    latent_size: int = 16
    model_dim: int = 32
    text_dim: int = 32
    vocab_size: int = 8192
    max_length: int = 77
    ae_mode: str = "small-conv"
    ae_factor: int = 2
    gain: float = 0.2
    text_gain: float = 0.3
    data_std: float = 0.5

    def __post_init__(self):
        if self.latent_size % 2:
            raise ConfigError("latent_size must be even (second block runs at half resolution)")
        if self.ae_mode not in ("identity", "small-conv"):
            raise ConfigError(f"unknown autoencoder mode {self.ae_mode!r}")
        if self.ae_mode == "identity" and self.latent_channels != 3:
            raise ConfigError("identity autoencoder needs latent_channels == 3")
        if self.ae_mode == "small-conv" and not 3 <= self.latent_channels <= 3 * self.ae_factor ** 2:
            raise ConfigError("small-conv autoencoder needs 3 <= latent_channels <= 3 * factor^2")
        if self.vocab_size < 3 or self.max_length < 1:
            raise ConfigError("vocab_size must be >= 3 and max_length >= 1")

    @property
    def image_size(self) -> int:
        return self.latent_size * (1 if self.ae_mode == "identity" else self.ae_factor)

    @classmethod
    def parse(cls, text: str) -> "ToyDims":
        """Parse ``key=value,key=value`` overrides, e.g. ``latent_size=8,model_dim=16``."""
        fields = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for item in filter(None, (p.strip() for p in text.split(","))):
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in fields:
                raise ConfigError(f"unknown dims key {key!r}")
            default = getattr(cls, key)
            kwargs[key] = type(default)(value.strip())
        return cls(**kwargs)


@dataclass
class FeatureTap:
    """Read-only capture of one self-attention layer during a forward pass."""

    layer: int
    grid: Tuple[int, int]
    features: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    self_attn: np.ndarray
    attn_out: np.ndarray
    cross_attn: np.ndarray


def sinusoidal(positions, dim: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = positions * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


def time_features(t, num_train_steps: int, dim: int) -> np.ndarray:
    """Low-frequency features of ``t / T`` (at most two cycles over the schedule)."""
    half = dim // 2
    ang = (float(t) / num_train_steps) * math.pi * np.linspace(0.25, 2.0, half)
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    return np.pad(emb, (0, dim - emb.size))[None, :]


def _layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def _pool2(tokens, h, w):
    d = tokens.shape[1]
    return tokens.reshape(h // 2, 2, w // 2, 2, d).mean(axis=(1, 3)).reshape(-1, d)


def _unpool2(tokens, h, w):
    d = tokens.shape[1]
    g = tokens.reshape(h // 2, w // 2, d)
    return np.repeat(np.repeat(g, 2, axis=0), 2, axis=1).reshape(-1, d)


def generate_weights(seed: int, dims: ToyDims) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, dt, c = dims.model_dim, dims.text_dim, dims.latent_channels

    def lin(fan_in, fan_out):
        return (rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)).astype(np.float32)

    w: Dict[str, np.ndarray] = {
        "in.w": lin(c, d),
        "in.b": (0.1 * rng.standard_normal(d)).astype(np.float32),
        "time.w": lin(d, d),
    }
    for i in range(NUM_BLOCKS):
        for name in ("q", "k", "v", "o", "cq", "co"):
            w[f"b{i}.{name}"] = lin(d, d)
        w[f"b{i}.ck"] = lin(dt, d)
        w[f"b{i}.cv"] = lin(dt, d)
        w[f"b{i}.m1"] = lin(d, 2 * d)
        w[f"b{i}.m2"] = lin(2 * d, d)
    w["out.w"] = lin(d, c)
    w["text.table"] = rng.standard_normal((dims.vocab_size, dt)).astype(np.float32)
    w["text.pos"] = sinusoidal(np.arange(dims.max_length), dt).astype(np.float32)
    w["text.proj"] = lin(dt, dt)
    if dims.ae_mode == "small-conv":
        w["ae.basis"] = _ae_basis(rng, c, dims.ae_factor).astype(np.float32)
    return w


def _ae_basis(rng, channels, factor):
    p = factor * factor
    rows = []
    for ch in range(3):
        r = np.zeros(3 * p)
        r[ch * p:(ch + 1) * p] = 1.0 / math.sqrt(p)
        rows.append(r)
    while len(rows) < channels:
        r = rng.standard_normal(3 * p)
        for b in rows:
            r -= (r @ b) * b
        rows.append(r / np.linalg.norm(r))
    return np.stack(rows)


def weights_checksum(weights: Dict[str, np.ndarray]) -> str:
    return hashlib.sha256(_payload(weights)).hexdigest()


def _payload(weights):
    return b"".join(np.ascontiguousarray(weights[k], dtype="<f4").tobytes() for k in sorted(weights))


class ToyDenoiser:
    def __init__(self, weights: Dict[str, np.ndarray], dims: ToyDims,
                 schedule: Optional[NoiseSchedule] = None):
        self.dims = dims
        self.schedule = schedule if schedule is not None else build_schedule()
        self.w = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
        s = dims.latent_size
        self.layer_grids = {0: (s, s), 1: (s // 2, s // 2), 2: (s, s)}

    @property
    def latent_shape(self):
        return (self.dims.latent_channels, self.dims.latent_size, self.dims.latent_size)

    def cross_projections(self, layer: int):
        return self.w[f"b{layer}.cq"], self.w[f"b{layer}.ck"], self.w[f"b{layer}.cv"]

    def _block(self, i, h, text, taps, override):
        w = self.w
        grid = self.layer_grids[i]
        f = _layer_norm(h)
        q, k, v = f @ w[f"b{i}.q"], f @ w[f"b{i}.k"], f @ w[f"b{i}.v"]
        A_own = attention_maps(q, k)
        A = A_own
        if override is not None and i in override.maps:
            A = np.asarray(override.maps[i], dtype=np.float64)
            if A.ndim == 3 and A.shape[0] == 1:
                A = A[0]
            if A.shape != A_own.shape:
                raise ContractError(f"override for layer {i} has shape {A.shape}, "
                                    f"layer expects {A_own.shape}")
            if override.renormalize_rows:
                A = A / A.sum(axis=1, keepdims=True)
            if override.inject_values and override.values is not None and i in override.values:
                v = np.asarray(override.values[i], dtype=np.float64)
                if v.shape != f.shape:
                    raise ContractError(f"value override for layer {i} has shape {v.shape}, "
                                        f"layer expects {f.shape}")
        o = A @ v
        h = h + o @ w[f"b{i}.o"]
        g = _layer_norm(h)
        Ac = attention_maps(g @ w[f"b{i}.cq"], text @ w[f"b{i}.ck"])
        h = h + self.dims.text_gain * (Ac @ (text @ w[f"b{i}.cv"])) @ w[f"b{i}.co"]
        m = _layer_norm(h)
        h = h + np.tanh(m @ w[f"b{i}.m1"]) @ w[f"b{i}.m2"]
        if taps is not None:
            taps.append(FeatureTap(i, grid, f.copy(), q.copy(), k.copy(), v.copy(),
                                   A.copy(), o.copy(), Ac.copy()))
        return h

    def network(self, x, t, prompt, taps=None, attention_override=None):
        c, hh, ww = x.shape
        text = np.asarray(getattr(prompt, "matrix", prompt), dtype=np.float64)
        if text.ndim != 2 or text.shape[1] != self.dims.text_dim:
            raise ContractError(f"prompt matrix must be (l, {self.dims.text_dim}), got {text.shape}")
        if attention_override is not None:
            unknown = set(attention_override.maps) - set(self.layer_grids)
            if unknown:
                raise ContractError(f"override names unknown layers {sorted(unknown)}")
        w = self.w
        tokens = x.reshape(c, -1).T
        temb = np.tanh(time_features(t, self.schedule.num_train_steps, self.dims.model_dim) @ w["time.w"])
        h = tokens @ w["in.w"] + w["in.b"] + temb
        h = self._block(0, h, text, taps, attention_override)
        low = self._block(1, _pool2(h, hh, ww), text, taps, attention_override)
        h = h + _unpool2(low, hh, ww)
        h = self._block(2, h, text, taps, attention_override)
        out = _layer_norm(h) @ w["out.w"]
        return out.T.reshape(c, hh, ww)

    def denoise(self, x, t, prompt, taps=None, attention_override=None):
        """Noise prediction ``eps(x, t, prompt)`` for a latent ``x`` of shape (c, h, w)."""
        x = np.asarray(getattr(x, "data", x), dtype=np.float64)
        if x.shape != self.latent_shape:
            raise ContractError(f"latent shape {x.shape} != {self.latent_shape}")
        a = self.schedule.alpha(t)
        s = self.schedule.sigma(t)
        gauss = s * x / (a * a * self.dims.data_std ** 2 + s * s)
        return gauss + self.dims.gain * self.network(x, t, prompt, taps, attention_override)


class ToyAutoencoder:
    def __init__(self, dims: ToyDims, basis: Optional[np.ndarray] = None):
        self.dims = dims
        self.mode = dims.ae_mode
        self.factor = 1 if self.mode == "identity" else dims.ae_factor
        self.basis = None if basis is None else np.asarray(basis, dtype=np.float64)
        self.latent_scale = 0.5

    def encode(self, image: np.ndarray) -> np.ndarray:
        """RGB image ``(3, H, W)`` in [0, 1] -> latent ``(c, H/f, W/f)``."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ContractError(f"expected an image of shape (3, H, W), got {image.shape}")
        if self.mode == "identity":
            return image.copy()
        f = self.factor
        _, H, W = image.shape
        if H % f or W % f:
            raise ContractError(f"image size {H}x{W} not divisible by {f}")
        x = 2.0 * image - 1.0
        x = x.reshape(3, H // f, f, W // f, f).transpose(0, 2, 4, 1, 3).reshape(3 * f * f, H // f, W // f)
        return self.latent_scale * np.einsum("cp,phw->chw", self.basis, x)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if self.mode == "identity":
            return latent.copy()
        f = self.factor
        _, h, w = latent.shape
        x = np.einsum("cp,chw->phw", self.basis, latent / self.latent_scale)
        x = x.reshape(3, f, f, h, w).transpose(0, 3, 1, 4, 2).reshape(3, h * f, w * f)
        return (x + 1.0) / 2.0


_WORD = re.compile(r"[a-z0-9']+")


class ToyTextEncoder:
    def __init__(self, table, pos, proj, max_length: int):
        self.table = np.asarray(table, dtype=np.float64)
        self.pos = np.asarray(pos, dtype=np.float64)
        self.proj = np.asarray(proj, dtype=np.float64)
        self.vocab_size = self.table.shape[0]
        self.max_length = max_length
        self.sot_token = self.vocab_size - 2
        self.eot_token = self.vocab_size - 1
        self.pad_token = self.eot_token

    def tokenize(self, text: str) -> list:
        return [zlib.crc32(wd.encode()) % (self.vocab_size - 2) for wd in _WORD.findall(text.lower())]

    def embed(self, ids: Sequence[int], positional: bool = True) -> np.ndarray:
        ids = np.asarray(ids, dtype=int)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ConfigError(f"token ids outside vocabulary [0, {self.vocab_size})")
        if positional and ids.size > self.pos.shape[0]:
            raise ContractError(f"{ids.size} tokens exceed the positional table ({self.pos.shape[0]})")
        e = self.table[ids]
        if positional:
            e = e + self.pos[: ids.size]
        return e @ self.proj


@dataclass
class ToyBackbone:
    denoiser: ToyDenoiser
    autoencoder: ToyAutoencoder
    text_encoder: ToyTextEncoder
    seed: int
    dims: ToyDims
    weights: Dict[str, np.ndarray]

    @property
    def checksum(self) -> str:
        return weights_checksum(self.weights)

    @property
    def schedule(self) -> NoiseSchedule:
        return self.denoiser.schedule

    def handles(self):
        return self.denoiser, self.autoencoder, self.text_encoder


def backbone_from_weights(weights, seed, dims, schedule=None) -> ToyBackbone:
    return ToyBackbone(
        denoiser=ToyDenoiser(weights, dims, schedule),
        autoencoder=ToyAutoencoder(dims, weights.get("ae.basis")),
        text_encoder=ToyTextEncoder(weights["text.table"], weights["text.pos"], weights["text.proj"],
                                    dims.max_length),
        seed=seed, dims=dims, weights=weights,
    )


def init_toy(seed: int = 0, dims: Optional[ToyDims] = None, schedule=None) -> ToyBackbone:
    """Build all three handles from ``seed``; same seed gives the same checksum."""
    dims = dims or ToyDims()
    return backbone_from_weights(generate_weights(seed, dims), seed, dims, schedule)


def save_weights(path, backbone: ToyBackbone) -> str:
    """Write the weight blob; returns the payload checksum."""
    weights = backbone.weights
    header = {
        "seed": backbone.seed,
        "dims": dataclasses.asdict(backbone.dims),
        "arrays": [[k, list(weights[k].shape)] for k in sorted(weights)],
        "checksum": weights_checksum(weights),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(WEIGHTS_MAGIC + struct.pack("<I", len(hb)) + hb + _payload(weights))
    except OSError as exc:
        raise InputError(f"cannot write weights {path}: {exc}") from exc
    return header["checksum"]


def load_weights(path, schedule=None) -> ToyBackbone:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read weights {path}: {exc}") from exc
    if not raw.startswith(WEIGHTS_MAGIC):
        raise InputError(f"{path} is not a toy weight file")
    try:
        (n,) = struct.unpack_from("<I", raw, len(WEIGHTS_MAGIC))
        start = len(WEIGHTS_MAGIC) + 4
        header = json.loads(raw[start:start + n])
        offset = start + n
        weights = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape))
            weights[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * count
    except (struct.error, ValueError, KeyError) as exc:
        raise InputError(f"corrupt weight file {path}: {exc}") from exc
    if weights_checksum(weights) != header["checksum"]:
        raise InputError(f"checksum mismatch in {path}")
    return backbone_from_weights(weights, header["seed"], ToyDims(**header["dims"]), schedule)


def toy_image(seed: int, size: int = 32, blobs: int = 5) -> np.ndarray:
    """Smooth random RGB test image ``(3, size, size)`` in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.tile(rng.uniform(0.2, 0.8, (3, 1, 1)), (1, size, size))
    for _ in range(blobs):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.1, 0.3)
        colour = rng.uniform(-0.4, 0.4, (3, 1, 1))
        img = img + colour * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return np.clip(img, 0.0, 1.0)
