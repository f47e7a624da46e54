"""Reconstruction metrics and the evaluation experiments built on them.

Round-trip errors are measured in image space on [0, 1] images. SSIM works on
the 8-bit scale with a 7x7 uniform window, K1 = 0.01 and K2 = 0.03.
"""

from __future__ import annotations

import csv
import io as _io
import logging
import math
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, InputError, NumericalError, TficonError
from .prompts import DEFAULT_TOKEN, build_exceptional
from .solver import LatentState, SolverConfig, integrate

log = logging.getLogger(__name__)

SSIM_K1, SSIM_K2, SSIM_RANGE, SSIM_WINDOW = 0.01, 0.03, 255.0, 7


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def ssim(a, b, window: int = SSIM_WINDOW, data_range: float = SSIM_RANGE) -> float:
    """Mean SSIM over valid windows, averaged over channels for ``(C, H, W)``."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ContractError(f"ssim expects (H, W) or (C, H, W), got {a.shape}")
    if min(a.shape[1:]) < window:
        raise ContractError(f"image {a.shape[1:]} is smaller than the {window}x{window} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def local_mean(x):
        return sliding_window_view(x, (window, window), axis=(-2, -1)).mean(axis=(-2, -1))

    mu_a, mu_b = local_mean(a), local_mean(b)
    # same expression for variance and covariance so ssim(a, a) is exactly 1
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def round_trip(image, backbone, token_value: int = DEFAULT_TOKEN, steps: int = 20, order: int = 2,
               spacing: str = "uniform"):
    """Invert and reconstruct ``image`` under the exceptional prompt.

    Returns ``(reconstructed_image, forward_trajectory, backward_trajectory)``.
    """
    den, schedule = backbone.denoiser, backbone.schedule
    W = build_exceptional(backbone.text_encoder, token_value)
    x0 = backbone.autoencoder.encode(image)
    fwd = SolverConfig(order=order, num_steps=steps, direction="forward", timestep_spacing=spacing)
    bwd = SolverConfig(order=order, num_steps=steps, direction="backward", timestep_spacing=spacing)
    x_T, traj_f = integrate(LatentState(x0, 0), den, W, fwd, schedule=schedule)
    x_0, traj_b = integrate(x_T, den, W, bwd, schedule=schedule)
    return backbone.autoencoder.decode(x_0.data), traj_f, traj_b


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(header)] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells) + "\n"


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _csv(header, rows) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


@dataclass
class AlignmentReport:
    """Per-step forward/backward distances for each solver order.

    Step ``k`` compares the forward and backward states at grid position
    ``k`` for ``k = 0 .. steps - 1``; the shared noisy endpoint is skipped.
    """

    steps: int
    orders: List[int]
    l1: Dict[int, np.ndarray]
    l2: Dict[int, np.ndarray]
    n_images: int
    excluded: List[str] = field(default_factory=list)

    def mean_l1(self, order: int) -> float:
        return float(np.mean(self.l1[order]))

    def mean_l2(self, order: int) -> float:
        return float(np.mean(self.l2[order]))

    def ratio(self, num: int, den: int) -> float:
        return self.mean_l1(num) / self.mean_l1(den)

    def rows(self):
        out = []
        for o in self.orders:
            for k in range(self.steps):
                out.append([o, k, float(self.l1[o][k]), float(self.l2[o][k])])
        return out

    def summary_rows(self):
        return [[o, self.mean_l1(o), self.mean_l2(o)] for o in self.orders]

    def to_text(self) -> str:
        text = f"images = {self.n_images}, steps = {self.steps}, excluded = {len(self.excluded)}\n"
        text += _table(["order", "mean_l1", "mean_l2"], self.summary_rows())
        for a, b in zip(self.orders[1:], self.orders):
            text += f"ratio order {a}/{b} (l1) = {self.ratio(a, b):.6g}\n"
        return text + "\n" + _table(["order", "step", "l1", "l2"], self.rows())

    def to_csv(self) -> str:
        return _csv(["order", "step", "l1", "l2"], self.rows())


def trajectory_alignment(images, backbone, orders: Sequence[int] = (1, 2, 3), steps: int = 20,
                         token_value: int = DEFAULT_TOKEN) -> AlignmentReport:
    """Distances between matched forward and backward intermediates, averaged over images."""
    images = list(images)
    if not images:
        raise ConfigError("trajectory_alignment needs at least one image")
    per = {o: [] for o in orders}
    excluded = []
    for i, img in enumerate(images):
        try:
            dists = {}
            for o in orders:
                _, tf, tb = round_trip(img, backbone, token_value, steps, o)
                fwd = {s.time_index: s.data for s in tf.states}
                d = np.stack([np.asarray(s.data) - fwd[s.time_index]
                              for s in tb.states if s.time_index < steps])
                dists[o] = d.reshape(steps, -1)
        except NumericalError as exc:
            log.warning("image %d excluded: %s", i, exc)
            excluded.append(f"image {i}: {exc}")
            continue
        for o in orders:
            per[o].append(dists[o][::-1])  # backward order -> step index k ascending
    if not per[orders[0]]:
        raise NumericalError("every image produced non-finite values")
    l1 = {o: np.mean([np.mean(np.abs(d), axis=1) for d in per[o]], axis=0) for o in orders}
    l2 = {o: np.mean([np.sqrt(np.mean(d * d, axis=1)) for d in per[o]], axis=0) for o in orders}
    return AlignmentReport(steps, list(orders), l1, l2, len(per[orders[0]]), excluded)


@dataclass
class ReconReport:
    """Round-trip MAE/SSIM per (image, token value) plus spread across tokens."""

    token_values: List[int]
    mae: np.ndarray   # (images, tokens)
    ssim: np.ndarray  # (images, tokens)
    config: Dict[str, object] = field(default_factory=dict)

    @property
    def mae_std(self) -> np.ndarray:
        """Std across token values, per image."""
        return self.mae.std(axis=1)

    @property
    def ssim_std(self) -> np.ndarray:
        return self.ssim.std(axis=1)

    def cv(self, metric: str = "mae") -> float:
        """Mean per-image std over mean value: spread due to the token alone."""
        m = getattr(self, metric)
        mean = float(m.mean())
        return float(m.std(axis=1).mean()) / mean if mean else 0.0

    def rows(self):
        return [[i, t, float(self.mae[i, j]), float(self.ssim[i, j])]
                for i in range(self.mae.shape[0]) for j, t in enumerate(self.token_values)]

    def summary_rows(self):
        return [[i, float(self.mae[i].mean()), float(self.mae_std[i]),
                 float(self.ssim[i].mean()), float(self.ssim_std[i])] for i in range(self.mae.shape[0])]

    def to_text(self) -> str:
        text = "".join(f"{k} = {v}\n" for k, v in self.config.items())
        text += _table(["image", "mae_mean", "mae_std", "ssim_mean", "ssim_std"], self.summary_rows())
        text += f"mae: mean = {self.mae.mean():.6g}, cv = {self.cv('mae'):.6g}\n"
        text += f"ssim: mean = {self.ssim.mean():.6g}, cv = {self.cv('ssim'):.6g}\n"
        return text

    def to_csv(self) -> str:
        return _csv(["image", "token", "mae", "ssim"], self.rows())

    def summary_csv(self) -> str:
        return _csv(["image", "mae_mean", "mae_std", "ssim_mean", "ssim_std"], self.summary_rows())


def token_sweep(images, backbone, token_values: Sequence[int], steps: int = 20,
                order: int = 2) -> ReconReport:
    """Round-trip each image under every token value. Accepts one image or a list."""
    images = [images] if np.ndim(images) == 3 else list(images)
    token_values = [int(t) for t in token_values]
    if not token_values:
        raise ConfigError("token_sweep needs at least one token value")
    m = np.zeros((len(images), len(token_values)))
    s = np.zeros_like(m)
    for i, img in enumerate(images):
        for j, tok in enumerate(token_values):
            rec = round_trip(img, backbone, tok, steps, order)[0]
            m[i, j] = mae(img, rec)
            s[i, j] = ssim(img * 255.0, rec * 255.0)
    cfg = {"steps": steps, "order": order, "images": len(images), "tokens": len(token_values)}
    return ReconReport(token_values, m, s, cfg)


def sa_visualize(A, hw=None, components: int = 3) -> Dict[str, np.ndarray]:
    """Row-mean, column-mean and top principal-component images of an (s, s) map.

    ``row_mean`` averages all rows (one value per key patch), ``col_mean``
    averages all columns. Principal components come from the covariance of
    the rows and are min-max scaled to [0, 1].
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"self-attention map must be square, got {A.shape}")
    s = A.shape[0]
    if hw is None:
        r = math.isqrt(s)
        if r * r != s:
            raise ContractError(f"cannot infer a grid for s={s}; pass hw explicitly")
        hw = (r, r)
    h, w = hw
    if h * w != s:
        raise ContractError(f"grid {hw} does not cover {s} patches")
    cov = np.atleast_2d(np.cov(A, rowvar=False))
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:components]
    vals = np.clip(vals, 0.0, None)
    total = vals.sum()
    pcs = []
    for i in order:
        v = vecs[:, i]
        span = v.max() - v.min()
        pcs.append(((v - v.min()) / span if span > 0 else np.zeros_like(v)).reshape(h, w))
    return {
        "row_mean": A.mean(axis=0).reshape(h, w),
        "col_mean": A.mean(axis=1).reshape(h, w),
        "pca": np.stack(pcs),
        "explained": vals[order] / total if total > 0 else np.zeros(len(order)),
    }


def external_score(command: str, image_a, image_b, timeout: float = 300.0) -> float:
    """Run a perceptual scorer ``command A B`` that prints a single float."""
    args = shlex.split(command) + [str(image_a), str(image_b)]
    try:
        proc = subprocess.run(args, capture_output=True, text=True, timeout=timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise InputError(f"external scorer failed to run: {exc}") from exc
    if proc.returncode != 0:
        raise InputError(f"external scorer exited {proc.returncode}: {proc.stderr.strip()}")
    try:
        return float(proc.stdout.strip().split()[-1])
    except (ValueError, IndexError):
        raise InputError(f"external scorer printed {proc.stdout!r}, expected one float") from None


def plot_alignment(report: AlignmentReport, path) -> None:
    """Line chart of per-step L1 per order (needs matplotlib)."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise TficonError("plotting needs matplotlib (pip install artifact[plot])") from exc
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for o in report.orders:
        ax.plot(range(report.steps), report.l1[o], marker="o", ms=3, label=f"order {o}")
    ax.set_xlabel("step")
    ax.set_ylabel("mean L1")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
