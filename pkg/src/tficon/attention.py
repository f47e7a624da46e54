"""Attention maps: computation, patch-index bookkeeping, composition and injection.

A composite map ``A*`` for a layer with ``n = h * w`` patches is assembled from
three sources, addressed by the *blue* patches (where the reference object
sits, row-major inside the main grid) and the remaining *white* patches:

    A*[blue_i,  blue_j ] = A_ref[i, j]
    A*[white_p, blue_j ] = A_cross[p, j]      (p is a main-grid index)
    A*[blue_i,  white_p] = A_cross[p, i]      (mirrored; or A_cross_rev[i, p])
    A*[white_p, white_q] = A_main[p, q]

Rows of ``A_cross`` at blue main positions are never read.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)


def attention_maps(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-wise ``softmax(q k^T / sqrt(d))`` for ``q`` (n, d) and ``k`` (m, d)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ContractError(f"attention_maps needs (n,d) and (m,d) with equal d, got {q.shape} and {k.shape}")
    d = q.shape[1]
    if d == 0:
        raise ContractError("attention_maps needs d > 0")
    logits = (q @ k.T) / math.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def in_window(t: int, tau: float, num_steps: int) -> bool:
    """True when grid step ``t`` lies in the early window ``t > int(tau * N)``.

    ``tau = 0`` covers every step of ``1..N``; ``tau = 1`` covers none.
    """
    return t > math.floor(tau * num_steps + 1e-9)


@dataclass(frozen=True)
class PatchIndexMap:
    grid: Tuple[int, int]
    box: Tuple[int, int, int, int]  # top, left, height, width at layer resolution
    blue: np.ndarray
    white: np.ndarray

    @property
    def ref_grid(self) -> Tuple[int, int]:
        return self.box[2], self.box[3]

    @property
    def size(self) -> int:
        return self.grid[0] * self.grid[1]


def mask_box(mask: np.ndarray) -> Optional[Tuple[int, int, int, int]]:
    """Bounding box ``(top, left, height, width)`` of a 2-D mask, or None when empty."""
    mask = np.asarray(mask) > 0
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


def index_map_from_box(box, grid) -> PatchIndexMap:
    top, left, bh, bw = box
    h, w = grid
    if bh < 1 or bw < 1 or top < 0 or left < 0 or top + bh > h or left + bw > w:
        raise ContractError(f"box {box} does not fit grid {grid}")
    rr, cc = np.meshgrid(np.arange(top, top + bh), np.arange(left, left + bw), indexing="ij")
    blue = (rr * w + cc).ravel()
    white = np.setdiff1d(np.arange(h * w), blue)
    return PatchIndexMap(grid=(h, w), box=(top, left, bh, bw), blue=blue, white=white)


def build_index_map(user_mask_latent, layer_res) -> Optional[PatchIndexMap]:
    """Blue/white patch indices of the mask's bounding box at ``layer_res``.

    Box corners are mapped with outward rounding, so a non-empty mask always
    covers at least one patch. Returns None (and logs) for an empty mask.
    """
    mask = np.asarray(getattr(user_mask_latent, "data", user_mask_latent))
    box = mask_box(mask)
    if box is None:
        log.warning("user mask is empty at %s; layer skipped", tuple(layer_res))
        return None
    h, w = mask.shape
    hl, wl = layer_res
    top, left, bh, bw = box
    t0 = top * hl // h
    l0 = left * wl // w
    t1 = -(-(top + bh) * hl // h)
    l1 = -(-(left + bw) * wl // w)
    return index_map_from_box((t0, l0, t1 - t0, l1 - l0), (hl, wl))


@dataclass(frozen=True)
class ComposeOptions:
    reverse_cross: bool = False
    renormalize_rows: bool = False
    inject_values: bool = False


def compose(A_m, A_r, A_cross, idx: PatchIndexMap, opts: ComposeOptions = ComposeOptions(),
            A_cross_rev=None) -> np.ndarray:
    """Assemble the composite self-attention map for one layer and step."""
    A_m = np.asarray(A_m, dtype=np.float64)
    n, b = idx.size, idx.blue.size
    if np.unique(idx.blue).size != b or (b and (idx.blue.min() < 0 or idx.blue.max() >= n)):
        raise ContractError("blue indices must be distinct and inside the grid")
    if np.intersect1d(idx.blue, idx.white).size or b + idx.white.size != n:
        raise ContractError("blue and white indices must partition the grid")
    if A_m.shape != (n, n):
        raise ContractError(f"A_main shape {A_m.shape} != {(n, n)}")
    out = A_m.copy()
    if b == 0:
        return out
    A_r = np.asarray(A_r, dtype=np.float64)
    A_cross = np.asarray(A_cross, dtype=np.float64)
    if A_r.shape != (b, b) or A_cross.shape != (n, b):
        raise ContractError(f"A_ref {A_r.shape} / A_cross {A_cross.shape} do not match "
                            f"{b} blue patches on a {n}-patch grid")
    blue, white = idx.blue, idx.white
    out[np.ix_(blue, blue)] = A_r
    out[np.ix_(white, blue)] = A_cross[white]
    if opts.reverse_cross:
        if A_cross_rev is None:
            raise ContractError("reverse_cross requested but no reverse cross map given")
        A_cross_rev = np.asarray(A_cross_rev, dtype=np.float64)
        if A_cross_rev.shape != (b, n):
            raise ContractError(f"A_cross_rev shape {A_cross_rev.shape} != {(b, n)}")
        out[np.ix_(blue, white)] = A_cross_rev[:, white]
    else:
        out[np.ix_(blue, white)] = A_cross[white].T
    if opts.renormalize_rows:
        out /= out.sum(axis=1, keepdims=True)
    return out


@dataclass
class AttentionOverride:
    """Per-layer replacement maps handed to the denoiser for one step.

    Maps are ``(n, n)``; a leading head axis is allowed for adapters with
    multi-head attention. ``values`` is only used when ``inject_values``.
    """

    maps: Dict[int, np.ndarray]
    values: Optional[Dict[int, np.ndarray]] = None
    inject_values: bool = False
    renormalize_rows: bool = False


@dataclass
class RecordEntry:
    main: Optional[np.ndarray] = None
    ref: Optional[np.ndarray] = None
    cross: Optional[np.ndarray] = None
    cross_rev: Optional[np.ndarray] = None
    main_values: Optional[np.ndarray] = None
    ref_values: Optional[np.ndarray] = None
    _qk: dict = field(default_factory=dict, repr=False)

    @property
    def complete(self) -> bool:
        return self.main is not None and self.ref is not None and self.cross is not None


class AttentionRecord:
    """Write-once store of per-(layer, step) attention maps from the reconstructions.

    ``index_maps`` maps layer id to its :class:`PatchIndexMap` (None = skip).
    Only steps inside the ``tau_a`` window are recorded.
    """

    def __init__(self, index_maps: Dict[int, Optional[PatchIndexMap]], tau_a: float,
                 num_steps: int, options: ComposeOptions = ComposeOptions()):
        self.index_maps = dict(index_maps)
        self.tau_a = tau_a
        self.num_steps = num_steps
        self.options = options
        self.entries: Dict[Tuple[int, int], RecordEntry] = {}

    def __len__(self):
        return len(self.entries)

    def keys(self):
        return sorted(self.entries)

    def steps(self):
        return sorted({t for _, t in self.entries})

    def get(self, layer: int, t: int) -> RecordEntry:
        try:
            return self.entries[(layer, t)]
        except KeyError:
            raise ContractError(f"no attention record for layer {layer}, step {t}") from None

    def put(self, side: str, layer: int, t: int, tap) -> None:
        idx = self.index_maps.get(layer)
        if idx is None:
            return
        entry = self.entries.setdefault((layer, t), RecordEntry())
        if side in entry._qk:
            raise ContractError(f"{side} record for layer {layer}, step {t} already written")
        if side == "main":
            entry.main = np.array(tap.self_attn, dtype=np.float64)
            q, k = tap.q, tap.k
            if self.options.inject_values:
                entry.main_values = np.array(tap.v, dtype=np.float64)
        elif side == "reference":
            q, k = tap.q[idx.blue], tap.k[idx.blue]
            entry.ref = attention_maps(q, k)
            if self.options.inject_values:
                entry.ref_values = np.array(tap.v[idx.blue], dtype=np.float64)
        else:
            raise ContractError(f"unknown record side {side!r}")
        entry._qk[side] = (q, k)
        if "main" in entry._qk and "reference" in entry._qk:
            (q_m, k_m), (q_r, k_r) = entry._qk["main"], entry._qk["reference"]
            entry.cross = attention_maps(q_m, k_r)
            if self.options.reverse_cross:
                entry.cross_rev = attention_maps(q_r, k_m)


def record_hook(side: str, store: AttentionRecord):
    """Step hook storing ``side`` ('main' or 'reference') maps for in-window steps."""
    if side not in ("main", "reference"):
        raise ContractError(f"unknown record side {side!r}")

    def hook(event):
        if not in_window(event.t, store.tau_a, store.num_steps):
            return None
        for tap in event.taps:
            store.put(side, tap.layer, event.t, tap)
        return None

    return hook


def compose_step(record: AttentionRecord, t: int) -> AttentionOverride:
    opts = record.options
    maps, values = {}, {}
    for layer, idx in sorted(record.index_maps.items()):
        if idx is None:
            continue
        entry = record.get(layer, t)
        if not entry.complete:
            raise ContractError(f"incomplete attention record for layer {layer}, step {t}")
        maps[layer] = compose(entry.main, entry.ref, entry.cross, idx, opts, entry.cross_rev)
        if opts.inject_values:
            v = entry.main_values.copy()
            v[idx.blue] = entry.ref_values
            values[layer] = v
    return AttentionOverride(maps=maps, values=values if opts.inject_values else None,
                             inject_values=opts.inject_values,
                             renormalize_rows=opts.renormalize_rows)


def inject_hook(record: AttentionRecord, tau_a: Optional[float] = None):
    """Override provider for the composition ODE: step ``t`` -> AttentionOverride | None."""
    tau = record.tau_a if tau_a is None else tau_a

    def provider(t: int):
        if not in_window(t, tau, record.num_steps):
            return None
        return compose_step(record, t)

    return provider
