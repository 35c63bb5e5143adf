"""Feature-level attribution of the DMMD statistic.

For one sample the statistic's gradient w.r.t. its embedding is pushed back
through the encoder to a conv layer's post-activation maps ``A`` (C, h, w),
giving ``G = dS/dA``. Channels are then aggregated into a nonnegative map:

* gradient-weighted: ``alpha_k = mean(G_k)``, map ``ReLU(sum_k alpha_k A_k)``
* second-order: ``alpha_k = sum_pq w_k^pq ReLU(G_k^pq)`` with
  ``w = G^2 / (2 G^2 + sum(A_k) G^3)`` (zero where the denominator vanishes),
  map ``ReLU(sum_k alpha_k A_k)``; the statistic is not a logit, so no
  exponential terms appear
* layer-wise spatial: ``ReLU(sum_k ReLU(G_k) * A_k)``
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from xdmmd import dmmd, encoder, netpbm
from xdmmd.embedding import EmbeddingSet
from xdmmd.errors import ConfigError, ShapeError

DENOMINATOR_GUARD = 1e-12
BLEND = 0.5


class Variant(str, Enum):
    GRADIENT_WEIGHTED = "gradient-weighted"
    SECOND_ORDER = "second-order"
    LAYER_WISE_SPATIAL = "layer-wise"


@dataclass
class AttributionMap:
    sample_id: str
    layer_index: int
    variant: Variant
    raw: np.ndarray
    upsampled: np.ndarray
    metadata: dict = field(default_factory=dict)


def aggregate(A: np.ndarray, G: np.ndarray, variant: Variant | str) -> np.ndarray:
    """Collapse activations ``A`` and gradients ``G`` (both C x h x w) to an h x w map."""
    A = np.asarray(A, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if A.shape != G.shape or A.ndim != 3:
        raise ShapeError(f"activation {A.shape} and gradient {G.shape} must be equal (C, h, w) shapes")
    variant = Variant(variant)
    if variant is Variant.GRADIENT_WEIGHTED:
        alpha = G.mean(axis=(1, 2))
        combo = np.tensordot(alpha, A, axes=1)
    elif variant is Variant.SECOND_ORDER:
        g2 = G * G
        denom = 2.0 * g2 + A.sum(axis=(1, 2))[:, None, None] * g2 * G
        safe = np.abs(denom) >= DENOMINATOR_GUARD
        w = np.divide(g2, denom, out=np.zeros_like(g2), where=safe)
        alpha = (w * np.maximum(G, 0.0)).sum(axis=(1, 2))
        combo = np.tensordot(alpha, A, axes=1)
    else:
        combo = (np.maximum(G, 0.0) * A).sum(axis=0)
    return np.maximum(combo, 0.0)


def bilinear_upsample(raw: np.ndarray, height: int, width: int, normalize: bool = True) -> np.ndarray:
    """Resample with half-pixel centers and edge clamping, then max-normalize.

    Output pixel ``(r, c)`` reads the source at
    ``((r + 0.5) * h / H - 0.5, (c + 0.5) * w / W - 0.5)``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if height < 1 or width < 1:
        raise ConfigError(f"target size must be positive, got {height}x{width}")
    if raw.ndim != 2 or min(raw.shape) < 1:
        raise ShapeError(f"source map must be a nonempty 2-D array, got shape {raw.shape}")
    h, w = raw.shape

    def axis(n_out: int, n_in: int):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(height, h)
    c0, c1, fc = axis(width, w)
    top = raw[r0][:, c0] * (1 - fc) + raw[r0][:, c1] * fc
    bottom = raw[r1][:, c0] * (1 - fc) + raw[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bottom * fr[:, None]
    return normalize_max(out) if normalize else out


def normalize_max(a: np.ndarray) -> np.ndarray:
    a = np.maximum(np.asarray(a, dtype=np.float64), 0.0)
    peak = a.max() if a.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(a)
    return a / peak


class Attributor:
    """Attribution for many samples of one frozen (model, embedding set) pair.

    Group means are computed once and reused for every sample.
    """

    def __init__(self, model: encoder.EncoderModel, emb: EmbeddingSet):
        self.model = model
        self.emb = emb
        self.mu_x, self.mu_y, self.n, self.m = dmmd.group_means(emb)
        self.statistic = dmmd._stat(self.mu_x, self.mu_y, self.n, self.m)

    def gradient_maps(self, image, sample_id: str, layer_index: int) -> tuple[np.ndarray, np.ndarray]:
        """``(A, dS/dA)`` for the sample at conv layer ``layer_index``."""
        group = self.emb.groups[self.emb.index(sample_id)]
        pos = encoder.activation_position(self.model, layer_index)
        grad_e = dmmd._gradient_from_means(group, self.mu_x, self.mu_y, self.n, self.m)
        _, cache = encoder.forward(self.model, image, keep_cache=True)
        G = encoder.backward_to_layer(self.model, cache, grad_e, layer_index)
        return cache.outputs[pos], G

    def attribute(self, image, sample_id: str, layer_index: int, variant=Variant.GRADIENT_WEIGHTED) -> AttributionMap:
        A, G = self.gradient_maps(image, sample_id, layer_index)
        raw = aggregate(A, G, variant)
        _, height, width = self.model.input_shape
        return AttributionMap(
            sample_id=sample_id,
            layer_index=layer_index,
            variant=Variant(variant),
            raw=raw,
            upsampled=bilinear_upsample(raw, height, width),
            metadata={"n": self.n, "m": self.m, "statistic": self.statistic},
        )


def attribute(model, image, emb: EmbeddingSet, layer_index: int, variant=Variant.GRADIENT_WEIGHTED, sample_id: str | None = None) -> AttributionMap:
    sid = sample_id if sample_id is not None else getattr(image, "id", None)
    if sid is None:
        raise ConfigError("sample id required: pass sample_id or an image carrying an id")
    return Attributor(model, emb).attribute(image, sid, layer_index, variant)


def coverage(amap: AttributionMap | np.ndarray, mask: np.ndarray) -> float:
    """Share of attribution mass inside ``mask``; 0 for an all-zero map."""
    up = amap.upsampled if isinstance(amap, AttributionMap) else np.asarray(amap, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if up.shape != mask.shape:
        raise ShapeError(f"map {up.shape} and mask {mask.shape} differ in shape")
    total = float(up.sum())
    if total <= 0.0:
        return 0.0
    return float(up[mask].sum()) / total


def colormap(v: np.ndarray) -> np.ndarray:
    """Monotone black-red-yellow-white ramp; ``v`` in [0, 1] -> RGB in [0, 1]."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)


def render_overlay(image, upsampled: np.ndarray) -> np.ndarray:
    """Blend the grayscale image with the colored map; weight ``BLEND * v`` per pixel.

    Returns H x W x 3 uint8.
    """
    gray = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    up = upsampled.upsampled if isinstance(upsampled, AttributionMap) else np.asarray(upsampled, dtype=np.float64)
    if gray.shape != up.shape:
        raise ShapeError(f"image {gray.shape} and map {up.shape} differ in shape")
    weight = (BLEND * np.clip(up, 0.0, 1.0))[..., None]
    rgb = (1.0 - weight) * gray[..., None] + weight * colormap(up)
    return to_bytes(rgb)


def to_bytes(v: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(v, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_map_files(amap: AttributionMap, image, directory: str | Path) -> None:
    """``<id>.<variant>.raw.pgm``, ``.up.pgm`` and ``.overlay.ppm``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = f"{amap.sample_id}.{amap.variant.value}"
    netpbm.write_pgm(d / f"{stem}.raw.pgm", np.floor(normalize_max(amap.raw) * 255).astype(np.uint8))
    netpbm.write_pgm(d / f"{stem}.up.pgm", np.floor(amap.upsampled * 255).astype(np.uint8))
    netpbm.write_ppm(d / f"{stem}.overlay.ppm", render_overlay(image, amap.upsampled))


def write_coverage_csv(path: str | Path, rows: Sequence[tuple[str, str, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "subgroup", "variant", "coverage"])
        for sid, sg, variant, cov in rows:
            w.writerow([sid, sg, variant, format(cov, ".17g")])
