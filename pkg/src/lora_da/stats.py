"""Streaming accumulation of the per-layer curvature statistics.

For a linear layer ``y = z W`` three moments are collected over a small
sample set: the mean weight gradient G, the input second moment Zf (mean of
z z^T) and the output-gradient second moment Yf (mean of gy gy^T). Sums are
kept in float64 regardless of the input dtype; outer-product sums lose
precision fast in float32.

Accumulators are single-writer. Parallel collection shards samples across
private accumulators and merges them; ``merge`` is associative and
commutative up to float64 rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundle import BundleError, TensorBundle

# bundle entry suffixes for one layer's statistics
_REQUIRED = ("G", "Zfisher", "Yfisher")


@dataclass
class StatsAccumulator:
    sum_g: np.ndarray
    sum_z: np.ndarray
    sum_y: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, d1: int, d2: int) -> "StatsAccumulator":
        return cls(
            sum_g=np.zeros((d1, d2)),
            sum_z=np.zeros((d1, d1)),
            sum_y=np.zeros((d2, d2)),
            count=0,
        )

    @property
    def dims(self):
        return self.sum_g.shape


@dataclass
class LayerStats:
    """Finalized per-layer statistics: mean gradient and both second moments."""

    g: np.ndarray
    zf: np.ndarray
    yf: np.ndarray
    sample_count: int
    n_total: int

    def __post_init__(self):
        d1, d2 = self.g.shape
        if self.zf.shape != (d1, d1) or self.yf.shape != (d2, d2):
            raise ValueError(
                f"inconsistent dims: G {self.g.shape}, Zf {self.zf.shape}, Yf {self.yf.shape}"
            )
        for name, m in (("Zf", self.zf), ("Yf", self.yf)):
            defect = np.linalg.norm(m - m.T, "fro")
            if defect > 1e-10 * max(1.0, np.linalg.norm(m, "fro")):
                raise ValueError(f"{name} is not symmetric (defect {defect:.3e})")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.n_total < self.sample_count:
            raise ValueError("n_total must be >= sample_count")

    @property
    def dims(self):
        return self.g.shape


def accumulate(acc: StatsAccumulator, z, gy, g_w=None) -> StatsAccumulator:
    """Fold one sample into the accumulator (mutates and returns it).

    ``z`` is the layer input, ``gy`` the loss gradient at the layer output.
    When ``g_w`` is omitted the exact per-sample weight gradient of a linear
    layer, the outer product z gy^T, is used.
    """
    z = np.asarray(z, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    d1, d2 = acc.dims
    if z.shape != (d1,) or gy.shape != (d2,):
        raise ValueError(f"sample dims {z.shape}/{gy.shape} do not match accumulator ({d1},{d2})")
    if g_w is None:
        g_w = np.outer(z, gy)
    else:
        g_w = np.asarray(g_w, dtype=np.float64)
        if g_w.shape != (d1, d2):
            raise ValueError(f"gradient dims {g_w.shape} do not match accumulator ({d1},{d2})")
    acc.sum_g += g_w
    acc.sum_z += np.outer(z, z)
    acc.sum_y += np.outer(gy, gy)
    acc.count += 1
    return acc


def accumulate_batch(acc: StatsAccumulator, z_rows, gy_rows, g_w_sum=None) -> StatsAccumulator:
    """Fold a batch at once: rows of ``z_rows``/``gy_rows`` are samples.

    Equivalent to calling :func:`accumulate` per row (same sums up to
    float64 rounding), but formed with matrix products.
    """
    z_rows = np.asarray(z_rows, dtype=np.float64)
    gy_rows = np.asarray(gy_rows, dtype=np.float64)
    d1, d2 = acc.dims
    n = z_rows.shape[0]
    if z_rows.shape != (n, d1) or gy_rows.shape != (n, d2):
        raise ValueError(
            f"batch dims {z_rows.shape}/{gy_rows.shape} do not match accumulator ({d1},{d2})"
        )
    acc.sum_g += z_rows.T @ gy_rows if g_w_sum is None else np.asarray(g_w_sum, dtype=np.float64)
    acc.sum_z += z_rows.T @ z_rows
    acc.sum_y += gy_rows.T @ gy_rows
    acc.count += n
    return acc


def merge(a: StatsAccumulator, b: StatsAccumulator) -> StatsAccumulator:
    """Combine two accumulators over disjoint sample shards."""
    if a.dims != b.dims:
        raise ValueError(f"accumulator dims differ: {a.dims} vs {b.dims}")
    return StatsAccumulator(
        sum_g=a.sum_g + b.sum_g,
        sum_z=a.sum_z + b.sum_z,
        sum_y=a.sum_y + b.sum_y,
        count=a.count + b.count,
    )


def finalize(acc: StatsAccumulator, n_total: int) -> LayerStats:
    """Divide the running sums by the sample count and record N."""
    if acc.count < 1:
        raise ValueError("cannot finalize an empty accumulator")
    c = float(acc.count)
    return LayerStats(
        g=acc.sum_g / c,
        zf=acc.sum_z / c,
        yf=acc.sum_y / c,
        sample_count=acc.count,
        n_total=int(n_total),
    )


def stats_to_bundle(per_layer: dict[str, LayerStats]) -> TensorBundle:
    """Pack finalized stats for several layers into one bundle.

    All layers must agree on sample_count and n_total, which are stored once
    in the bundle metadata.
    """
    if not per_layer:
        raise ValueError("no layers to pack")
    counts = {s.sample_count for s in per_layer.values()}
    totals = {s.n_total for s in per_layer.values()}
    if len(counts) != 1 or len(totals) != 1:
        raise ValueError("layers disagree on sample_count or n_total")
    bundle = TensorBundle(meta={"n_total": totals.pop(), "sample_count": counts.pop()})
    for layer_id, s in per_layer.items():
        bundle.add(f"layer.{layer_id}.G", s.g)
        bundle.add(f"layer.{layer_id}.Zfisher", s.zf)
        bundle.add(f"layer.{layer_id}.Yfisher", s.yf)
    return bundle


def bundle_to_stats(bundle: TensorBundle) -> dict[str, LayerStats]:
    """Parse a stats bundle back into per-layer stats, validating meta keys."""
    for key in ("n_total", "sample_count"):
        if key not in bundle.meta:
            raise BundleError(f"stats bundle is missing required meta key {key!r}")
    n_total = int(bundle.meta["n_total"])
    sample_count = int(bundle.meta["sample_count"])
    layer_ids: list[str] = []
    for name in bundle.names():
        if name.startswith("layer.") and name.endswith(".G"):
            layer_ids.append(name[len("layer.") : -len(".G")])
    if not layer_ids:
        raise BundleError("stats bundle contains no layer.<id>.G entries")
    out: dict[str, LayerStats] = {}
    for layer_id in layer_ids:
        g = bundle.get_matrix(f"layer.{layer_id}.G")
        d1, d2 = g.shape
        zf = bundle.get_matrix(f"layer.{layer_id}.Zfisher", expect_dims=(d1, d1))
        yf = bundle.get_matrix(f"layer.{layer_id}.Yfisher", expect_dims=(d2, d2))
        # sampled second moments may carry float32 asymmetry; symmetrize exactly
        zf = 0.5 * (zf + zf.T)
        yf = 0.5 * (yf + yf.T)
        out[layer_id] = LayerStats(
            g=g, zf=zf, yf=yf, sample_count=sample_count, n_total=n_total
        )
    return out
