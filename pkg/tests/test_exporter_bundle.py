"""Cross-component check: bundles written by the TypeScript statistics
exporter parse through this package's reader and drive the initializer.

Skipped when the exporter fixture has not been built; nothing in the
primary suite depends on it.
"""

import os

import numpy as np
import pytest

from lora_da.bundle import read_bundle
from lora_da.guidance import GuidanceConfig, compute_init
from lora_da.stats import bundle_to_stats

FIXTURE = os.path.join(
    os.path.dirname(__file__), "..", "exporter", "fixtures", "reference_stats.ldb"
)

pytestmark = pytest.mark.skipif(
    not os.path.exists(FIXTURE), reason="exporter fixture not built"
)

# the reference layer and its four samples, restated independently
WEIGHT = np.array([[0.5, -0.25], [0.125, 0.75], [-0.5, 0.375]])
SAMPLES = [
    (np.array([1.0, 0.0, 0.5]), 0),
    (np.array([0.0, 1.0, -0.5]), 1),
    (np.array([0.25, 0.25, 1.0]), 0),
    (np.array([-0.5, 0.5, 0.25]), 1),
]


def expected_stats():
    g = np.zeros((3, 2))
    zf = np.zeros((3, 3))
    yf = np.zeros((2, 2))
    for z, y in SAMPLES:
        logits = z @ WEIGHT
        p = np.exp(logits - logits.max())
        p /= p.sum()
        gy = p.copy()
        gy[y] -= 1.0
        g += np.outer(z, gy)
        zf += np.outer(z, z)
        yf += np.outer(gy, gy)
    n = len(SAMPLES)
    return g / n, zf / n, yf / n


def test_criterion_13_exporter_bundle_matches_hand_values():
    bundle = read_bundle(FIXTURE)
    assert bundle.meta["sample_count"] == 4
    assert bundle.meta["n_total"] == 1000
    g, zf, yf = expected_stats()
    np.testing.assert_allclose(bundle.get_matrix("layer.ref.linear.G"), g, atol=1e-5)
    np.testing.assert_allclose(bundle.get_matrix("layer.ref.linear.Zfisher"), zf, atol=1e-5)
    np.testing.assert_allclose(bundle.get_matrix("layer.ref.linear.Yfisher"), yf, atol=1e-5)
    print("[acceptance 13] exporter bundle vs hand oracle: PASS")


def test_exported_stats_feed_the_initializer():
    stats = bundle_to_stats(read_bundle(FIXTURE))
    layer = stats["ref.linear"]
    assert layer.dims == (3, 2)
    res = compute_init(layer, GuidanceConfig(rank=2, n_total=layer.n_total, damping_scale=0.1))
    np.testing.assert_allclose(res.a0.T @ res.a0, np.eye(2), atol=1e-8)
    assert np.all(np.isfinite(res.b0))
