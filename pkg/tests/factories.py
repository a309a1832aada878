"""Random layer generators shared by the tests."""
import numpy as np

from qweight.bitpack import LayerCodes, LayerConfig, pack_layer
from qweight.outliers import CsrOutliers
from qweight.plan import ChannelPlan, build_plan


def random_plan(rng, ic, alpha=None):
    if alpha is None:
        alpha = rng.choice([0.0, 0.125, 0.25, 0.5])
    for _ in range(20):
        try:
            return build_plan(rng.random(ic), alpha)
        except ValueError:
            alpha = alpha / 2
    return build_plan(rng.random(ic), 0.0)


def random_csr(rng, plan, oc, density=0.01):
    eligible = np.flatnonzero((plan.slot_bits == 2) & (plan.channel_of_slot >= 0))
    mask = np.zeros((oc, plan.padded_ic), dtype=bool)
    if eligible.size:
        pick = rng.random((oc, eligible.size)) < density
        mask[:, eligible] = pick
    rows, cols = np.nonzero(mask)
    counts = np.bincount(rows, minlength=oc)
    vals = rng.standard_normal(rows.size).astype(np.float16)
    return CsrOutliers(np.concatenate([[0], np.cumsum(counts)]), cols, vals)


def random_codes(rng, oc, ic, alpha=None, g2=None):
    """Arbitrary (not quantizer-produced) logical content of a valid layer."""
    plan = random_plan(rng, ic, alpha)
    g2 = int(rng.choice([1, 4, 16, 32])) if g2 is None else g2
    config = LayerConfig.for_plan(plan, oc, g2=g2, alpha=0.25, outlier_ratio=0.002)
    t, g = plan.tiles, config.groups_per_row
    t4 = t if plan.has4 else 0
    scodes = rng.integers(0, 8, (oc, g))
    scodes[:, 0::3] = rng.integers(0, 16, (oc, t))
    return LayerCodes(
        config=config, plan=plan,
        codes2=rng.integers(0, 4, (oc, 48 * t)).astype(np.uint8),
        zeros2=rng.integers(0, 4, (oc, g)).astype(np.uint8),
        scodes=scodes.astype(np.uint8),
        zero2=rng.integers(0, 16, (config.row_blocks, g)).astype(np.uint8),
        scale2=rng.uniform(1e-3, 1.0, (config.row_blocks, g)).astype(np.float16),
        codes4=rng.integers(0, 16, (oc, 16 * t4)).astype(np.uint8),
        scale4=rng.uniform(1e-3, 1.0, (oc, t4)).astype(np.float16),
        zero4=rng.integers(0, 16, (oc, t4)).astype(np.uint8),
        csr=random_csr(rng, plan, oc),
    )


def random_layer(rng, oc, ic, alpha=None, g2=None):
    return pack_layer(random_codes(rng, oc, ic, alpha, g2))
