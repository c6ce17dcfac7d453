import numpy as np
import pytest

from lrs import GenConfig, gen_ground_truth, gen_samples, with_shared_weights


def make_planted(d, r, t, m, k, zeta, sigma=0.0, seed=0, shared_w=None, sample_seed=None):
    """Planted model plus one batch of realizable data."""
    cfg = GenConfig(d=d, r=r, t=t, m=m, k=k, zeta=zeta, sigma=sigma, seed=seed)
    gt = gen_ground_truth(cfg)
    if shared_w is not None:
        gt = with_shared_weights(gt, shared_w)
    data = gen_samples(gt, m, seed if sample_seed is None else sample_seed)
    return gt, data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
