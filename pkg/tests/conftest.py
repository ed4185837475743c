"""Session fixtures for the acceptance suite: datasets and trained models are
built once and shared across criteria."""

import numpy as np
import pytest

from fm4pde import pde
from fm4pde.fields import normalize_field
from fm4pde.training import TrainConfig, VelocityNet, train
from fm4pde.velocity import TrainedVelocity


def _build_pipeline(problem, grf, train_count, test_count, tcfg, seed=0, augment=True):
    train_fields = pde.generate_dataset(problem, grf, train_count, seed=seed, namespace=0)
    from dataclasses import replace
    test_grf = replace(grf, length_scale=grf.length_scale * 1.5)
    test_fields = pde.generate_dataset(problem, test_grf, test_count, seed=seed,
                                       namespace=1)
    stats = pde.channel_statistics(train_fields)
    flat = np.stack([normalize_field(f, stats).ravel() for f in train_fields])
    net = VelocityNet(flat.shape[1], seed=seed)
    aug = pde.symmetry_augmentation(problem) if augment else None
    net, trace = train(net, flat, tcfg, augment=aug)
    return {"problem": problem, "stats": stats, "train": train_fields,
            "test": test_fields, "net": net, "model": TrainedVelocity(net),
            "trace": trace}


@pytest.fixture(scope="session")
def poisson_pipeline():
    # criterion 7 scale: 32x32, 2000 training pairs
    return _build_pipeline(pde.poisson_problem(32), pde.GRFParams(0.15, 1.0),
                           train_count=2000, test_count=20,
                           tcfg=TrainConfig(steps=20000, learning_rate=1e-3, seed=0))


@pytest.fixture(scope="session")
def burgers_pipeline():
    # criterion 8 scale: 128x128 space-time fields, light prior
    return _build_pipeline(pde.burgers_problem(128, 128, nu=0.01, horizon=1.0),
                           pde.GRFParams(0.1, 0.0144),
                           train_count=400, test_count=12,
                           tcfg=TrainConfig(steps=2500, learning_rate=1e-3, seed=0))


@pytest.fixture(scope="session")
def gauss1d_net():
    # criterion 6: CFM training on the 1-D Gaussian target N(0.5, 0.2^2)
    rng = np.random.default_rng(0)
    data = (0.5 + 0.2 * rng.standard_normal(8192))[:, None]
    net = VelocityNet(1, seed=0)
    net, _ = train(net, data, TrainConfig(steps=20000, learning_rate=1e-3, seed=0))
    return net
