import numpy as np
import pytest

from metaconv.data import dataset_available

requires_mnist = pytest.mark.skipif(
    not dataset_available("mnist"),
    reason="mnist cache not populated (run `metaconv fetch`)")
requires_fashion = pytest.mark.skipif(
    not dataset_available("fashion-mnist"),
    reason="fashion-mnist cache not populated")


@pytest.fixture(scope="session")
def mnist():
    from metaconv.data import load_split
    return load_split("mnist", "train"), load_split("mnist", "test")


@pytest.fixture(scope="session")
def tiny_model(mnist):
    """2-epoch model on a 6k subset: fast but already ~96-97% accurate."""
    from metaconv.neural import TrainConfig, normalize_for_optics, train
    train_set, test_set = mnist
    cfg = TrainConfig(epochs=2, seed=0)
    model = train(train_set.subset(6000), cfg)
    return normalize_for_optics(model)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
