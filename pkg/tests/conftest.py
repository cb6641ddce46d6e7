import pytest

from querydet.backbone import make_random_weights, save_weights
from querydet.synthetic import calibrated_weights


@pytest.fixture(scope="session")
def bundle64():
    """Small-query deterministic weights shared across pipeline tests."""
    return make_random_weights(seed=5, input_side=64)


@pytest.fixture(scope="session")
def bundle64_bias():
    return make_random_weights(seed=5, input_side=64, bias_scale=0.05)


@pytest.fixture(scope="session")
def color_bundle():
    """Color-calibrated weights the synthetic corpora are tuned against."""
    return calibrated_weights()


@pytest.fixture(scope="session")
def color_weights_file(color_bundle, tmp_path_factory):
    """The calibrated bundle saved to disk, for CLI-level tests."""
    path = tmp_path_factory.mktemp("weights") / "color.qdw"
    save_weights(color_bundle, str(path))
    return str(path)
