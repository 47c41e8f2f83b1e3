import numpy as np
import pytest

from manifold_probe import gmw
from manifold_probe.generators import (BlobFamily, TrainConfig, blob_decoder_spec, build_generator,
                                       fit_blob_decoder, sample_latent, shuffle_weights)
from manifold_probe.metric import hessian_full, pixel_metric
from manifold_probe.stats import global_hessian

BLOB_N = 8


@pytest.fixture(scope="session")
def blob_family():
    return BlobFamily()


@pytest.fixture(scope="session")
def blob_spec():
    return blob_decoder_spec(BLOB_N)


@pytest.fixture(scope="session")
def blob_training(blob_family, blob_spec):
    return fit_blob_decoder(blob_family, blob_spec, TrainConfig())


@pytest.fixture(scope="session")
def blob_decoder(blob_training):
    return blob_training.decoder


@pytest.fixture(scope="session")
def shuffled_decoders(blob_spec, blob_decoder):
    return [build_generator(blob_spec, shuffle_weights(blob_decoder.weights, s)) for s in range(5)]


@pytest.fixture(scope="session")
def blob_points(blob_spec):
    return sample_latent(blob_spec, 1, 20)


@pytest.fixture(scope="session")
def blob_hessians(blob_decoder, blob_points):
    return [hessian_full(blob_decoder, pixel_metric(), z) for z in blob_points]


@pytest.fixture(scope="session")
def blob_global_h(blob_hessians):
    return global_hessian(blob_hessians)


@pytest.fixture(scope="session")
def blob_gmw(tmp_path_factory, blob_spec, blob_decoder):
    path = tmp_path_factory.mktemp("weights") / "blob.gmw"
    gmw.save(path, blob_spec, blob_decoder.weights, {"init": 0, "train": 0})
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
