import numpy as np
import pytest

from fdrnn.network import RnnParams

ACCEPTANCE_RESULTS = []


def random_params(rng, n_in=3, n_hidden=5, n_out=2, scale=0.7):
    return RnnParams(
        rng.normal(0, scale, (n_in, n_hidden)),
        rng.normal(0, scale, (n_hidden, n_hidden)),
        rng.normal(0, scale, (n_hidden, n_out)),
        rng.normal(0, 0.3, n_hidden),
        rng.normal(0, 0.3, n_out),
        rng.normal(0, 0.3, n_hidden),
    )


def binary_batch(rng, N, T, D, density=0.4):
    return (rng.random((N, T, D)) < density).astype(float)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)


def overfit_dataset():
    """A single 20-step chorale used for train, valid and test alike."""
    from fdrnn import data

    src = data.synthetic_chorales(seed=3, n_train=1, n_valid=1, n_test=1, min_len=20, max_len=20)
    seq = src.splits["train"][0]
    return data.PianoRollDataset("overfit", {"train": [seq], "valid": [seq], "test": [seq]})


def overfit_config(**overrides):
    from fdrnn.training import RunConfig

    kw = dict(hidden_units=30, chunk_len=20, batch_size=1, epochs=500, step_rate=0.01, momentum=0.9,
              decay=0.9, init_sigma2_rec_out=0.1, init_sigma2_in=0.1, rho_target=1.1, nu=None,
              p_in=0.9, p_hid=0.9, p_out=0.9, precision="float64", log_interval=50)
    kw.update(overrides)
    return RunConfig(**kw)


def tiny_dataset(seed=1):
    from fdrnn import data

    return data.synthetic_chorales(seed=seed, n_train=6, n_valid=2, n_test=2, min_len=20, max_len=45)
