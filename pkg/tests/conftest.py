import numpy as np
import pytest

from motionbias.config import Config, set_config
from motionbias.dataset import assign_categories
from motionbias.experiment import write_cohort
from motionbias.logger import logger
from motionbias.phantom import PhantomConfig, generate_cohort, generate_phantom
from motionbias.rng import Stream, make_rng


@pytest.fixture(autouse=True)
def default_config():
    """Every test starts from the default configuration and quiet epoch logs."""
    set_config(Config())
    logger.enable_epoch_logging = False
    logger.enable_kspace_logging = False
    yield
    set_config(None)
    logger.errors_buffer.clear()


@pytest.fixture
def phantom_case():
    return generate_phantom(PhantomConfig(), make_rng(7, Stream.COHORT, 0), "phantom_0000")


@pytest.fixture
def labeled_cohort():
    """Sixteen 64x64 phantoms, four per severity category."""
    cases = generate_cohort(16, PhantomConfig(), seed=7)
    return assign_categories(cases, make_rng(7, Stream.CATEGORIES))


@pytest.fixture
def cohort_dir(tmp_path):
    """A sixteen-case 32x32 phantom cohort written to disk."""
    root = tmp_path / "cohort"
    write_cohort(root, 16, 7, Config(phantom=PhantomConfig(size=32)))
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
