import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def phantom_codec():
    """Autoencoder codec (f=4, C=4) fitted once per session on 512 phantoms."""
    from rectiflow.codec import CodecConfig, fit_autoencoder
    from rectiflow.pipeline import phantom_arrays

    images, _ = phantom_arrays(512, seed=1)
    codec = fit_autoencoder(images, CodecConfig(epochs=15), seed=0)
    codec.train_images = images[:64]
    return codec


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
