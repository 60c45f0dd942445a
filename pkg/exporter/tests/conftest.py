import numpy as np
import pytest
from PIL import Image


@pytest.fixture(scope="session")
def frames_dir(tmp_path_factory):
    """Ten small deterministic RGB frames."""
    root = tmp_path_factory.mktemp("frames")
    rng = np.random.default_rng(7)
    for i in range(10):
        pixels = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
        Image.fromarray(pixels, "RGB").save(root / f"frame_{i:04d}.png")
    return root
