import numpy as np
import pytest
from PIL import Image


def write_png(path, pixels, mode="L"):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode=mode).save(path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_tree(tmp_path):
    """A split directory with 6 ok and 4 bad 8x8 grayscale images."""
    root = tmp_path / "tree"
    for name, count, value in (("ok", 6, 140), ("bad", 4, 40)):
        for i in range(count):
            write_png(root / name / f"{name}_{i:02d}.png", np.full((8, 8), value + i))
    return root
