import numpy as np
import pytest
import torch

from bfda.datamodel import BBox


def pixel_in_box(b: BBox, i: int, j: int) -> bool:
    """Independent centre-inclusion test for pixel (row i, col j)."""
    cx, cy = j + 0.5, i + 0.5
    return b.x <= cx < b.x2 and b.y <= cy < b.y2


def scan_mask(h: int, w: int, pred) -> np.ndarray:
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            out[i, j] = pred(i, j)
    return out


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield
