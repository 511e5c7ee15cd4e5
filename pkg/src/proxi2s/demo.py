"""Fifteen-row binary example used in the worked scripts and tests."""
from __future__ import annotations

import numpy as np

from .data import Dataset

Y = (1, 0, 1, 0, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 0)
A = (0, 0, 1, 0, 1, 1, 1, 0, 1, 0, 1, 1, 1, 1, 0)
Z = (3, 4, 5, 6, 1, 2, 4, 1, 1, 4, 3, 7, 1, 3, 3)
W = (1, 0, 0, 0, 1, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1)


def demo_dataset() -> Dataset:
    return Dataset(y=np.array(Y, float), a=np.array(A, float), w=np.array(W, float),
                   z=np.array(Z, float))


def demo_csv() -> str:
    """The example as CSV text with header ``y,a,z,w``."""
    rows = ["y,a,z,w"] + [f"{y},{a},{z},{w}" for y, a, z, w in zip(Y, A, Z, W)]
    return "\n".join(rows) + "\n"
