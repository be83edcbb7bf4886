import numpy as np
import pytest

from convch.grid import FieldPair, build_channel_grid, velocity_from_stream


def smooth_datum(g, mean=0.1, amp=0.3):
    X, Y = g.mesh
    k = 2 * np.pi / g.Lx
    return FieldPair.from_bulk(mean + amp * (np.cos(k * X) * np.cos(np.pi * Y / g.Ly)
                                             + 0.5 * np.sin(2 * k * X) * (Y / g.Ly) ** 2))


def cell_flow(g, a=1.0):
    X, Y = g.mesh
    k = 2 * np.pi / g.Lx
    return velocity_from_stream(a * np.sin(np.pi * Y / g.Ly) ** 2 * np.cos(k * X), g)


@pytest.fixture
def g16():
    return build_channel_grid(2 * np.pi, 1.0, 16, 9)
