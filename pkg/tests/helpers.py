"""Shared random-object generators for the test suite."""

import numpy as np

from npvol import symmat
from npvol.manifold import GaussianPoint, TangentVector


def random_sym(d, gen, scale=1.0):
    a = gen.normal(size=(d, d))
    return scale * symmat.symmetrize(a)


def random_spd(d, gen, spread=1.0, floor=0.3):
    a = gen.normal(size=(d, d)) * spread
    return a @ a.T + floor * np.eye(d)


def random_point(d, gen, mean_scale=1.0, spread=1.0, floor=0.3):
    return GaussianPoint(mean_scale * gen.normal(size=d), random_spd(d, gen, spread, floor))


def random_tangent(d, gen, scale=1.0):
    return TangentVector(scale * gen.normal(size=d), random_sym(d, gen, scale))
