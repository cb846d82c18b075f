import numpy as np
import pytest

from fbmgrushin import TimeGrid, catalog_lookup
from fbmgrushin.models import ModelSpec


@pytest.fixture(scope="session")
def grid256():
    return TimeGrid(1.0, 256)


@pytest.fixture(scope="session")
def grid64():
    return TimeGrid(1.0, 64)


def make_grushin(H=0.75, n=256, T=1.0, sigma=("sine-affine", (2.0, 1.0, 1.0)),
                 d=1, x0=None, y0=None):
    name, params = sigma
    coef = catalog_lookup(name, params, (d, d))
    return ModelSpec("grushin", d, d, d,
                     np.zeros(d) if x0 is None else x0,
                     np.zeros(d) if y0 is None else y0,
                     {"sigma": coef}, H, TimeGrid(T, n))


def make_general(H=0.75, n=256, T=1.0, d=1, kappa=1.0, x0=None):
    sig2 = catalog_lookup("sine-affine" if d == 1 else "sine-affine-diag",
                          (2.0, 1.0, 1.0), (d, d))
    if x0 is None:
        x0 = np.zeros(d) if d == 1 else np.array([0.0, 0.1])
    return ModelSpec("general", d, d, d, x0, np.zeros(d),
                     {"b1": catalog_lookup("linear-drift", (kappa,), (d,)),
                      "b2": catalog_lookup("sine-affine-vector",
                                           (2.0, 1.0, 1.0), (d,)),
                      "sigma1": catalog_lookup("identity", (), (d, d)),
                      "sigma2": sig2}, H, TimeGrid(T, n))
