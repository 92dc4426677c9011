import pytest

from asyncfed.core import ClientSpec, Fleet, uniform_importances
from asyncfed.objectives import QuadraticObjective


def quadratic_fleet(optima, taus=None, importances=None, curvature=0.5, noise_std=0.0,
                    distribution_ids=None):
    """Fleet of scalar (or vector) quadratics with squared-distance losses."""
    n = len(optima)
    taus = taus or [1] * n
    importances = importances or uniform_importances(n)
    distribution_ids = distribution_ids or list(range(n))
    objectives = [QuadraticObjective.from_optimum(opt, curvature, noise_std=noise_std) for opt in optima]
    clients = [
        ClientSpec(i, importances[i], taus[i], i, distribution_ids[i]) for i in range(n)
    ]
    return Fleet(clients, objectives)


@pytest.fixture
def two_client_fleet():
    return quadratic_fleet([[0.0], [2.0]], taus=[1, 2], importances=[0.5, 0.5])
