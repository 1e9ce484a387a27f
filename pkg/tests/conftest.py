import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from relevanceflow.datagen import make_dataset
from relevanceflow.models import PointNetClassifier
from relevanceflow.netcore import Dense, Input, MaxPool, Network

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY_LITE = {"convs": (8, 16, 32), "fcs": (16,)}
TINY_PN2 = {"sa1": (16, 4, (8, 8, 16)), "sa2": (8, 4, (16, 16, 32)), "sa3": (32,), "fcs": (16,)}

# criterion number -> (passed, detail), filled by the acceptance tests
ACCEPTANCE = {}


def dense_network(weights):
    """Engine network equal to a list of ``(W, b, relu)`` dense layers.

    Inputs are single-point clouds ``(B, 1, d)``; a max pool over the one
    point turns them into ``(B, d)`` vectors.
    """
    layers = [Input("input", len(weights[0][0])), MaxPool("pool", ["input"])]
    params = {}
    prev = "pool"
    for j, (W, b, relu) in enumerate(weights, 1):
        W = np.asarray(W, dtype=float)
        layers.append(Dense(f"fc{j}", [prev], W.shape[0], W.shape[1], relu=relu,
                            kind="FullyConnected"))
        params[f"fc{j}.weight"] = W
        params[f"fc{j}.bias"] = np.asarray(b, dtype=float)
        prev = f"fc{j}"
    return Network(layers, len(weights[-1][1]), params=params)


@pytest.fixture(scope="session")
def tiny_data():
    return make_dataset(n_train=12, n_test=8, n_points=64, seed=3)


@pytest.fixture(scope="session")
def tiny_lite(tiny_data):
    return PointNetClassifier("pointnet_lite", TINY_LITE, epochs=2, random_state=1).fit(
        tiny_data["X_train"], tiny_data["y_train"])


@pytest.fixture(scope="session")
def tiny_pn2(tiny_data):
    return PointNetClassifier("pointnet2_lite", TINY_PN2, epochs=1, random_state=1).fit(
        tiny_data["X_train"], tiny_data["y_train"])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
