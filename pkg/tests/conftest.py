import sys

import numpy as np
import pytest

from flrsp.autodiff import Graph, Node, SquaredError, TARGET
from flrsp.models import MlpSpec, VitSpec, build_mlp, build_vit


def op_graph(op, param_shapes, out_shape=None, loss=None):
    """Graph that feeds parameters through one primitive, then a squared error.

    Inputs are all parameters named ``a``, ``b``, ... so grad_check probes
    every operand.
    """
    names = tuple("abc"[: len(param_shapes)])
    nodes = [Node(op, names, "out")]
    if loss is None:
        nodes.append(Node(SquaredError(), ("out", TARGET), "loss"))
    return Graph((1,), nodes, names, name=type(op).__name__)


@pytest.fixture
def vit_spec():
    return VitSpec((1, 8, 8), 4, 16, 16, 3)


@pytest.fixture
def small_vit_spec():
    return VitSpec((1, 4, 4), 2, 4, 4, 2)


@pytest.fixture
def vit(vit_spec):
    return build_vit(vit_spec, seed=0)


@pytest.fixture
def mlp():
    return build_mlp(MlpSpec(64, (32,), 3, input_shape=(1, 8, 8)), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
