import numpy as np
import pytest

from casnas.space import BlockKind, SpaceSpec, StageSpec, load_space

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def stage(kind, depth=(1, 1), channels=(8, 8, 8), kernels=(3,), expansions=(1,), stride=1):
    return StageSpec(BlockKind(kind), tuple(depth), tuple(channels), tuple(kernels), tuple(expansions), stride)


def hybrid_space(name="t", granularity="layer", resolutions=(8, 12), **kw) -> SpaceSpec:
    """Small valid space exercising every block kind."""
    stages = (
        stage("ConvStem", channels=(8, 8, 8), stride=2),
        stage("MBv2", (1, 2), (8, 8, 8), (3, 5), (1, 2)),
        stage("MBv3", (1, 2), (8, 16, 8), (3,), (2,), 2),
        stage("Transformer", (1, 2), (16, 32, 16), (2, 3), (2,), 1),
        stage("MBPool", channels=(16, 16, 1), expansions=(2,)),
    )
    return SpaceSpec(name, stages, tuple(resolutions), granularity, num_classes=4, transition_expansion=2, **kw)


@pytest.fixture(scope="session")
def evit():
    return load_space("elasticvit")


@pytest.fixture(scope="session")
def micro():
    return load_space("micro")


@pytest.fixture(scope="session")
def tiny():
    return load_space("tiny")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
