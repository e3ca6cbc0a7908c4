"""
Test configuration and fixtures for pytest
"""

import pytest
import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from model_ir import GraphBuilder, load_corpus

DATA_DIR = Path(__file__).parent.parent / 'data'
ENGINE_DOUBLES = Path(__file__).parent / 'engine_doubles'


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help="run end-to-end campaigns marked slow")


def pytest_configure(config):
    config.addinivalue_line('markers', "slow: end-to-end campaign, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_corpus():
    """Three single-operator blocks: Conv2d and Relu take one input, Add two."""
    return load_corpus(str(DATA_DIR / 'small_corpus.json'))


@pytest.fixture
def default_corpus():
    return load_corpus(str(DATA_DIR / 'default_corpus.json'))


@pytest.fixture
def engine_doubles():
    return ENGINE_DOUBLES


def conv_params(dilation: int):
    """3x3 'same' convolution with three filters on 8x8 inputs."""
    return dict(filters=3, kernel_h=3, kernel_w=3, stride_h=1, stride_w=1,
                dilation_h=dilation, dilation_w=dilation, pad_h=dilation, pad_w=dilation)


@pytest.fixture
def coverage_models():
    """
    Three models over the small corpus with hand-checked coverage:
    Conv2d 64.0%, Relu 55.3%, Add 66.0% and a set OLC of 61.8% (n_maxspc=10).
    """
    a = GraphBuilder()
    x = a.input([1, 8, 8, 3])
    conv = a.op('Conv2d', x, **conv_params(1))
    left = a.op('Relu', conv)
    right = a.op('Relu', conv)
    joined = a.op('Add', left, right)
    a.op('Add', joined, joined)

    b = GraphBuilder()
    branches = []
    for _ in range(2):
        x = b.input([1, 8, 8, 3])
        branches.append(b.op('Relu', b.op('Conv2d', x, **conv_params(2))))
    b.op('Add', *branches)

    c = GraphBuilder()
    small = c.input([1, 4, 4, 3])
    c.op('Add', small, small)
    large = c.input([1, 16, 16, 3])
    c.op('Add', large, large)

    return [a.build(1), b.build(2), c.build(3)]


@pytest.fixture
def valid_block_names():
    return ['Conv2d', 'Relu6', 'Conv2d+BiasAdd+Relu', 'Custom_Op', 'Layer-Norm']


@pytest.fixture
def invalid_block_names():
    return ['', '2Conv', 'Conv 2d', 'Relu;rm', None, 42]
