import numpy as np
import pytest

from edgedet.build import build_yolov5n
from edgedet.ir import fold_batchnorm
from edgedet.quant import calibrate, quantize_graph


@pytest.fixture(scope="session")
def g192():
    return build_yolov5n(2, 192)


@pytest.fixture(scope="session")
def g224():
    return build_yolov5n(2, 224)


@pytest.fixture(scope="session")
def folded192(g192):
    return fold_batchnorm(g192)


@pytest.fixture(scope="session")
def calib_inputs():
    rng = np.random.default_rng(42)
    return [rng.uniform(0, 1, (1, 3, 192, 192)).astype(np.float32)
            for _ in range(4)]


@pytest.fixture(scope="session")
def calib192(folded192, calib_inputs):
    return calibrate(folded192, calib_inputs)


@pytest.fixture(scope="session")
def q192(folded192, calib192):
    return quantize_graph(folded192, calib192)
