import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import seu_forge as sf


@pytest.fixture(scope="session")
def tiny_graph():
    """2-level/4-filter/3-class model with default (compensated) dynamics."""
    g = sf.build_unet(2, 4, 3, 3)
    return sf.generate_toy_weights(g, 5)


@pytest.fixture(scope="session")
def tiny_inputs():
    inputs, labels = sf.generate_calibration_set((16, 16, 3), count=6, seed=11,
                                                 class_count=3)
    return inputs, labels


@pytest.fixture(scope="session")
def tiny_batch(tiny_inputs):
    return sf.batch_inputs(tiny_inputs[0])


@pytest.fixture(scope="session")
def tiny_golden(tiny_graph, tiny_batch):
    return sf.run_float(tiny_graph, tiny_batch)


def single_conv_graph(kernel, bias, *, padding="same", stride=1,
                      kind="output_conv", input_channels=None):
    """Minimal one-conv ModelGraph for targeted unit tests."""
    kernel = np.asarray(kernel, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    kh, kw, cin, cout = kernel.shape
    layer = sf.LayerSpec(kind, "conv", {"kernel_size": kh, "stride": stride,
                                        "padding": padding, "filters": cout},
                         ["input"])
    params = [
        sf.ParamSet(1, "conv", "conv_kernel", sf.Tensor.from_array(kernel)),
        sf.ParamSet(2, "conv", "conv_bias", sf.Tensor.from_array(bias)),
    ]
    meta = {"input_channels": input_channels or cin}
    return sf.ModelGraph([layer], params, cout, meta)
