import zlib

import numpy as np


def fans(shape):
    """(fan_in, fan_out) with Keras conventions for dense, conv and recurrent kernels."""
    shape = tuple(shape)
    if len(shape) < 1:
        return 1, 1
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = int(np.prod(shape[:-2]))
    return shape[-2] * receptive, shape[-1] * receptive


def xavier_init(shape, seed, dtype=np.float32):
    """Glorot-uniform draw on +/- sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = fans(shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def name_seed(seed, name):
    """Per-tensor seed so initialization does not depend on construction order."""
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
