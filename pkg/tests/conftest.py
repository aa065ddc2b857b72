import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from xmodseg.volumes import LabelMap, Volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_volume(rng, shape=(6, 8, 10), spacing=(1.0, 1.0, 1.0), code="LPS", source_id="case"):
    data = rng.normal(size=shape).astype(np.float32)
    return Volume(data=data, spacing_mm=spacing, orientation=code, source_id=source_id)


def make_label(rng, shape=(6, 8, 10), spacing=(1.0, 1.0, 1.0), code="LPS", source_id="case"):
    data = rng.integers(0, 4, size=shape).astype(np.int16)
    return LabelMap(data=data, spacing_mm=spacing, orientation=code, source_id=source_id)
