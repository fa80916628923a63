import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from trajabc.config import RunConfig  # noqa: E402

TINY_TEXT = """\
[data]
n_records = 40
stride = 2
[model]
d_h = 12
d_z = 4
decoder_mode = forward
k_bom = 2
[loss]
regime = abc_plus
warmup_epochs = 1
[optim]
epochs = 2
batch_size = 16
[run]
eval_l = 5
val_l = 2
"""


@pytest.fixture
def tiny_cfg() -> RunConfig:
    from trajabc.config import parse_config

    return parse_config(TINY_TEXT)


@pytest.fixture
def tiny_ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_TEXT)
    return p
