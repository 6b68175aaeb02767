import warnings

import pytest

from sampledmpc import synthesis as syn
from sampledmpc.config import validate_config


@pytest.fixture(scope="session")
def tiny_synth():
    """One full synthesis at the smallest sample scale, shared by all files."""
    cfg = validate_config(
        {"smpc": {"preset": "scaled", "scale": 1e-9, "cost_samples": 200}})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        artifact, report = syn.synthesize(cfg)
    return cfg, artifact, report
