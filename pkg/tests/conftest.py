import sys

import pytest
from hypothesis import HealthCheck, settings

from grmfuzz.config import CampaignConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_cfg() -> CampaignConfig:
    """A campaign small enough to finish in well under a second."""
    return CampaignConfig(
        prefixes_per_iteration=10, top_n=10, candidates_per_prefix=3,
        blocks_per_testcase=2, grm_iteration_cap=4, stage_budget=10,
        pretrain_blocks=1000, checkpoint_every=2,
    )


@pytest.fixture(scope="session")
def vocab():
    from grmfuzz.isa import default_vocabulary

    return default_vocabulary()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
