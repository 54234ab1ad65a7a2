import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from geocorr.synth import SynthSpec, humanoid_template  # noqa: E402


@pytest.fixture(scope="session")
def humanoid():
    """(mesh, labels, bone) at a coarse resolution."""
    return humanoid_template(SynthSpec(resolution=0.12))


@pytest.fixture(scope="session")
def humanoid_fine():
    return humanoid_template(SynthSpec(resolution=0.085))


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[n])
