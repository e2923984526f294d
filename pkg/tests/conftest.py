import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tubeground.synthetic import SyntheticSpec, generate_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def small_synthetic():
    """50 training and 20 test videos with small feature widths."""
    common = dict(k_range=(2, 6), d_object=16, d_clip=16, d_word=16, action_strength=1.0,
                  clip_noise_sigma=0.1, noise_sigma=0.5)
    _, train = generate_synthetic(SyntheticSpec(n_videos=50, split="train", **common))
    _, test = generate_synthetic(SyntheticSpec(n_videos=20, split="test", **common))
    return [r.sample for r in train], [r.sample for r in test]


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = rep.nodeid.split("::")[-1]
            if rep.when == "call" and name.startswith("test_criterion_"):
                n = int(name.split("_")[2])
                lines.append((n, f"acceptance criterion {n}: {'PASS' if outcome == 'passed' else 'FAIL'} ({name})"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
