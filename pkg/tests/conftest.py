import numpy as np
import pytest
import torch

from stainforge.backbone import PerceptualBackbone, save_random_weights
from stainforge.patches import Patch


@pytest.fixture(scope="session")
def weights_path(tmp_path_factory):
    """Seeded VGG19 weight file standing in for the ImageNet checkpoint."""
    path = tmp_path_factory.mktemp("weights") / "vgg19_surrogate.pth"
    save_random_weights(path, seed=0)
    return path


@pytest.fixture(scope="session")
def backbone(weights_path):
    return PerceptualBackbone(weights_path)


def random_patch(seed, size=64, source_id=None):
    rng = np.random.default_rng(seed)
    return Patch(
        rng.random((size, size, 3), dtype=np.float32),
        source_id=source_id or f"rand{seed}",
    )


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print one pass/fail line per numbered acceptance criterion."""
    status_by_name = {}
    for category, label in (("passed", "PASS"), ("failed", "FAIL"),
                            ("error", "FAIL"), ("skipped", "SKIP")):
        for report in terminalreporter.stats.get(category, ()):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid:
                status_by_name.setdefault(nodeid.split("::")[-1], label)
    if not status_by_name:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(status_by_name):
        parts = name.split("_")  # test_criterion_NN_rest...
        number, title = parts[2], " ".join(parts[3:])
        terminalreporter.write_line(
            f"criterion {number} ({title}): {status_by_name[name]}"
        )
