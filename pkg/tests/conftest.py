import numpy as np
import pytest

from layersnr.checkpoint import TensorRecord, write_fixture
from layersnr.synth import GroupSpec, gen_mini_checkpoint

_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid or "::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in sorted(_acceptance.items(), key=lambda kv: _criterion_number(kv[0])):
        name = nodeid.split("::")[-1]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}")


def _criterion_number(nodeid):
    tail = nodeid.split("::test_criterion_")[-1]
    return int(tail.split("_")[0])


@pytest.fixture
def two_group_checkpoint(tmp_path):
    """4 layers x (q_proj, down_proj), plus 1-D decoys and an embedding."""
    path = tmp_path / "model.safetensors"
    groups = [
        GroupSpec("self_attn.q_proj", 32, 32, noise_sigma=0.05, spikes=lambda i: [5.0] * (i + 1), seed=1),
        GroupSpec("mlp.down_proj", 32, 48, noise_sigma=0.05, spikes=lambda i: [3.0] * (i + 1), seed=2),
    ]
    records = gen_mini_checkpoint(4, groups, path)
    records.append(TensorRecord.from_array("model.embed_tokens.weight", np.ones((64, 32))))
    write_fixture(records, path)
    return path
