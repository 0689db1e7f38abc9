import pytest

from fcvsr.config import Config, LossConfig, TrainConfig, preset
from fcvsr.data import Degradation, prepare_dataset, write_synthetic_dataset

COPY_CODEC = "cp {input}/*.png {output}/"


def tiny_config(**train) -> Config:
    model = preset("FCVSR-S", channels=4, num_offsets=2, num_bands=2, num_groups=1, kernel_size=3)
    tc = dict(batch_size=2, patch_size=16, checkpoint_every=2, schedule_scale=0.001)
    tc.update(train)
    return Config(model, LossConfig(), TrainConfig(**tc), "FCVSR-S")


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    hr = write_synthetic_dataset(root / "hr", sequences=1, num_frames=4, size=32, seed=7)
    return prepare_dataset(hr, root / "prepared", Degradation("QP", 37, COPY_CODEC))


# criterion number -> (passed, one-line detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
