import numpy as np
import pytest

from sdct_auxnet.backbone import BackboneConfig
from sdct_auxnet.data import SyntheticConfig, synthesize
from sdct_auxnet.pipeline import DESK_SCALE, TrainConfig, cross_validate

TOY_DATA = SyntheticConfig(train_subjects_per_class=7, test_subjects_per_class=2, images_per_subject=10)
TOY_TRAIN = TrainConfig(**{**DESK_SCALE, "epochs": 2, "lr_drop_epochs": ()})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_arrays():
    """Small synthetic set: 14 train subjects, 4 test subjects, 10 images each."""
    records, images = synthesize(TOY_DATA)
    train = np.array([r.split == "train" for r in records])
    labels = np.array([r.label for r in records])
    sids = [r.subject_id for r in records]
    return {
        "records": records,
        "images": images,
        "train_images": images[train],
        "train_labels": labels[train],
        "train_subjects": [s for s, t in zip(sids, train) if t],
        "test_images": images[~train],
        "test_labels": labels[~train],
        "test_subjects": [s for s, t in zip(sids, train) if not t],
    }


@pytest.fixture(scope="session")
def toy_cv(toy_arrays):
    """A trained 7-member ensemble on the toy set (two epochs per member)."""
    a = toy_arrays
    return cross_validate(
        a["train_images"], a["train_labels"], a["train_subjects"], a["test_images"], a["test_labels"],
        TOY_TRAIN, theta=0.9, k=7, backbone=BackboneConfig(input_side=TOY_DATA.side),
    )


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    from sdct_auxnet.data import generate_synthetic

    root = tmp_path_factory.mktemp("toy_ds")
    generate_synthetic(TOY_DATA, root)
    return root


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def check(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
