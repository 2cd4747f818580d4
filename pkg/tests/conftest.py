import json

import pytest

TINY = {
    "label": "tiny",
    "dataset": {"preset": "compositional", "num_train": 40, "num_val": 12, "holdout_size": 8},
    "train": {"epochs": 1, "batch_size": 8},
    "omnivore": ["appearance", "flow"],
    "sweep": {"rows": [[0.0, None], [1.0, 30.0], [0.8, 1.0]], "seeds": [0, 1], "tta_clips": [1, 2]},
}


@pytest.fixture
def tiny_dict():
    return json.loads(json.dumps(TINY))


@pytest.fixture
def tiny_config(tmp_path, tiny_dict):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_dict))
    return path


ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record(criterion: int, ok: bool | None, detail: str) -> None:
    """Store a criterion outcome; ``None`` marks a soft criterion that only warns."""
    status = "PASS" if ok else ("WARN" if ok is None else "FAIL")
    ACCEPTANCE[criterion] = (status, detail)
    print(f"criterion {criterion}: {status} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for k in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {status} {detail}")
