import numpy as np
import pytest

from haco.trajectory_store import Dataset, Demographics


def make_dataset(episodes, action_count=3, feature_names=("x",), demographics=None):
    """Build a Dataset from ``{episode: [(state, action, reward), ...]}``."""
    pid, eid, tt, ss, aa, rr = [], [], [], [], [], []
    for e, steps in episodes.items():
        for t, (s, a, r) in enumerate(steps):
            pid.append(e.split(":")[0])
            eid.append(e)
            tt.append(t)
            ss.append(np.atleast_1d(np.asarray(s, dtype=float)))
            aa.append(a)
            rr.append(r)
    ds = Dataset.from_columns(
        patient_id=pid, episode_id=eid, t=tt, states=np.array(ss), action=aa, reward=rr,
        feature_names=list(feature_names), action_count=action_count,
    )
    if demographics:
        ds = ds.with_demographics({p: Demographics(*d) for p, d in demographics.items()})
    return ds


@pytest.fixture
def tmp_csv(tmp_path):
    def write(text, name="data.csv"):
        path = tmp_path / name
        path.write_text(text)
        return path

    return write


ACCEPTANCE: dict[str, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {title}: {detail}"
    ACCEPTANCE[f"{number:02d}"] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
