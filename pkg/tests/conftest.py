import numpy as np
import pytest

from symchoice.data import Dataset, Observation
from symchoice.expr import SymbolicLibrary

ALTS = ("Car", "Train", "Swissmetro")


def proposal(*groups):
    """Render expression groups in the list-of-tuples answer format."""
    body = ", ".join("(" + ", ".join(f'"{e}"' for e in g) + ")" for g in groups)
    return f"```[{body}]```"


@pytest.fixture
def travel_data():
    rng = np.random.default_rng(7)
    obs = []
    for i in range(60):
        f = {
            "car_time": float(rng.uniform(20, 90)),
            "train_time": float(rng.uniform(20, 90)),
            "metro_time": float(rng.uniform(10, 60)),
            "age": float(rng.integers(1, 5)),
        }
        u = np.array([-0.05 * f["car_time"], -0.05 * f["train_time"], -0.05 * f["metro_time"]])
        label = ALTS[int(np.argmax(u + rng.gumbel(size=3)))]
        obs.append(Observation(f, label, f"p{i // 2}", {"age": f["age"]}, i % 2))
    return Dataset(ALTS, obs)


@pytest.fixture
def travel_library():
    return SymbolicLibrary.for_features(["car_time", "train_time", "metro_time", "age"])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
