import numpy as np
import pytest

from bitweave.tensor import SparseTensorCoo

# six nonzeros in a 4x8x2 box, touching the last index of every mode
TOY_TNS = """# toy 4x8x2 tensor
1 1 1 1.0
2 3 1 2.0
4 8 2 3.0
3 5 2 4.0
1 7 2 5.0
4 2 1 6.0
"""


@pytest.fixture
def toy_path(tmp_path):
    p = tmp_path / "toy.tns"
    p.write_text(TOY_TNS)
    return p


@pytest.fixture
def toy_tensor():
    coords = np.array([[0, 0, 0], [1, 2, 0], [3, 7, 1], [2, 4, 1], [0, 6, 1], [3, 1, 0]])
    return SparseTensorCoo((4, 8, 2), coords, np.arange(1.0, 7.0))


_criteria: list[str] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else "FAIL"
    _criteria.append(f"{status}  {marker.args[0]}" + (f"  ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in _criteria:
            terminalreporter.write_line(line)
