import pytest

from vsuda.phantom import desk_spec, generate_dataset


def tiny_spec(seed=0):
    return desk_spec(seed=seed, grid=(12, 32, 32), spacing=(1.5, 1.0, 1.0), vs_radius_mm=(2.5, 3.5), cochlea_radius_mm=(1.5, 2.0))


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory):
    """Four annotated A and three unannotated B cases on a 12x32x32 grid."""
    out = tmp_path_factory.mktemp("tiny_cohort")
    ds_a, ds_b, hidden = generate_dataset(tiny_spec(), 4, 3, out, seed=0)
    return ds_a, ds_b, hidden


_CRITERIA = {}


@pytest.fixture
def criterion_log():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def log(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)

    return log


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
