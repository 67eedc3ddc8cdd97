import numpy as np
import pytest

from sinus_analysis.phantom import EllipsoidSpec, PhantomSpec, generate, standard_spec
from sinus_analysis.schema import sinus_sides


def random_spec(rng: np.random.Generator, noise_sd: float = 0.0, cell: int = 14) -> PhantomSpec:
    """Up to eight small ellipsoids, one per 2x2x2 cell so they never overlap."""
    dims = (2 * cell + 2, 2 * cell + 2, 2 * cell + 2)
    cells = list(np.ndindex(2, 2, 2))
    rng.shuffle(cells)
    structures = []
    for (sinus, side), c in zip(sinus_sides(), cells):
        if rng.random() < 0.15:
            continue
        radii = rng.uniform(1.5, cell / 2 - 1, size=3)
        lo = np.array(c) * cell + 1 + radii
        hi = (np.array(c) + 1) * cell + 1 - radii
        center = rng.uniform(lo, np.maximum(lo, hi))
        structures.append(
            EllipsoidSpec(sinus, side, tuple(center), tuple(radii), float(rng.uniform(0, 1)))
        )
    return PhantomSpec(
        dims=dims,
        structures=tuple(structures),
        noise_sd=noise_sd,
        seed=int(rng.integers(0, 2**31)),
    )


@pytest.fixture(scope="session")
def standard():
    return generate(standard_spec())


@pytest.fixture(scope="session")
def standard_clean():
    return generate(standard_spec(noise_sd=0.0))


# one PASS/FAIL line per acceptance criterion in the terminal summary
_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
