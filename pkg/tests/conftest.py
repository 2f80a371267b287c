import pytest

from chemostab import age, config, kinetics, lumped


@pytest.fixture(scope="session")
def haldane():
    return kinetics.Haldane(M=3.5, K=1.0, a=1.0)


@pytest.fixture(scope="session")
def ex1(haldane):
    return lumped.LumpedSystem(haldane, S_in=16 / 3, D_star=0.9, b=0.1, p0=1.0)


@pytest.fixture(scope="session")
def ex1_eqs(ex1):
    return lumped.equilibria(ex1)


@pytest.fixture(scope="session")
def ex1_eq(ex1_eqs):
    return ex1_eqs[1]


@pytest.fixture(scope="session")
def ex2(haldane):
    return age.AgeSystem(haldane, S_in=16 / 3, D_star=0.9, b=0.1, p0=0.8, q0=1.0, gamma=0.2)


@pytest.fixture(scope="session")
def ex2_eqs(ex2):
    return age.equilibria3(ex2)


@pytest.fixture(scope="session")
def ex2_eq(ex2_eqs):
    return ex2_eqs[1]


@pytest.fixture(scope="session")
def divergent(haldane):
    return lumped.LumpedSystem(haldane, S_in=16 / 3, D_star=0.2, b=0.8, p0=1.0)


@pytest.fixture(scope="session")
def fb():
    return lumped.FeedbackConfig(delta=10.0, alpha=0.5)


@pytest.fixture(scope="session")
def fb2():
    return lumped.FeedbackConfig(delta=1.0, alpha=0.5)


@pytest.fixture(scope="session")
def scenario():
    return lambda name: config.load_config(config.scenario_path(name))


# --- acceptance summary -----------------------------------------------------

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def acceptance(request):
    """``record(n, ok, detail)`` prints one line and queues it for the summary."""
    lines = request.config.stash[ACCEPTANCE_LINES]

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
