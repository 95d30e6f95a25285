import pytest

from fedcl.harness import config_from_dict, prepare

ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record a named acceptance verdict, then assert it."""
    def check(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_setup():
    """A quick 4-client federation on synthetic 12-feature data."""
    def build(**overrides):
        raw = {"n": 240, "d": 12, "classes": 3, "hidden": [8], "K": 4, "C": 0.5, "B": 16, "lr": 0.1,
               "proxy_fraction": 0.05, "rounds": 3, "noise": 0.3, **overrides}
        cfg = config_from_dict(raw)
        _, shards, proxy = prepare(cfg)
        return cfg, shards, proxy
    return build
