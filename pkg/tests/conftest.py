import pathlib
import sys

# make the shared oracles importable as ``helpers`` from every test module
sys.path.insert(0, str(pathlib.Path(__file__).parent))

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
