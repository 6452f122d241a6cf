import pytest

from dualcue.datasets import SynthConfig, generate_synthetic


@pytest.fixture(scope="session")
def synth_default(tmp_path_factory):
    """The default synthetic dataset, rendered once per session."""
    out = tmp_path_factory.mktemp("synth_default")
    return generate_synthetic(SynthConfig(), out)


def pytest_terminal_summary(terminalreporter):
    from _report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        verdict, title, detail = RESULTS[number]
        line = f"criterion {number:2d} {verdict}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
