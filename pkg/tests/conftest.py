import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion and print a PASS/FAIL line for it.

    Usage: ``criterion(number, title)`` then ``criterion.check(ok, detail)``.
    A test that raises before checking is reported as FAIL.
    """
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    class Recorder:
        label = None
        line = None

        def __call__(self, number, title):
            self.label = f"criterion {number:>2} {title}"
            return self

        def check(self, ok, detail=""):
            self.line = f"{'PASS' if ok else 'FAIL'}  {self.label}: {detail}"
            assert ok, detail

    rec = Recorder()
    yield rec
    line = rec.line or f"FAIL  {rec.label}: raised before completing"
    if reporter is not None:
        reporter.write_line("")
        reporter.write_line(line)
    else:
        print(line)
