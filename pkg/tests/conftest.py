import numpy as np
import pytest

from patchbalance.core import Manifest, PatchRecord, SlideRecord, AnnotationRegion


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_manifest():
    """Two 512x512 slides of four 256-px patches each; slide s1 has a tumor box."""
    tumor = AnnotationRegion(((0, 0), (256, 0), (256, 256), (0, 256)))
    slides = (SlideRecord("s1", 1, 512, 512, (tumor,)),
              SlideRecord("s2", 0, 512, 512, ()))
    patches = []
    pid = 0
    for sid in ("s1", "s2"):
        for q in (0, 256):
            for p in (0, 256):
                patches.append(PatchRecord(pid, sid, ((p, q), (p + 256, q + 256))))
                pid += 1
    return Manifest(slides, tuple(patches), 256)


_ACCEPTANCE = {}


def record(number, title, ok, detail):
    """Store one acceptance line; printed in the terminal summary."""
    _ACCEPTANCE[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
    print(_ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
