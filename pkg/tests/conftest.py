import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from dit_grow import cli

REPORT = pytest.StashKey[list]()


@dataclass
class ToyRun:
    """One default-config training run through the CLI, shared by the slow tests."""

    dir: Path
    config: Path
    ckpt: Path
    metrics: Path
    seconds: float


def read_losses(path) -> list[float]:
    rows = Path(path).read_text().splitlines()[1:]
    return [float(r.split(",")[1]) for r in rows]


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory) -> ToyRun:
    d = tmp_path_factory.mktemp("toy")
    config = d / "toy.cfg"
    config.write_text("# defaults: d=32, N=2, batch 8, 512 samples, 2000 steps\n")
    ckpt = d / "toy.ckpt"
    t0 = time.perf_counter()
    assert cli.main(["train", "--config", str(config), "--out", str(ckpt)]) == 0
    return ToyRun(d, config, ckpt, d / "toy.ckpt.metrics.csv", time.perf_counter() - t0)


@pytest.fixture
def report(request):
    lines = request.config.stash.setdefault(REPORT, [])

    def record(n: int, ok: bool, detail: str = "") -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}" + (f" {detail}" if detail else "")
        print(line)
        lines.append((n, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(REPORT, [])
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
