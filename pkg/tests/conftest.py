import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vtryon.config import RunConfig  # noqa: E402
from vtryon.data import SynthConfig, synth_generate  # noqa: E402

# criterion name -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def criterion():
    """Record a criterion outcome and fail the test if it did not pass."""

    def record(name, ok, detail):
        ACCEPTANCE[name] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return record


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """The desk-scale synthetic dataset: 8 training pairs, 4 test pairs, 64x48, seed 0."""
    return synth_generate(SynthConfig(seed=0, n_samples=8, n_test=4), tmp_path_factory.mktemp("synth"))


@pytest.fixture(scope="session")
def desk_cfg(synth_root, tmp_path_factory):
    return RunConfig(data_root=str(synth_root), out_dir=str(tmp_path_factory.mktemp("run")))


@pytest.fixture(scope="session")
def e2e(desk_cfg):
    """All three stages trained once with the default desk configuration."""
    from vtryon.train import _load_train, train_segmask, train_tryon, train_warp

    out = Path(desk_cfg.out_dir)
    t0 = time.time()
    data = _load_train(desk_cfg)
    warp = train_warp(desk_cfg, out / "warp.pt", out / "warp.csv", data)
    seg = train_segmask(desk_cfg, out / "seg.pt", out / "seg.csv", data)
    tryon = train_tryon(desk_cfg, warp, seg, out / "tryon.pt", out / "tryon.csv", data)
    return {"cfg": desk_cfg, "data": data, "warp": warp, "seg": seg, "tryon": tryon, "seconds": time.time() - t0}
