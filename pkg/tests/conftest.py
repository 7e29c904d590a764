import json
import os
from pathlib import Path

import numpy as np
import pytest

from toothfill import _backend
from toothfill.cli import main
from toothfill.augment import AugmentConfig, build_sample
from toothfill.phantom import generate_phantom_pair

DATA = Path(__file__).parent / "data"

# acceptance lines collected by tests/test_acceptance.py and echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(params=sorted(_backend.BACKENDS))
def backend(request):
    """Every available kernel backend."""
    return request.param


@pytest.fixture(scope="session")
def phantom_pair():
    return generate_phantom_pair(0)


@pytest.fixture(scope="session")
def lower_arch(phantom_pair):
    return phantom_pair[0]


@pytest.fixture(scope="session")
def small_samples(phantom_pair):
    """Four 16^3 samples with antagonists."""
    lower, upper = phantom_pair
    cfg = AugmentConfig(resolution=16)
    return [build_sample(lower, fdi, upper, cfg, seed=i) for i, fdi in enumerate([31, 34, 36, 46])]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMOKE_INI = """\
[augment]
resolution = 16

[data]
arches = arch/phantom_0_lower.obj
antagonists = arch/phantom_0_upper.obj
out_dir = dataset
master_seed = 11

[unet]
base_channels = 8
channel_mult = 1 2

[train]
manifest = dataset/manifest.json
steps = 200
batch_size = 4
checkpoint = model.tfck
log_every = 100
"""


def run_pipeline(root: Path):
    """Run phantom -> augment -> train -> complete -> eval -> mesh inside ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "run.ini").write_text(SMOKE_INI)
    cwd = os.getcwd()
    os.chdir(root)
    try:
        codes = [
            main(["phantom", "--seed", "0", "--out", "arch"]),
            main(["augment", "--config", "run.ini"]),
            main(["train", "--config", "run.ini"]),
        ]
        manifest = json.loads(Path("dataset/manifest.json").read_text())
        first = manifest["samples"][0]["id"]
        codes += [
            main(["complete", "--checkpoint", "model.tfck", "--context", f"dataset/{first}_context.sdfg",
                  "--antagonist", f"dataset/{first}_antagonist.sdfg", "--steps", "10", "--w", "2",
                  "--seed", "3", "--out", "done.sdfg"]),
            main(["eval", "--manifest", "dataset/manifest.json", "--checkpoint", "model.tfck",
                  "--out", "eval", "--steps", "5", "--w", "1", "--chamfer-samples", "500"]),
            main(["mesh", "done.sdfg", "done_again.obj"]),
        ]
    finally:
        os.chdir(cwd)
    return codes


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="session")
def cli_smoke(tmp_path_factory):
    """Two independent runs of the full pipeline: (roots, exit codes)."""
    roots = [tmp_path_factory.mktemp("smoke_a"), tmp_path_factory.mktemp("smoke_b")]
    return roots, [run_pipeline(r) for r in roots]
