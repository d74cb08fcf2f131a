import time

import pytest

from piece.cli import main
from piece.runcfg import RunPaths, load_run


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Default-config run directory with dataset, models, and stats fitted.

    Stage wall times are recorded so the acceptance suite can add its
    experiment timings on top.
    """
    root = tmp_path_factory.mktemp("toyrun") / "run"
    timings = {}
    for stage, argv in (
        ("datagen", ["datagen", "--run-dir", str(root)]),
        ("train", ["train", "--run-dir", str(root)]),
        ("fit-stats", ["fit-stats", "--run-dir", str(root)]),
    ):
        t0 = time.monotonic()
        rc = main(argv)
        timings[stage] = time.monotonic() - t0
        assert rc == 0, f"stage {stage} failed with exit code {rc}"
    paths = RunPaths(str(root))
    return {"paths": paths, "arts": load_run(paths), "timings": timings}
