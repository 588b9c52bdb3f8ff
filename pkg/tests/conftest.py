"""Shared fixtures. The planted experiment is expensive, so it runs once per
session and its artifacts are reused by module tests, CLI tests, and the
acceptance suite."""
from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from xadapter.planted import (adapt_world, build_world, evaluate_zero_shot,
                              export_world, heldout_mlm_loss, static_mask_descent)
from xadapter.retrieval import inject_noise

PLANTED_SEED = 0

# wall-clock of each expensive session stage, for the runtime budgets
STAGE_SECONDS: dict[str, float] = {}


def _timed(name):
    class _Timer:
        def __enter__(self):
            self.start = time.perf_counter()

        def __exit__(self, *exc):
            STAGE_SECONDS[name] = time.perf_counter() - self.start

    return _Timer()


@pytest.fixture(scope="session")
def planted_world():
    with _timed("build"):
        world = build_world(seed=PLANTED_SEED)
    return world


@pytest.fixture(scope="session")
def planted_adapted(planted_world):
    """Adapt once; capture freeze digests and the loss history."""
    digest_before = planted_world.model.digest()
    with _timed("adapt"):
        plan, run = adapt_world(planted_world)
    digest_after = planted_world.model.digest()
    return {
        "plan": plan,
        "run": run,
        "digest_before": digest_before,
        "digest_after": digest_after,
    }


@pytest.fixture(scope="session")
def planted_eval(planted_world, planted_adapted):
    with _timed("eval"):
        baseline = evaluate_zero_shot(planted_world, None)
        adapted = evaluate_zero_shot(planted_world, planted_adapted["plan"])
        noisy_bank = inject_noise(planted_world.bank, 0.1,
                                  np.random.default_rng(123))
        noisy = evaluate_zero_shot(planted_world, planted_adapted["plan"],
                                   bank=noisy_bank)
    return {"baseline": baseline, "adapted": adapted, "noisy": noisy}


@pytest.fixture(scope="session")
def planted_descent(planted_world):
    """Deterministic full-batch loss history (static masks), 100 steps."""
    with _timed("descent"):
        history = static_mask_descent(planted_world, steps=100)
    return history


@pytest.fixture(scope="session")
def planted_heldout(planted_world, planted_adapted):
    return {
        "baseline": heldout_mlm_loss(planted_world, None),
        "adapted": heldout_mlm_loss(planted_world, planted_adapted["plan"]),
    }


@pytest.fixture(scope="session")
def planted_artifacts(planted_world, planted_adapted, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("planted")
    return export_world(planted_world, planted_adapted["plan"], str(out_dir))
