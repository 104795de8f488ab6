from __future__ import annotations

import os
import time
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

torch.manual_seed(0)
torch.set_num_threads(max(1, torch.get_num_threads()))

settings.register_profile(
    "suite",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

# criterion number -> (passed: bool, detail: str); populated by the
# acceptance tests and echoed after the summary so every run shows one
# PASS/FAIL line per criterion.
CRITERION_RESULTS: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERION_RESULTS[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERION_RESULTS):
        passed, detail = CRITERION_RESULTS[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status} - {detail}")


STUDY_VARIANTS = {
    "full": {},
    "no_rkd": {"no_rkd": True},
    "no_hkd": {"no_hkd": True},
    "no_chr": {"no_chr": True},
    "naive": {"naive": True},
}
STUDY_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def digits_study(tmp_path_factory):
    """Five-variant, three-seed ablation study on the 10-class digits set.

    A fresh run takes roughly an hour on one CPU core. Set DFCIL_STUDY_DIR to
    a persistent directory to resume finished runs from their checkpoints and
    make repeated test invocations cheap.
    """
    from dfcil.config import resolve_config
    from dfcil.experiments import run_seeds

    root = os.environ.get("DFCIL_STUDY_DIR")
    study_dir = Path(root) if root else tmp_path_factory.mktemp("digits-study")
    study_dir.mkdir(parents=True, exist_ok=True)

    started = time.monotonic()
    reports = {}
    for variant, flags in STUDY_VARIANTS.items():
        config = resolve_config({"preset": "digits-desk"})
        for key, value in flags.items():
            setattr(config.trainer.ablation, key, value)
        reports[variant] = run_seeds(config, study_dir, seeds=list(STUDY_SEEDS),
                                     label=variant)
    return {
        "dir": study_dir,
        "reports": reports,
        "elapsed": time.monotonic() - started,
    }
