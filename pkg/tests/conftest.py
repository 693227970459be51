"""Shared fixtures.  Rendering and feature extraction are slow, so scenes and
the synthetic training set are built once per session."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from solvis import synthgen as sg
from solvis.classifier import (FeaturedCase, SvmModel, augment, featurize, in_sample_validate,
                               kfold_validate)
from solvis.raster import Raster

settings.register_profile("solvis", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("solvis")


@lru_cache(maxsize=12)
def scene(params: sg.SceneParams) -> sg.RenderedScene:
    return sg.render_scene(params)


def preset_scene(cat: str, seed: int = 1, **changes) -> sg.RenderedScene:
    p = sg.category_preset(cat, seed)
    return scene(replace(p, **changes) if changes else p)


def gray(values) -> Raster:
    return Raster(np.asarray(values, dtype=np.uint8))


@dataclass(frozen=True)
class SyntheticRun:
    cases: list[FeaturedCase]
    model: SvmModel
    in_sample: object
    cv: object
    seconds: float


@pytest.fixture(scope="session")
def synthetic612() -> SyntheticRun:
    """153 rendered cases, flipped to 612, featurized, trained and 4-fold validated."""
    t0 = time.perf_counter()
    cases = []
    for case, rendered in sg.iter_scenes(sg.dataset_params(seed=0)):
        case.scene = rendered
        cases += featurize(augment([case.labeled()]))
        case.scene = None
    model, in_sample = in_sample_validate(cases)
    cv = kfold_validate(cases, 4, 0)
    return SyntheticRun(cases, model, in_sample, cv, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def model(synthetic612) -> SvmModel:
    return synthetic612.model


# -- acceptance report ----------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict(request):
    """Record one criterion's PASS/FAIL line; printed in the terminal summary.

    Tests are named ``test_criterion_<n>_...``; a test that dies before
    recording leaves a FAIL line behind.
    """
    number = int(request.node.name.split("_")[2])
    ACCEPTANCE[number] = f"FAIL criterion {number}: did not finish"

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(ACCEPTANCE[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
