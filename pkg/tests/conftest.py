"""Shared fixtures: small synthetic slide pools built once per session.

Slides here are deliberately small (1-2 s each to synthesize); the
full-profile pools live in test_acceptance.py where the runtime budget is.
"""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from slideqc import synth
from slideqc.oracle import RoiClass

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def tissue_pool_small():
    """Three artifact-free 1024 px slides at 10x, enough for collage mining."""
    triples = [
        synth.synth_slide(
            synth.SyntheticSlideSpec(seed=40 + i, slide_id=f"unit-t{i}",
                                     base_magnification=10.0, extent=(1024, 1024),
                                     level_downsamples=(1, 4, 16))
        )
        for i in range(3)
    ]
    return [(p, g) for p, g, _ in triples]


@pytest.fixture(scope="session")
def tissue_truths_small():
    triples = [
        synth.synth_slide(
            synth.SyntheticSlideSpec(seed=40 + i, slide_id=f"unit-t{i}",
                                     base_magnification=10.0, extent=(1024, 1024),
                                     level_downsamples=(1, 4, 16))
        )
        for i in range(3)
    ]
    return {p.slide_id: t for p, _, t in triples}


@pytest.fixture(scope="session")
def blur_pool_small():
    """One 2048 px slide at 40x with large blobs so 1024 px cells are mineable."""
    spec = synth.SyntheticSlideSpec(
        seed=3, slide_id="unit-b0", base_magnification=40.0, extent=(2048, 2048),
        level_downsamples=(1, 16), class_fractions=dict(synth._BLUR_POOL_FRACTIONS),
        blob_radius_frac=(0.2, 0.35),
    )
    p, g, _ = synth.synth_slide(spec)
    assert any(g.labels.flat[i] in (0, 1, 2, 4) for i in range(g.labels.size))
    return [(p, g)]


@pytest.fixture(scope="session")
def artifact_pool_small():
    """One fold-bearing and one pen-bearing slide, with truths."""
    fold_spec = synth.SyntheticSlideSpec(
        seed=11, slide_id="unit-f0", base_magnification=10.0, extent=(2048, 2048),
        level_downsamples=(1, 4, 16), fold_count=2,
    )
    # Pen windows are cut at 0.625x, so the slide must span >= 512 px there.
    pen_spec = synth.SyntheticSlideSpec(
        seed=12, slide_id="unit-p0", base_magnification=2.5, extent=(2048, 2048),
        level_downsamples=(1, 4), pen_stroke_count=2,
    )
    fp, fg_, ft = synth.synth_slide(fold_spec)
    pp, pg, pt = synth.synth_slide(pen_spec)
    return {
        "fold": ([(fp, fg_)], {fp.slide_id: ft}),
        "pen": ([(pp, pg)], {pp.slide_id: pt}),
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def roi_name(v: int) -> str:
    return RoiClass(int(v)).name


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    import sys

    mod = sys.modules.get("tests.test_acceptance") or sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None) if mod else None
    if lines:
        terminalreporter.write_sep("=", "shipping criteria")
        for line in lines:
            terminalreporter.write_line(line)
