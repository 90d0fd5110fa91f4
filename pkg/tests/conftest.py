"""Shared fixtures and the acceptance-line reporter.

Acceptance tests register one line per criterion in ``ACCEPTANCE_LINES``;
the terminal-summary hook prints them at the end of the run so the pass/fail
status of every criterion is visible in captured CI output.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from sdaf.stream import LabeledExample

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def make_examples(
    n: int, n_classes: int, size: int = 16, seed: int = 0, id_offset: int = 0
) -> list[LabeledExample]:
    """Random square images with labels cycling 1..n_classes."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        image = torch.from_numpy(
            rng.random((3, size, size), dtype=np.float64).astype(np.float32)
        )
        out.append(
            LabeledExample(
                image=image, label=(i % n_classes) + 1, example_id=id_offset + i
            )
        )
    return out


@pytest.fixture
def examples16():
    return make_examples(8, n_classes=2, size=16, seed=3)


@pytest.fixture
def desk_model():
    from sdaf.network import build_model

    return build_model("desk_scale", K=4, feature_dim=16, init_seed=7)
