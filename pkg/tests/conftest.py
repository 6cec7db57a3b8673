import itertools
import time

import numpy as np
import pytest

from anchornet.corpus import make_planted_corpus
from anchornet.model import AnchorNetT, ModelConfig
from anchornet.rf import PatchRect
from anchornet.training import Schedule, train

# Desk-scale training run shared by the acceptance and pipeline tests.
PLANTED_SCHEDULE = Schedule(epochs=20, batch_size=50, learning_rate=0.1, momentum=0.9, weight_decay=1e-3, seed=0)


@pytest.fixture(scope="session")
def planted():
    return make_planted_corpus(n_train=2000, n_val=500, n_test=0, seed=0)


@pytest.fixture(scope="session")
def trained(planted):
    """(model, train log, wall seconds) after the desk schedule; about two minutes on one core."""
    config = ModelConfig(vocab_size=len(planted.corpus.vocab))
    model = AnchorNetT(config, seed=PLANTED_SCHEDULE.seed)
    start = time.perf_counter()
    result = train(model, planted.corpus, PLANTED_SCHEDULE)
    return model, result, time.perf_counter() - start


# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Oracles -------------------------------------------------------------------

def traced_support(loc, layers, in_size):
    """Input pixels reachable from output location ``loc`` by walking index sets backwards."""
    rows, cols = {loc[0]}, {loc[1]}
    for layer in reversed(layers):
        (kh, kw), (sh, sw), (ph, pw) = layer.kernel, layer.stride, layer.padding
        rows = {r * sh - ph + d for r in rows for d in range(kh)}
        cols = {c * sw - pw + d for c in cols for d in range(kw)}
    rows = {r for r in rows if 0 <= r < in_size[0]}
    cols = {c for c in cols if 0 <= c < in_size[1]}
    return {(r, c) for r in rows for c in cols}


def bounding_rect(pixels) -> PatchRect:
    rows = [r for r, _ in pixels]
    cols = [c for _, c in pixels]
    return PatchRect(min(rows), min(cols), max(rows) - min(rows) + 1, max(cols) - min(cols) + 1)


def rect_pixels(rect: PatchRect):
    return {(r, c) for r in range(rect.top, rect.bottom) for c in range(rect.left, rect.right)}


def pixel_iou(a: PatchRect, b: PatchRect) -> float:
    pa, pb = rect_pixels(a), rect_pixels(b)
    return len(pa & pb) / len(pa | pb)


def lip_oracle(values, rf, jump, K, T, P):
    """Greedy selection written directly from the pseudocode, with pixel-set IoU.

    ``values`` is a 2D grid; returns the list of selected (row, col).
    """
    H, W = values.shape
    cells = sorted(itertools.product(range(H), range(W)), key=lambda rc: (-values[rc], rc))
    budget = min(H * W, max(1, int(np.ceil(H * W * P - 1e-9))))

    def patch(rc):
        return PatchRect(rc[0] * jump[0], rc[1] * jump[1], rf[0], rf[1])

    chosen = [cells[0]]
    i = 1
    while i < budget and len(chosen) < K:
        cand = cells[i]
        if all(pixel_iou(patch(cand), patch(s)) < T for s in chosen):
            chosen.append(cand)
        i += 1
    return chosen
