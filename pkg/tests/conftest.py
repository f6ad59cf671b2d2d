import time

import numpy as np
import pytest
import torch

from adaptive_zoom import harness
from adaptive_zoom.config import ModelConfig
from adaptive_zoom.scenes import EOS, PatchEncoder
from adaptive_zoom.sequence import SegmentedSequence, assign_positions, text_segment, visual_segment
from adaptive_zoom.transformer import DTYPE, Backbone

TINY = ModelConfig(num_layers=4, hidden_dim=16, num_heads=2, vocab_size=32, split_depth=2, branch_depth=2)


def random_sequence(rng: np.random.Generator, d: int, vocab: int = 32, grid=None, user_len=None, response_len=0):
    """``[system, visual, user, (response)]`` with random ids and random visual rows."""
    h, w = grid or (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    visual = torch.as_tensor(rng.standard_normal((h * w, d)), dtype=DTYPE)
    segs = [
        text_segment("system", rng.integers(0, vocab, size=int(rng.integers(1, 4))).tolist()),
        visual_segment(visual, (h, w)),
        text_segment("user", rng.integers(0, vocab, size=user_len or int(rng.integers(1, 5))).tolist()),
    ]
    if response_len:
        segs.append(text_segment("response", rng.integers(0, vocab, size=response_len).tolist()))
    return assign_positions(SegmentedSequence(tuple(segs)))


@pytest.fixture(scope="session")
def tiny_model():
    return Backbone(TINY, seed=11, eos_id=EOS)


@pytest.fixture(scope="session")
def model():
    """Default-size backbone with random weights (structure tests only)."""
    return Backbone(ModelConfig(), seed=5, eos_id=EOS)


@pytest.fixture(scope="session")
def encoder():
    return PatchEncoder(ModelConfig().hidden_dim, seed=0)


@pytest.fixture(scope="session")
def headline(tmp_path_factory):
    """The full scripted run (pre-train, datasets, both branches, bench), computed once per session."""
    out = tmp_path_factory.mktemp("headline")
    start = time.perf_counter()
    result = harness.run_headline(out, seed=0)
    return out, result, time.perf_counter() - start


@pytest.fixture(scope="session")
def trained_system(headline):
    out, _, _ = headline
    model, encoder, gate, rpn, meta = harness.load_system(out / "system.bin")
    return model, encoder, gate, rpn


# -- acceptance reporting -------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.failed:
        detail = detail or str(report.longrepr).strip().splitlines()[-1][:200]
    _ACCEPTANCE[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}" + (f"  [{detail}]" if detail else ""))
