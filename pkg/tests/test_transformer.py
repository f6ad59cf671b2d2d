import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_zoom.config import ModelConfig
from adaptive_zoom.geometry import NormalizedBBox
from adaptive_zoom.sequence import Segment, SegmentedSequence, assign_positions, text_segment, visual_segment
from adaptive_zoom.transformer import DTYPE, Backbone, MultiAxisRotary

from conftest import TINY, random_sequence


def token_prefix(seq: SegmentedSequence, m: int) -> SegmentedSequence:
    """The first ``m`` tokens of ``seq`` as a sequence of its own (a visual span may be cut)."""
    segs, left = [], m
    for seg in seq.segments:
        if left <= 0:
            break
        take = min(left, len(seg))
        if take == len(seg):
            segs.append(seg)
        else:
            segs.append(Segment(seg.kind, seg.tokens[:take], None if not seg.is_text else seg.grid))
        left -= take
    return SegmentedSequence(tuple(segs), seq.positions[:m])


def _vis(h, w, d=8):
    return visual_segment(torch.zeros(h * w, d, dtype=DTYPE), (h, w))


# -- config ------------------------------------------------------------------------


@given(
    layers=st.integers(2, 8),
    heads=st.integers(1, 4),
    head_dim=st.sampled_from([6, 8, 10, 16]),
    b=st.integers(1, 7),
    r=st.integers(1, 7),
)
def test_model_config_invariants(layers, heads, head_dim, b, r):
    ok = 1 <= b < layers and b + r <= layers
    if ok:
        cfg = ModelConfig(num_layers=layers, hidden_dim=heads * head_dim, num_heads=heads, split_depth=b, branch_depth=r)
        assert cfg.hidden_dim == cfg.num_heads * cfg.head_dim
        assert cfg.head_dim % 2 == 0
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    else:
        with pytest.raises(ValueError):
            ModelConfig(num_layers=layers, hidden_dim=heads * head_dim, num_heads=heads, split_depth=b, branch_depth=r)


def test_model_config_rejects_odd_head_dim():
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=28, num_heads=4)


# -- assign_positions --------------------------------------------------------------


def test_positions_text_then_image_then_text():
    seq = SegmentedSequence((text_segment("system", [0, 0]), _vis(2, 3), text_segment("user", [2])))
    pos = assign_positions(seq).positions
    assert pos[0].tolist() == [0, 0, 0]
    assert pos[1].tolist() == [1, 1, 1]
    grid = pos[2:8]
    assert (grid[:, 0] == 2).all()
    assert grid[:, 1:].tolist() == [[i, j] for i in range(2) for j in range(3)]
    assert pos[8].tolist() == [5, 5, 5]


def test_positions_roi_corners_land_on_box_corners():
    box = NormalizedBBox(1, 0, 5, 3)
    seq = SegmentedSequence(
        (text_segment("system", [0]), _vis(4, 6), visual_segment(torch.zeros(9, 8, dtype=DTYPE), (3, 3), "roi_visual"),
         text_segment("user", [2, 3]))
    )
    pos = assign_positions(seq, roi_box=box).positions
    t_src = 1
    roi = pos[25:34].view(3, 3, 3)
    assert roi[0, 0].tolist() == [t_src + 4, 0, 1]
    assert roi[2, 2].tolist() == [t_src + 4, 3, 5]
    assert roi[1, 1].tolist() == [t_src + 4, 1.5, 3]
    # the resumed user positions sit above every roi component and the running counter
    user = pos[34:]
    assert user[0, 0] > roi.max()
    assert user[0].tolist() == [7, 7, 7] and user[1].tolist() == [8, 8, 8]


def test_positions_degenerate_roi_axis_uses_midpoint():
    box = NormalizedBBox(0, 1, 3, 2)
    seq = SegmentedSequence(
        (_vis(4, 4), visual_segment(torch.zeros(4, 8, dtype=DTYPE), (1, 4), "roi_visual"), text_segment("user", [1]))
    )
    roi = assign_positions(seq, roi_box=box).positions[16:20]
    assert (roi[:, 1] == 1.5).all()
    assert roi[:, 2].tolist() == [0, 1, 2, 3]


def test_positions_errors():
    with pytest.raises(ValueError):
        assign_positions(SegmentedSequence((Segment("visual", torch.zeros(4, 8)), text_segment("user", [1]))))
    roi_seq = SegmentedSequence(
        (_vis(2, 2), visual_segment(torch.zeros(1, 8, dtype=DTYPE), (1, 1), "roi_visual"), text_segment("user", [1]))
    )
    with pytest.raises(ValueError):
        assign_positions(roi_seq)
    with pytest.raises(ValueError):
        NormalizedBBox(3, 0, 1, 2)
    with pytest.raises(ValueError):
        SegmentedSequence((_vis(2, 2), visual_segment(torch.zeros(1, 8), (1, 1), "roi_visual")))


@settings(max_examples=200, deadline=None)
@given(
    src=st.tuples(st.integers(1, 8), st.integers(1, 8)),
    roi=st.tuples(st.integers(1, 6), st.integers(1, 6)),
    corners=st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)),
    lead=st.integers(1, 4),
)
def test_roi_positions_property(src, roi, corners, lead):
    h, w = src
    xa, xb = sorted((corners[0] * (w - 1), corners[1] * (w - 1)))
    ya, yb = sorted((corners[2] * (h - 1), corners[3] * (h - 1)))
    box = NormalizedBBox(xa, ya, xb, yb)
    rh, rw = roi
    seq = SegmentedSequence(
        (text_segment("system", [0] * lead), _vis(h, w), visual_segment(torch.zeros(rh * rw, 8, dtype=DTYPE), roi, "roi_visual"),
         text_segment("user", [1, 2]))
    )
    pos = assign_positions(seq, roi_box=box).positions
    assert torch.isfinite(pos).all() and (pos >= 0).all()
    r = pos[lead + h * w : lead + h * w + rh * rw]
    assert (r[:, 0] == lead + min(h, w)).all()
    assert ((r[:, 1] >= ya) & (r[:, 1] <= yb) & (r[:, 2] >= xa) & (r[:, 2] <= xb)).all()
    assert (pos[-2:, 0] > pos[:-2].max()).all()


# -- rotary ------------------------------------------------------------------------


def test_rotary_position_zero_is_identity():
    rot = MultiAxisRotary(16)
    x = torch.randn(5, 2, 16, dtype=DTYPE)
    assert torch.equal(rot.apply(x, torch.zeros(5, 3, dtype=DTYPE)), x)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_rotary_relativity_per_axis(axis):
    rot = MultiAxisRotary(16)
    g = torch.Generator().manual_seed(axis)
    q = torch.randn(1, 1, 16, generator=g, dtype=DTYPE)
    k = torch.randn(1, 1, 16, generator=g, dtype=DTYPE)

    def at(v):
        p = torch.zeros(1, 3, dtype=DTYPE)
        p[0, axis] = v
        return p

    for delta in (-3.0, 0.0, 2.5, 7.0):
        logits = [
            float((rot.apply(q, at(a)) * rot.apply(k, at(a - delta))).sum()) for a in np.linspace(0, 40, 9) + abs(delta)
        ]
        assert max(logits) - min(logits) <= 1e-6


def test_rotary_bands_cover_head_dim():
    for hd in (6, 8, 16, 24):
        rot = MultiAxisRotary(hd)
        assert sum(rot.bands) == hd and all(b % 2 == 0 for b in rot.bands)


# -- prefill -------------------------------------------------------------------------


def test_prefill_cache_covers_every_layer(model):
    rng = np.random.default_rng(0)
    seq = random_sequence(rng, 64, grid=(2, 2), user_len=2)
    seq = SegmentedSequence(seq.segments, seq.positions)
    out = model.prefill(seq)
    assert out.cache.num_layers == 6
    assert {k.shape[0] for k in out.cache.keys} == {len(seq)}
    assert out.cache.rotary_applied
    assert out.tap.layer_index == model.cfg.split_depth
    assert out.final.activations.shape == (len(seq), 64)


def test_prefill_eight_tokens():
    m = Backbone(ModelConfig(), seed=1)
    seq = assign_positions(SegmentedSequence((text_segment("system", list(range(8))),)))
    out = m.prefill(seq)
    assert out.cache.cached_length == 8
    assert all(k.shape[0] == 8 for k in out.cache.keys + out.cache.values)


def test_prefill_deterministic(model):
    seq = random_sequence(np.random.default_rng(3), 64)
    a, b = model.prefill(seq), model.prefill(seq)
    assert torch.equal(a.final.activations, b.final.activations)
    assert all(torch.equal(x, y) for x, y in zip(a.cache.keys, b.cache.keys))


def test_prefill_errors(model):
    seq = random_sequence(np.random.default_rng(0), 64)
    with pytest.raises(ValueError):
        model.prefill(SegmentedSequence(seq.segments))
    with pytest.raises(ValueError):
        model.prefill(seq, record_attention_layer=9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), data=st.data())
def test_prefix_invariance_exact(tiny_model, seed, data):
    seq = random_sequence(np.random.default_rng(seed), TINY.hidden_dim, response_len=2)
    m = data.draw(st.integers(1, len(seq)))
    full = tiny_model.prefill(seq)
    part = tiny_model.prefill(token_prefix(seq, m))
    assert torch.equal(full.final.activations[:m], part.final.activations)
    assert torch.equal(full.tap.activations[:m], part.tap.activations)
    for fk, pk, fv, pv in zip(full.cache.keys, part.cache.keys, full.cache.values, part.cache.values):
        assert torch.equal(fk[:m], pk) and torch.equal(fv[:m], pv)


def test_attention_rows_are_causal_softmax(model):
    seq = random_sequence(np.random.default_rng(1), 64)
    attn = model.prefill(seq, record_attention_layer=2).attention
    n = len(seq)
    assert attn.shape == (n, n)
    assert torch.allclose(attn.sum(-1), torch.ones(n, dtype=DTYPE), atol=1e-12)
    assert (attn.triu(1) == 0).all()


def test_forward_batch_matches_inference_path(model):
    seq = random_sequence(np.random.default_rng(2), 64)
    ref = model.prefill(seq).final.activations
    out = model.forward_batch(model.embed(seq)[None], seq.positions[None])[0]
    assert (out - ref).abs().max() <= 1e-10


# -- partial prefill -------------------------------------------------------------------


def test_partial_prefill_ten_plus_four(model):
    rng = np.random.default_rng(4)
    d = model.cfg.hidden_dim
    segs = (
        text_segment("system", [0, 5, 6]),
        visual_segment(torch.as_tensor(rng.standard_normal((6, d))), (2, 3)),
        text_segment("user", [7]),
        text_segment("response", [8, 9, 10, 11]),
    )
    seq = assign_positions(SegmentedSequence(segs))
    prefix = SegmentedSequence(segs[:3], seq.positions[:10])
    pre = model.prefill(prefix)
    before = [k.clone() for k in pre.cache.keys]
    out, cache = model.partial_prefill(pre.cache, seq.slice_from(3))
    assert out.activations.shape[0] == 4
    assert cache.cached_length == 14 and all(k.shape[0] == 14 for k in cache.values)
    assert all(torch.equal(b, k[:10]) for b, k in zip(before, cache.keys))
    full = model.prefill(seq)
    assert (out.activations - full.final.activations[10:]).abs().max() <= 1e-5


def test_partial_prefill_errors(model, tiny_model):
    seq = random_sequence(np.random.default_rng(0), TINY.hidden_dim, response_len=2)
    cache = tiny_model.prefill(seq).cache
    suffix = SegmentedSequence(seq.segments[-1:], seq.positions[-2:])
    with pytest.raises(ValueError):
        model.partial_prefill(cache, suffix)
    with pytest.raises(ValueError):
        tiny_model.partial_prefill(cache, SegmentedSequence(seq.segments[-1:]))


def test_cache_truncate(tiny_model):
    seq = random_sequence(np.random.default_rng(0), TINY.hidden_dim)
    cache = tiny_model.prefill(seq).cache
    short = cache.truncate(3)
    assert short.cached_length == 3 and short.last_hidden is None
    with pytest.raises(ValueError):
        cache.truncate(0)
    with pytest.raises(ValueError):
        cache.truncate(len(seq) + 1)


# -- decoding -------------------------------------------------------------------------


class FixedLogits(Backbone):
    """Backbone whose LM head always emits the same logits, then EOS."""

    def __init__(self, cfg, logits):
        super().__init__(cfg, seed=0, eos_id=1)
        self.fixed = torch.as_tensor(logits, dtype=DTYPE)
        self.calls = 0

    def logits(self, hidden):
        self.calls += 1
        if self.calls > 1:
            out = torch.zeros_like(self.fixed)
            out[self.eos_id] = 1.0
            return out
        return self.fixed


def _primed(m):
    seq = assign_positions(SegmentedSequence((text_segment("user", [2, 3]),)))
    return m.prefill(seq).cache


def test_greedy_unique_max():
    logits = torch.zeros(32)
    logits[7] = 2.0
    m = FixedLogits(TINY, logits)
    assert m.decode_greedy(_primed(m), 4)[0] == [7]


def test_greedy_tie_goes_to_lowest_id():
    logits = torch.zeros(32)
    logits[3] = logits[9] = 5.0
    m = FixedLogits(TINY, logits)
    assert m.decode_greedy(_primed(m), 4)[0] == [3]


def test_greedy_errors(tiny_model):
    cache = _primed(tiny_model)
    with pytest.raises(ValueError):
        tiny_model.decode_greedy(cache, 0)
    with pytest.raises(ValueError):
        tiny_model.decode_greedy(cache.truncate(1), 1)


def test_greedy_stops_at_max_steps(tiny_model):
    tokens, cache = tiny_model.decode_greedy(_primed(tiny_model), 3)
    assert len(tokens) <= 3
    assert cache.cached_length == 2 + len(tokens)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_teacher_forced_replay_then_greedy(k):
    m = Backbone(TINY, seed=23, eos_id=31)
    cache = _primed(m)
    free, _ = m.decode_greedy(cache, 6)
    assert len(free) > k
    _, forced = m.extend_text(cache, free[:k])
    rest, _ = m.decode_greedy(forced, 6 - k)
    assert free[:k] + rest == free


def test_position_triples_are_non_negative_after_decode(tiny_model):
    tokens, cache = tiny_model.decode_greedy(_primed(tiny_model), 3)
    assert (cache.positions >= 0).all()
    assert math.isfinite(cache.next_position)
