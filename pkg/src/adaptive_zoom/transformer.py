"""Decoder-only transformer with multi-axis rotary positions and a per-layer KV cache.

Two execution paths share the same weights:

* the *inference* path (``prefill``, ``partial_prefill``, ``decode_greedy``) runs
  every row-wise product on zero-padded tiles of ``TILE`` rows and reduces
  attention over key tiles in a fixed sequential order. Each output row
  therefore goes through kernels of identical shape no matter how long the
  sequence is, which makes causal prefix invariance hold bit for bit.
* the *batched* path (``forward_batch``) is plain padded-batch attention used
  for training, where autograd speed matters more than bitwise reproducibility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .sequence import SegmentedSequence, Segment

TILE = 32
DTYPE = torch.float64


def _tile_rows(x: torch.Tensor) -> torch.Tensor:
    """Zero-pad the first axis up to a multiple of TILE and split it into tiles."""
    n = x.shape[0]
    nt = max(1, -(-n // TILE))
    out = x.new_zeros((nt * TILE,) + tuple(x.shape[1:]))
    out[:n] = x
    return out.view((nt, TILE) + tuple(x.shape[1:]))


def stable_linear(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """``x @ weight.T`` computed tile by tile with a fixed kernel shape."""
    n = x.shape[0]
    xt = _tile_rows(x)
    wt = weight.t().unsqueeze(0).expand(xt.shape[0], -1, -1)
    return torch.bmm(xt, wt).reshape(-1, weight.shape[0])[:n]


def layer_norm(x: torch.Tensor, scale: torch.Tensor, eps: float) -> torch.Tensor:
    mu = x.mean(-1, keepdim=True)
    var = (x - mu).pow(2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * scale


def stable_layer_norm(x: torch.Tensor, scale: torch.Tensor, eps: float) -> torch.Tensor:
    n = x.shape[0]
    return layer_norm(_tile_rows(x), scale, eps).reshape(-1, x.shape[-1])[:n]


class MultiAxisRotary:
    """Rotary embedding over (t, h, w) coordinates.

    ``head_dim`` is cut into three contiguous even bands: h and w each get
    ``(head_dim // 3)`` rounded down to even, t takes the rest. Within a band,
    consecutive pairs rotate at geometrically spaced frequencies.
    """

    def __init__(self, head_dim: int, base: float = 10000.0):
        band_hw = (head_dim // 3) // 2 * 2
        band_t = head_dim - 2 * band_hw
        self.bands = (band_t, band_hw, band_hw)
        freqs, axes = [], []
        for axis, band in enumerate(self.bands):
            k = torch.arange(band // 2, dtype=DTYPE)
            freqs.append(base ** (-2.0 * k / band))
            axes.append(torch.full((band // 2,), axis, dtype=torch.long))
        self.inv_freq = torch.cat(freqs)
        self.axis = torch.cat(axes)

    def angles(self, positions: torch.Tensor) -> torch.Tensor:
        """(..., 3) coordinates -> (..., head_dim / 2) rotation angles."""
        return positions[..., self.axis] * self.inv_freq

    def apply(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Rotate ``x`` of shape (..., heads, head_dim) at ``positions`` of shape (..., 3)."""
        ang = self.angles(positions).unsqueeze(-2)
        cos, sin = torch.cos(ang), torch.sin(ang)
        even, odd = x[..., 0::2], x[..., 1::2]
        out = torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1)
        return out.flatten(-2)


class Block(nn.Module):
    """Pre-norm transformer layer: LayerNorm -> causal MHA -> LayerNorm -> GELU MLP."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.head_dim
        self.eps = cfg.norm_epsilon
        self.ln1 = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.wq = nn.Parameter(torch.empty(d, d, dtype=DTYPE))
        self.wk = nn.Parameter(torch.empty(d, d, dtype=DTYPE))
        self.wv = nn.Parameter(torch.empty(d, d, dtype=DTYPE))
        self.wo = nn.Parameter(torch.empty(d, d, dtype=DTYPE))
        self.ln2 = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.w1 = nn.Parameter(torch.empty(cfg.mlp_ratio * d, d, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.empty(d, cfg.mlp_ratio * d, dtype=DTYPE))
        self.rotary = MultiAxisRotary(cfg.head_dim, cfg.rope_base)

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator, depth_scale: float) -> None:
        for w in (self.wq, self.wk, self.wv, self.w1):
            w.copy_(torch.randn(w.shape, generator=generator, dtype=DTYPE) / math.sqrt(w.shape[1]))
        for w in (self.wo, self.w2):
            w.copy_(torch.randn(w.shape, generator=generator, dtype=DTYPE) * depth_scale / math.sqrt(w.shape[1]))

    # -- inference path --------------------------------------------------

    def forward_stable(
        self,
        x: torch.Tensor,
        positions: torch.Tensor,
        past_k: torch.Tensor | None = None,
        past_v: torch.Tensor | None = None,
        record: bool = False,
    ):
        """Run ``x`` (m, d) as the next m tokens after ``past_k``/``past_v`` (P, heads, head_dim).

        Returns ``(out, k_new, v_new, attn)`` where ``attn`` is the head-stacked
        post-softmax map (heads, m, P + m) when ``record`` is set.
        """
        m = x.shape[0]
        nh, hd = self.num_heads, self.head_dim
        h = stable_layer_norm(x, self.ln1, self.eps)
        q = self.rotary.apply(stable_linear(h, self.wq).view(m, nh, hd), positions)
        k_new = self.rotary.apply(stable_linear(h, self.wk).view(m, nh, hd), positions)
        v_new = stable_linear(h, self.wv).view(m, nh, hd)
        past = 0 if past_k is None else past_k.shape[0]
        k_all = k_new if past_k is None else torch.cat([past_k, k_new], 0)
        v_all = v_new if past_v is None else torch.cat([past_v, v_new], 0)
        n_keys = past + m

        qt = _tile_rows(q).permute(2, 0, 1, 3)  # heads, nqt, T, hd
        kt = _tile_rows(k_all).permute(2, 0, 1, 3)  # heads, nkt, T, hd
        vt = _tile_rows(v_all).permute(2, 0, 1, 3)
        nqt, nkt = qt.shape[1], kt.shape[1]
        scores = torch.matmul(qt.unsqueeze(2), kt.unsqueeze(1).transpose(-1, -2)) / math.sqrt(hd)
        qi = past + torch.arange(nqt * TILE).view(nqt, 1, TILE, 1)
        kj = torch.arange(nkt * TILE).view(1, nkt, 1, TILE)
        scores = scores.masked_fill((kj > qi) | (kj >= n_keys), float("-inf"))
        peak = scores.amax(dim=(2, 4), keepdim=True)
        e = torch.exp(scores - peak)  # heads, nqt, nkt, T, T
        tile_sums = e.sum(-1)
        denom = tile_sums[:, :, 0]
        acc = torch.matmul(e[:, :, 0], vt[:, 0].unsqueeze(1))
        for t in range(1, nkt):
            denom = denom + tile_sums[:, :, t]
            acc = acc + torch.matmul(e[:, :, t], vt[:, t].unsqueeze(1))
        ctx = (acc / denom.unsqueeze(-1)).permute(1, 2, 0, 3).reshape(nqt * TILE, nh * hd)[:m]
        attn = None
        if record:
            probs = e / denom.unsqueeze(2).unsqueeze(-1)
            attn = probs.permute(0, 1, 3, 2, 4).reshape(nh, nqt * TILE, nkt * TILE)[:, :m, :n_keys]
        x = x + stable_linear(ctx, self.wo)
        h2 = stable_layer_norm(x, self.ln2, self.eps)
        x = x + stable_linear(F.gelu(stable_linear(h2, self.w1)), self.w2)
        return x, k_new, v_new, attn

    # -- batched training path --------------------------------------------

    def forward_batch(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """``x`` (b, n, d) and ``positions`` (b, n, 3), shorter rows zero-padded at the end.

        Trailing padding needs no key mask: under the causal mask a real token
        never sees a later slot.
        """
        b, n, _ = x.shape
        nh, hd = self.num_heads, self.head_dim
        h = layer_norm(x, self.ln1, self.eps)
        q = self.rotary.apply((h @ self.wq.t()).view(b, n, nh, hd), positions)
        k = self.rotary.apply((h @ self.wk.t()).view(b, n, nh, hd), positions)
        v = (h @ self.wv.t()).view(b, n, nh, hd)
        ctx = F.scaled_dot_product_attention(q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2), is_causal=True)
        x = x + ctx.transpose(1, 2).reshape(b, n, nh * hd) @ self.wo.t()
        h2 = layer_norm(x, self.ln2, self.eps)
        return x + F.gelu(h2 @ self.w1.t()) @ self.w2.t()


@dataclass
class HiddenStates:
    layer_index: int
    activations: torch.Tensor  # (n, d)
    positions: torch.Tensor  # (n, 3)
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        if self.activations.shape[0] != self.positions.shape[0]:
            raise ValueError("activations and positions disagree on token count")

    @property
    def sequence(self) -> SegmentedSequence:
        return SegmentedSequence(self.segments, self.positions)


@dataclass
class LayerKVCache:
    """Per-layer rotated keys and values for an already-processed prefix."""

    keys: list[torch.Tensor]  # each (n, heads, head_dim), rotary applied
    values: list[torch.Tensor]
    positions: torch.Tensor  # (n, 3)
    last_hidden: torch.Tensor | None = None  # final-layer state of the last cached token
    rotary_applied: bool = field(default=True, init=False)

    def __post_init__(self):
        lengths = {k.shape[0] for k in self.keys} | {v.shape[0] for v in self.values}
        if len(lengths) > 1:
            raise ValueError(f"layers disagree on cached length: {sorted(lengths)}")

    @property
    def num_layers(self) -> int:
        return len(self.keys)

    @property
    def cached_length(self) -> int:
        return self.keys[0].shape[0]

    @property
    def next_position(self) -> float:
        return float(self.positions.max()) + 1.0

    def truncate(self, length: int) -> "LayerKVCache":
        """The cache of the first ``length`` tokens (no last hidden state is known for it)."""
        if not 0 < length <= self.cached_length:
            raise ValueError(f"cannot truncate a {self.cached_length}-token cache to {length}")
        return LayerKVCache(
            [k[:length] for k in self.keys], [v[:length] for v in self.values], self.positions[:length]
        )


@dataclass
class PrefillOutput:
    tap: HiddenStates
    final: HiddenStates
    cache: LayerKVCache
    attention: torch.Tensor | None = None  # (n, n), heads averaged
    captured: dict[int, HiddenStates] = field(default_factory=dict)


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, eos_id: int = 1):
        super().__init__()
        self.cfg = cfg
        self.eos_id = eos_id
        d = cfg.hidden_dim
        self.tok_emb = nn.Parameter(torch.empty(cfg.vocab_size, d, dtype=DTYPE))
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.ln_f = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.lm_head = nn.Parameter(torch.empty(cfg.vocab_size, d, dtype=DTYPE))
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.tok_emb.copy_(torch.randn(self.tok_emb.shape, generator=gen, dtype=DTYPE) * 0.5)
            self.lm_head.copy_(torch.randn(self.lm_head.shape, generator=gen, dtype=DTYPE) / math.sqrt(d))
        for block in self.layers:
            block.reset_parameters(gen, depth_scale=1.0 / math.sqrt(2 * cfg.num_layers))

    def block(self, layer: int) -> Block:
        """The 1-based ``layer``-th transformer layer."""
        return self.layers[layer - 1]

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        h = layer_norm(hidden, self.ln_f, self.cfg.norm_epsilon)
        return h @ self.lm_head.t()

    def embed(self, seq: SegmentedSequence) -> torch.Tensor:
        return seq.embed(self.tok_emb)

    # -- inference ----------------------------------------------------------

    @torch.no_grad()
    def prefill(
        self,
        seq: SegmentedSequence,
        record_attention_layer: int | None = None,
        capture_layers: tuple[int, ...] = (),
    ) -> PrefillOutput:
        """Full forward over ``seq``, caching keys/values at every layer.

        ``capture_layers`` asks for extra states: 0 is the embedding output and
        l the output of layer l.
        """
        if len(seq) == 0:
            raise ValueError("cannot prefill an empty sequence")
        if seq.positions is None or seq.positions.shape[0] != len(seq):
            raise ValueError("positions must be assigned, one triple per token")
        pos = seq.positions
        x = self.embed(seq)
        keys, values, captured = [], [], {}
        tap = attn_map = None
        if 0 in capture_layers:
            captured[0] = HiddenStates(0, x, pos, seq.segments)
        for idx, block in enumerate(self.layers, start=1):
            record = idx == record_attention_layer
            x, k, v, attn = block.forward_stable(x, pos, record=record)
            keys.append(k)
            values.append(v)
            if record:
                attn_map = attn.mean(0)
            if idx == self.cfg.split_depth:
                tap = HiddenStates(idx, x, pos, seq.segments)
            if idx in capture_layers:
                captured[idx] = HiddenStates(idx, x, pos, seq.segments)
        if record_attention_layer is not None and attn_map is None:
            raise ValueError(f"layer {record_attention_layer} is outside 1..{self.cfg.num_layers}")
        final = HiddenStates(self.cfg.num_layers, x, pos, seq.segments)
        cache = LayerKVCache(keys, values, pos, last_hidden=x[-1])
        return PrefillOutput(tap, final, cache, attn_map, captured)

    @torch.no_grad()
    def run_layers(self, states: HiddenStates, first: int, last: int) -> HiddenStates:
        """Continue a full-sequence forward from ``states`` through layers first..last."""
        x = states.activations
        for idx in range(first, last + 1):
            x = self.block(idx).forward_stable(x, states.positions)[0]
        return HiddenStates(last, x, states.positions, states.segments)

    @torch.no_grad()
    def partial_prefill(self, cache: LayerKVCache, suffix: SegmentedSequence) -> tuple[HiddenStates, LayerKVCache]:
        """Forward only ``suffix`` through every layer, attending to the cached prefix."""
        if cache.num_layers != self.cfg.num_layers:
            raise ValueError(f"cache has {cache.num_layers} layers, model has {self.cfg.num_layers}")
        if len(suffix) == 0:
            raise ValueError("partial prefill needs at least one new token")
        if suffix.positions is None:
            raise ValueError("suffix positions must be assigned")
        x = self.embed(suffix)
        keys, values = [], []
        for block, pk, pv in zip(self.layers, cache.keys, cache.values):
            x, k, v, _ = block.forward_stable(x, suffix.positions, pk, pv)
            keys.append(torch.cat([pk, k], 0))
            values.append(torch.cat([pv, v], 0))
        positions = torch.cat([cache.positions, suffix.positions], 0)
        out = HiddenStates(self.cfg.num_layers, x, suffix.positions, suffix.segments)
        return out, LayerKVCache(keys, values, positions, last_hidden=x[-1])

    def extend_text(self, cache: LayerKVCache, ids: list[int], kind: str = "response"):
        """Teacher-force text tokens after the cache at the next scalar positions."""
        p = cache.next_position
        pos = (p + torch.arange(len(ids), dtype=DTYPE))[:, None].expand(len(ids), 3).contiguous()
        seq = SegmentedSequence((Segment(kind, tuple(ids)),), pos)
        return self.partial_prefill(cache, seq)

    @torch.no_grad()
    def decode_greedy(self, cache: LayerKVCache, max_steps: int) -> tuple[list[int], LayerKVCache]:
        """Greedy argmax decoding; ties go to the lowest token id."""
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if cache.last_hidden is None:
            raise ValueError("cache carries no final hidden state to decode from")
        out: list[int] = []
        for _ in range(max_steps):
            token = int(torch.argmax(self.logits(cache.last_hidden)))
            if token == self.eos_id:
                break
            out.append(token)
            _, cache = self.extend_text(cache, [token])
        return out, cache

    # -- training -----------------------------------------------------------

    def forward_batch(self, x: torch.Tensor, positions: torch.Tensor, stop_layer: int | None = None) -> torch.Tensor:
        """Hidden states after ``stop_layer`` (default L) for an end-padded batch."""
        stop = stop_layer or self.cfg.num_layers
        for block in self.layers[:stop]:
            x = block.forward_batch(x, positions)
        return x
