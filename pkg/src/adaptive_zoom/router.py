"""Refinement gate: a side branch over the layer-B tap that decides coarse vs. refine."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn

from .transformer import DTYPE, Backbone, HiddenStates

COARSE = "coarse"
REFINE = "refine"


class GateBranch(nn.Module):
    """R layers copied from backbone layers B+1..B+R plus a linear head on the terminal query token."""

    def __init__(self, backbone: Backbone):
        super().__init__()
        cfg = backbone.cfg
        b, r = cfg.split_depth, cfg.branch_depth
        self.split_depth = b
        self.init_source = tuple(range(b + 1, b + r + 1))
        self.layers = nn.ModuleList(copy.deepcopy(backbone.block(i)) for i in self.init_source)
        for p in self.layers.parameters():
            p.requires_grad_(True)
        # a zero head starts every query at y_pred = 0.5
        self.head_weight = nn.Parameter(torch.zeros(cfg.hidden_dim, dtype=DTYPE))
        self.head_bias = nn.Parameter(torch.zeros((), dtype=DTYPE))

    def head(self, state: torch.Tensor) -> torch.Tensor:
        return state @ self.head_weight + self.head_bias

    @torch.no_grad()
    def branch_states(self, tap: HiddenStates) -> torch.Tensor:
        x = tap.activations
        for block in self.layers:
            x = block.forward_stable(x, tap.positions)[0]
        return x

    @torch.no_grad()
    def forward(self, tap: HiddenStates, terminal_index: int) -> float:
        return gate_forward(self, tap, terminal_index)

    def logits_batch(self, x: torch.Tensor, positions: torch.Tensor, terminal: torch.Tensor) -> torch.Tensor:
        """Differentiable gate logits for an end-padded batch of taps; ``terminal`` is (b,) indices."""
        for block in self.layers:
            x = block.forward_batch(x, positions)
        return self.head(x[torch.arange(x.shape[0]), terminal])


def _check_terminal(tap: HiddenStates, terminal_index: int) -> None:
    n = tap.activations.shape[0]
    if not 0 <= terminal_index < n:
        raise IndexError(f"terminal index {terminal_index} outside 0..{n - 1}")
    if tap.segments:
        inside = any(s.start <= terminal_index < s.stop for s in tap.sequence.spans_of("user"))
        if not inside:
            raise ValueError(f"terminal index {terminal_index} is not inside a user span")


@torch.no_grad()
def gate_forward(gate: GateBranch, tap: HiddenStates, terminal_index: int) -> float:
    """Refinement probability read off the terminal user token after the gate layers."""
    _check_terminal(tap, terminal_index)
    states = gate.branch_states(tap)
    return float(torch.sigmoid(gate.head(states[terminal_index])))


@dataclass(frozen=True)
class RouteDecision:
    y_pred: float
    tau_gate: float
    branch: str

    def __post_init__(self):
        if (self.branch == REFINE) != (self.y_pred >= self.tau_gate):
            raise ValueError("branch must be refine exactly when y_pred >= tau_gate")

    @property
    def refine(self) -> bool:
        return self.branch == REFINE


def route(y_pred: float, tau_gate: float) -> RouteDecision:
    """Refine iff ``y_pred >= tau_gate`` (inclusive boundary)."""
    for name, value in (("y_pred", y_pred), ("tau_gate", tau_gate)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name}={value} outside [0, 1]")
    return RouteDecision(float(y_pred), float(tau_gate), REFINE if y_pred >= tau_gate else COARSE)
