"""Model hyperparameters and the flat ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    hidden_dim: int = 64
    num_heads: int = 4
    vocab_size: int = 32
    split_depth: int = 3
    branch_depth: int = 3
    norm_epsilon: float = 1e-5
    mlp_ratio: int = 4
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary pairing")
        if self.head_dim < 6:
            raise ValueError("head_dim must leave an even band for each of t, h, w")
        if not 1 <= self.split_depth < self.num_layers:
            raise ValueError("split_depth must satisfy 1 <= B < L")
        if self.branch_depth < 1 or self.split_depth + self.branch_depth > self.num_layers:
            raise ValueError("branch_depth must satisfy R >= 1 and B + R <= L")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


_RUN_KEYS = {
    "split_depth": int,
    "branch_depth": int,
    "tau_gate": float,
    "tau_roi": float,
    "tau_fg": float,
    "tau_bg": float,
    "sink_percentile": float,
    "mining_layer": int,  # 0 picks the most concentrated layer automatically
    "gaussian_kernel": int,
    "gaussian_sigma": float,
    "coarse_budget": int,
    "roi_budget": int,
    "gate_trajectory": _parse_int_list,
    "peak_lr": float,
    "batch_size": int,
}


@dataclass
class RunConfig:
    """Every tunable named by the pipeline, loadable from a flat text file.

    Lines look like ``tau_gate = 0.5``; ``#`` starts a comment. Unknown keys are
    rejected so typos fail loudly.
    """

    split_depth: int = 3
    branch_depth: int = 3
    tau_gate: float = 0.5
    tau_roi: float = 0.5
    tau_fg: float = 0.20
    tau_bg: float = 0.05
    sink_percentile: float = 97.5
    mining_layer: int = 0
    gaussian_kernel: int = 5
    gaussian_sigma: float = 1.0
    coarse_budget: int = 64
    roi_budget: int = 64
    gate_trajectory: tuple[int, ...] = field(default=(16, 64, 256))
    peak_lr: float = 1e-4
    batch_size: int = 16

    def __post_init__(self):
        self.gate_trajectory = tuple(int(r) for r in self.gate_trajectory)
        if not 0.0 <= self.tau_gate <= 1.0 or not 0.0 < self.tau_roi < 1.0:
            raise ValueError("tau_gate must lie in [0, 1] and tau_roi in (0, 1)")
        if not 0.0 < self.tau_bg < self.tau_fg <= 1.0:
            raise ValueError("need 0 < tau_bg < tau_fg <= 1")
        if not 50.0 < self.sink_percentile < 100.0:
            raise ValueError("sink_percentile must lie in (50, 100)")
        if self.gaussian_kernel % 2 == 0 or self.gaussian_sigma < 0:
            raise ValueError("gaussian_kernel must be odd and gaussian_sigma >= 0")
        if self.coarse_budget < 1 or self.roi_budget < 1:
            raise ValueError("budgets must be >= 1")

    def dumps(self) -> str:
        lines = []
        for name in _RUN_KEYS:
            value = getattr(self, name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _RUN_KEYS:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _RUN_KEYS[key](value)
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())
