"""Per-case difficulty scoring and the fixed resource envelope.

Difficulty blends the retrieval similarity with capped size statistics:

    d = clamp01( w_s*(1 - s*)/2 + w_v*min(|V|/V_max, 1)
                 + w_e*min(|E|/E_max, 1) + w_d*min(max_deg/D_max, 1) )

The envelope maps d affinely onto 4..20 iterations and 1024..4096 tokens
per call; it is computed once per case, before the first agent call, and
enforced on every call thereafter.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import BadCalibration

ITER_FLOOR, ITER_CEIL = 4, 20
TOK_FLOOR, TOK_CEIL = 1024, 4096


@dataclass(frozen=True)
class DifficultyInputs:
    s_star: float
    n_nodes: int
    n_edges: int
    max_degree: int

    def __post_init__(self):
        if not -1.0 <= self.s_star <= 1.0:
            raise ValueError(f"s_star must lie in [-1, 1], got {self.s_star}")
        if self.n_nodes < 1 or self.n_edges < 0:
            raise ValueError("graph sizes out of range")
        if self.max_degree > max(self.n_nodes - 1, 0):
            raise ValueError("max_degree exceeds n_nodes - 1 for a simple graph")


@dataclass(frozen=True)
class Calibration:
    w_s: float = 0.5
    w_v: float = 0.2
    w_e: float = 0.2
    w_d: float = 0.1
    v_max: float = 32.0
    e_max: float = 64.0
    d_max: float = 8.0

    def validate(self) -> None:
        weights = (self.w_s, self.w_v, self.w_e, self.w_d)
        if any(w < 0 for w in weights):
            raise BadCalibration("weights must be non-negative")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise BadCalibration(f"weights must sum to 1, got {sum(weights)}")
        if min(self.v_max, self.e_max, self.d_max) <= 0:
            raise BadCalibration("caps must be positive")


@dataclass(frozen=True)
class BudgetEnvelope:
    token_cap_per_call: int
    max_iterations: int
    difficulty: float


def difficulty(inputs: DifficultyInputs, calib: Calibration = Calibration()) -> float:
    """Scalar difficulty in [0, 1]; larger means harder."""
    calib.validate()
    sim_term = (1.0 - inputs.s_star) / 2.0
    raw = (
        calib.w_s * sim_term
        + calib.w_v * min(inputs.n_nodes / calib.v_max, 1.0)
        + calib.w_e * min(inputs.n_edges / calib.e_max, 1.0)
        + calib.w_d * min(inputs.max_degree / calib.d_max, 1.0)
    )
    return min(max(raw, 0.0), 1.0)


def envelope(d_q: float) -> BudgetEnvelope:
    """Affine budget map; half-integer boundaries round up."""
    if not 0.0 <= d_q <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {d_q}")
    iters = int(ITER_FLOOR + (ITER_CEIL - ITER_FLOOR) * d_q + 0.5)
    tokens = int(TOK_FLOOR + (TOK_CEIL - TOK_FLOOR) * d_q + 0.5)
    return BudgetEnvelope(token_cap_per_call=tokens, max_iterations=iters, difficulty=d_q)
