from typing import List, Optional

from pydantic import BaseModel, Field


class SearchRecord(BaseModel):
    """One child evaluation (or replay retraining) in the search log."""

    step: int = Field(..., ge=0)
    epoch: int = Field(..., ge=0)
    phase: str  # "search", "imitation" or "random"
    actions: List[int]
    raw_reward: Optional[float] = None
    kl_bonus: float = 0.0
    shaped_reward: Optional[float] = None
    baseline: float = 0.0
    buffer_event: str = "none"  # "inserted", "rejected", "replayed", "none"
    train_loss: Optional[float] = None
    failed: bool = False
    train_steps: int = 0
    wall_time: float = 0.0


class SummaryRow(BaseModel):
    epoch: int
    best: float
    mean: float
    std: float


class MetricRow(BaseModel):
    metric: str
    value: float
    n_pos: int
    n_neg: int


class TopModel(BaseModel):
    rank: int
    reward: float
    actions: List[int]
    spec: dict
