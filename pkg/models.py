import math
from enum import Enum
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator

from errors import InvalidParamsError


class Criterion(str, Enum):
    GINI = "gini"
    ENTROPY = "entropy"


class TreeParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    d_max: int = Field(10, ge=0, description="Maximum depth")
    d_rmax: int = Field(0, ge=0, description="Number of top layers built from random nodes")
    k: int = Field(5, ge=1, description="Valid thresholds sampled per attribute at greedy nodes")
    p_tilde: Optional[int] = Field(None, ge=1, description="Attributes per greedy split; None means floor(sqrt(p))")
    criterion: Criterion = Field(Criterion.GINI, description="Split criterion")
    min_support: int = Field(2, ge=2, description="Minimum instances required to split")

    @model_validator(mode="after")
    def _check_depths(self) -> "TreeParams":
        if self.d_rmax > self.d_max:
            raise ValueError(f"d_rmax ({self.d_rmax}) must not exceed d_max ({self.d_max})")
        return self

    def resolve_p_tilde(self, p: int) -> int:
        """Attributes sampled per greedy node for a dataset with p attributes."""
        value = self.p_tilde if self.p_tilde is not None else max(1, math.isqrt(p))
        if not 1 <= value <= p:
            raise InvalidParamsError(f"p_tilde={value} must lie in [1, {p}]")
        return value


class ForestParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    tree: TreeParams = Field(default_factory=TreeParams)
    n_trees: int = Field(10, ge=1, description="Number of trees (T)")
    seed: int = Field(0, ge=0, description="Forest seed; per-tree streams are spawned from it")


class AdversaryKind(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["random", "worst_of_n"] = "random"
    sample_size: int = Field(1000, ge=1, description="Candidates scored per victim (worst_of_n)")

    @classmethod
    def random(cls) -> "AdversaryKind":
        return cls(kind="random")

    @classmethod
    def worst_of(cls, sample_size: int = 1000) -> "AdversaryKind":
        return cls(kind="worst_of_n", sample_size=sample_size)

    @property
    def label(self) -> str:
        return "random" if self.kind == "random" else f"worst{self.sample_size}"


class BenchBudget(BaseModel):
    max_deletions: Optional[int] = Field(None, ge=0)
    max_seconds: Optional[float] = Field(None, ge=0)


class RetrainEvent(BaseModel):
    depth: int
    n_instances: int = Field(..., description="Instances gathered for the rebuilt subtree")
    node_type: Literal["greedy", "random"]


class TreeDeletionRecord(BaseModel):
    tree: int
    retrain_events: List[RetrainEvent] = Field(default_factory=list)
    resample_events: int = 0
    wall_time: float = 0.0

    @property
    def retrain_cost(self) -> int:
        return sum(event.n_instances for event in self.retrain_events)


class DeletionReport(BaseModel):
    instance_id: int
    trees: List[TreeDeletionRecord]
    wall_time: float = 0.0

    @computed_field
    @property
    def retrain_cost(self) -> int:
        return sum(record.retrain_cost for record in self.trees)

    @property
    def resample_events(self) -> int:
        return sum(record.resample_events for record in self.trees)

    def depth_histogram(self) -> Dict[int, int]:
        histogram: Dict[int, int] = {}
        for record in self.trees:
            for event in record.retrain_events:
                histogram[event.depth] = histogram.get(event.depth, 0) + event.n_instances
        return dict(sorted(histogram.items()))


class AuditMismatch(BaseModel):
    tree: int
    path: str
    field: str
    expected: str
    actual: str


class AuditReport(BaseModel):
    n_trees: int
    nodes_checked: int
    mismatches: List[AuditMismatch] = Field(default_factory=list)

    @computed_field
    @property
    def clean(self) -> bool:
        return not self.mismatches


class MemoryReport(BaseModel):
    structure_bytes: int
    decision_stats_bytes: int
    leaf_stats_bytes: int
    total_bytes: int
    data_bytes: int = Field(0, description="Database snapshot; not part of total_bytes")
    n_nodes: int = 0
    n_greedy: int = 0
    n_random: int = 0
    n_leaves: int = 0


class BenchResult(BaseModel):
    adversary: str
    n_train: int
    train_seconds: float
    naive_time_per_deletion: float
    deletions_completed: int
    per_deletion_times: List[float] = Field(default_factory=list)
    per_deletion_ids: List[int] = Field(default_factory=list)
    per_deletion_costs: List[int] = Field(default_factory=list)
    per_deletion_histograms: List[Dict[int, int]] = Field(default_factory=list)
    retrain_depth_histogram: Dict[int, int] = Field(default_factory=dict)
    metric: Optional[str] = None
    metric_before: Optional[float] = None
    metric_after: Optional[float] = None

    @computed_field
    @property
    def speedup(self) -> int:
        return self.deletions_completed


class TrainSummary(BaseModel):
    n: int
    p: int
    training_seconds: float
    params: ForestParams
    memory: MemoryReport


class GridScore(BaseModel):
    n_trees: int
    d_max: int
    k: int
    score: float


class TuneResult(BaseModel):
    metric: str
    n_trees: int
    d_max: int
    k: int
    greedy_score: float
    grid: List[GridScore]
    d_rmax: Dict[str, int] = Field(..., description="Selected d_rmax per tolerance")
