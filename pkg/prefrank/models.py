"""Pydantic models for reports and statistics produced by prefrank."""

from typing import Optional

from pydantic import BaseModel, Field, model_validator


class CorpusStats(BaseModel):
    """Dataset statistics in the layout of a corpus summary table."""

    users: int = Field(..., ge=0, description="Number of users (m)")
    items: int = Field(..., ge=0, description="Number of items (n)")
    interactions: int = Field(..., ge=0, description="Number of distinct user-item pairs")
    train: Optional[int] = Field(None, description="Training interactions, when split")
    validation: Optional[int] = Field(None, description="Validation interactions, when split")
    test: Optional[int] = Field(None, description="Test interactions, when split")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "users": 29858,
                    "items": 49081,
                    "interactions": 1027370,
                    "train": None,
                    "validation": None,
                    "test": None
                }
            ]
        }
    }

    @property
    def density(self) -> float:
        """Fraction of the user-item matrix that is observed."""
        if self.users == 0 or self.items == 0:
            return 0.0
        return self.interactions / (self.users * self.items)

    def summary_lines(self) -> list[str]:
        lines = [
            f"Users         {self.users}",
            f"Items         {self.items}",
            f"Interactions  {self.interactions}",
            f"Density       {self.density * 100:.3f}%",
        ]
        if self.train is not None:
            lines.append(f"Train         {self.train}")
            lines.append(f"Validation    {self.validation}")
            lines.append(f"Test          {self.test}")
        return lines


class UserMetrics(BaseModel):
    """Ranking quality for one evaluated user."""

    user: int = Field(..., ge=0, description="Dense user id")
    recall: float = Field(..., ge=0.0, le=1.0)
    ndcg: float = Field(..., ge=0.0, le=1.0)


class MetricsReport(BaseModel):
    """Recall@N and NDCG@N averaged over users with a non-empty target set."""

    n: int = Field(20, ge=1, description="Ranking cutoff")
    split: str = Field("test", description="Which held-out part was scored")
    recall_at_n: float = Field(..., ge=0.0, le=1.0)
    ndcg_at_n: float = Field(..., ge=0.0, le=1.0)
    num_users: int = Field(..., ge=0, description="Users that contributed to the means")
    per_user: Optional[list[UserMetrics]] = Field(None, description="Per-user breakdown")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "n": 20,
                    "split": "test",
                    "recall_at_n": 0.1664,
                    "ndcg_at_n": 0.2357,
                    "num_users": 29858,
                    "per_user": None
                }
            ]
        }
    }

    @model_validator(mode="after")
    def _check_per_user(self) -> "MetricsReport":
        if self.per_user is not None and len(self.per_user) != self.num_users:
            raise ValueError(
                f"per_user has {len(self.per_user)} rows but num_users={self.num_users}"
            )
        return self

    def summary(self) -> str:
        return (
            f"{self.split}: Recall@{self.n}={self.recall_at_n:.4f} "
            f"NDCG@{self.n}={self.ndcg_at_n:.4f} over {self.num_users} users"
        )


class EpochStats(BaseModel):
    """One row of the training log."""

    epoch: int = Field(..., ge=1)
    total_loss: float = Field(..., description="Mean per-triplet total loss")
    task_losses: list[float] = Field(default_factory=list, description="Mean per-triplet loss per task")
    val_recall: Optional[float] = None
    val_ndcg: Optional[float] = None
    seconds: float = 0.0


class FitResult(BaseModel):
    """Outcome of early-stopped training."""

    best_epoch: int = Field(..., ge=0)
    best_val_recall: float
    best_val_ndcg: float
    epochs_run: int = Field(..., ge=0)
    history: list[EpochStats] = Field(default_factory=list)
