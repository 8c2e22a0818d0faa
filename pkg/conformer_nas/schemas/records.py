"""Records emitted by search, training and evaluation runs."""

from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class RecordKind(str, Enum):
    """Discriminator written into every JSON-lines record"""
    TRIAL = "trial"
    SELECTION = "selection"
    EPOCH = "epoch"
    METRICS = "metrics"
    COMPARISON = "comparison"


class SearchLogRow(BaseModel):
    """One row of search_log.csv"""
    step: int = Field(..., description="Operation-weight step index S at which the row was produced")
    train_loss: float = Field(..., description="Training CTC loss used for the weight update")
    valid_loss: Optional[float] = Field(None, description="Validation loss of the architecture update, if one ran")
    lrate: float = Field(..., description="Noam rate applied to the operation weights")
    s_a: float = Field(..., description="Approximation-step threshold (inf during warm-up)")
    alpha_updated: bool = Field(..., description="Whether the architecture logits were updated")
    weights: Dict[str, float] = Field(default_factory=dict, description="Softmax weight per alpha.<block>.<slot>.<candidate>")

    def csv_row(self, weight_columns: List[str]) -> List[str]:
        valid = "" if self.valid_loss is None else repr(self.valid_loss)
        row = [str(self.step), repr(self.train_loss), valid, repr(self.lrate), repr(self.s_a),
               "1" if self.alpha_updated else "0"]
        return row + [repr(self.weights[column]) for column in weight_columns]


class EvalReport(BaseModel):
    split: str = Field(..., description="Split that was evaluated")
    loss: float = Field(..., description="Mean per-utterance CTC loss")
    token_error_rate: float = Field(..., description="Corpus token error rate")
    utterances: int = Field(..., description="Utterances evaluated")


class TrainingMetrics(BaseModel):
    """Summary of one retraining run"""
    kind: RecordKind = Field(RecordKind.METRICS, description="Record discriminator")
    genotype: List[List[str]] = Field(..., description="Per-block [mhsa, conv, ffn] names")
    seed: int = Field(..., description="Initialization and shuffling seed")
    parameter_count: int = Field(..., description="Trainable weights of the materialized network")
    steps: int = Field(..., description="Optimizer steps taken")
    epoch_train_losses: List[float] = Field(default_factory=list, description="Mean training loss per epoch")
    train_loss: float = Field(..., description="Final training-split loss (eval mode)")
    valid_loss: float = Field(..., description="Final validation-split loss (eval mode)")
    valid_token_error_rate: float = Field(..., description="Final validation token error rate")


class TrialRecord(BaseModel):
    """One random-search trial"""
    kind: RecordKind = Field(RecordKind.TRIAL, description="Record discriminator")
    trial: int = Field(..., description="Trial index, from 0")
    seed: int = Field(..., description="Seed derived from the root seed for this trial")
    genotype: List[List[str]] = Field(..., description="Per-block [mhsa, conv, ffn] names")
    parameter_count: int = Field(..., description="Trainable weights")
    train_loss: float = Field(..., description="Final training loss")
    valid_loss: float = Field(..., description="Final validation loss")
    valid_token_error_rate: float = Field(..., description="Final validation token error rate")


class SelectionRecord(BaseModel):
    """The trial chosen by lowest validation error rate, ties broken by loss"""
    kind: RecordKind = Field(RecordKind.SELECTION, description="Record discriminator")
    trial: int = Field(..., description="Index of the selected trial")
    genotype: List[List[str]] = Field(..., description="Selected genotype")
    valid_loss: float = Field(..., description="Validation loss of the selected trial")
    valid_token_error_rate: float = Field(..., description="Validation token error rate of the selected trial")


class EpochSnapshot(BaseModel):
    """Architecture weights at the end of a search epoch"""
    kind: RecordKind = Field(RecordKind.EPOCH, description="Record discriminator")
    epoch: int = Field(..., description="Epoch index, from 1")
    step: int = Field(..., description="Steps taken so far")
    alpha_updates: int = Field(..., description="Architecture updates so far")
    mean_train_loss: float = Field(..., description="Mean training loss over the epoch")
    weights: Dict[str, float] = Field(default_factory=dict, description="Softmax weight per alpha column")


class ScheduleReport(BaseModel):
    """One side of the gated vs one-step comparison"""
    kind: RecordKind = Field(RecordKind.COMPARISON, description="Record discriminator")
    mode: str = Field(..., description="'dss' or 'one_step'")
    genotype: List[List[str]] = Field(..., description="Derived genotype")
    alpha_updates: int = Field(..., description="Architecture updates during search")
    search_steps: int = Field(..., description="Operation-weight steps during search")
    search_train_loss: float = Field(..., description="Mean training loss of the last search epoch")
    retrain_valid_loss: float = Field(..., description="Validation loss after retraining the genotype")
    retrain_valid_token_error_rate: float = Field(..., description="Validation token error rate after retraining")
    test_token_error_rate: float = Field(..., description="Test token error rate after retraining")
