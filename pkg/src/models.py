from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class NormOrder(str, Enum):
    L2 = "l2"
    LINF = "linf"


class AttackName(str, Enum):
    STANDARD_UAP = "standard-uap"
    SGD = "sgd"
    STANDARD_UAP_RP = "standard-uap-rp"
    ROBUST_UAP = "robust-uap"


class NormSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    order: NormOrder = NormOrder.L2
    epsilon: float = Field(gt=0)


def _fmt(value: float) -> str:
    return f"{value:g}"


# Transformation models
class TransformSet(BaseModel):
    """Parameter ranges for the five semantic transformations.

    Every range is symmetric around the identity; a range of 0 disables that
    transformation.
    """

    model_config = ConfigDict(frozen=True)

    rotation_deg: float = Field(default=0.0, ge=0)
    translate_x: float = Field(default=0.0, ge=0)
    translate_y: float = Field(default=0.0, ge=0)
    scale_pct: float = Field(default=0.0, ge=0, lt=100)
    shear_pct: float = Field(default=0.0, ge=0)
    contrast_pct: float = Field(default=0.0, ge=0, lt=100)
    brightness_abs: float = Field(default=0.0, ge=0)

    def notation(self) -> str:
        """Render the set the way experiment tables label their rows."""
        parts = []
        if self.rotation_deg:
            parts.append(f"R({_fmt(self.rotation_deg)})")
        if self.translate_x or self.translate_y:
            parts.append(f"T({_fmt(self.translate_x)},{_fmt(self.translate_y)})")
        if self.shear_pct:
            parts.append(f"Sh({_fmt(self.shear_pct)})")
        if self.scale_pct:
            parts.append(f"Sc({_fmt(self.scale_pct)})")
        if self.contrast_pct or self.brightness_abs:
            parts.append(f"B({_fmt(self.contrast_pct)}, {_fmt(self.brightness_abs)})")
        return ", ".join(parts) if parts else "none"


class TransformSample(BaseModel):
    model_config = ConfigDict(frozen=True)

    theta_deg: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale_p: float = 0.0
    shear_m: float = 0.0
    contrast_alpha: float = Field(default=1.0, gt=0)
    brightness_beta: float = 0.0


class AugmentedMatrix(BaseModel):
    model_config = ConfigDict(frozen=True)

    a11: float
    a12: float
    a21: float
    a22: float
    b1: float
    b2: float

    def linear(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]], dtype=np.float64)

    def determinant(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21


# Training / attack configuration
class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=0.05, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=32, gt=0)
    seed: int = 0


class EstimatorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    psi: float = Field(default=0.1, gt=0, lt=1)
    phi: float = Field(default=0.05, gt=0, lt=1)
    gamma: float = Field(default=0.6, gt=0, lt=1)
    seed: int = 0
    enforce_norm: bool = True


class AttackConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    norm: NormSpec = NormSpec(order=NormOrder.L2, epsilon=10.0)
    gamma: float = Field(default=0.6, gt=0, lt=1)
    zeta: float = Field(default=0.95, gt=0, lt=1)
    step_size: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    learning_rate: float = Field(default=1.0, ge=0)
    batch_size: int = Field(default=32, gt=0)
    max_inner_iters: int = Field(default=40, ge=1)
    max_epochs: int = Field(default=5, ge=1)
    lambda_penalty: float = Field(default=0.0, ge=0)
    transforms_per_step: int = Field(default=8, ge=1)
    overshoot: float = Field(default=0.02, ge=0)
    seed: int = 0
    estimator: EstimatorConfig = EstimatorConfig()


# Attack trace models
class EpochRecord(BaseModel):
    epoch: int
    batches: int
    metric: str
    estimate: float
    seconds: float
    # True when the loop condition as printed ("until estimate < threshold")
    # would also have stopped here.
    printed_until_met: bool


class InnerLoopRecord(BaseModel):
    epoch: int
    batch: int
    entry_estimate: float
    exit_estimate: float
    iterations: int
    cap_hit: bool


class AttackTrace(BaseModel):
    algorithm: str
    epochs: List[EpochRecord] = []
    inner_loops: List[InnerLoopRecord] = []
    final_norm: float = 0.0
    total_seconds: float = 0.0


# Evaluation models
class RobustnessReport(BaseModel):
    n_samples: int
    asr_u_clean: float = Field(ge=0, le=1)
    asr_r_by_gamma: Dict[float, float]
    avg_asr_u: float = Field(ge=0, le=1)
    norm_violations: int = Field(ge=0)
    seed: int
    asr_u_clean_clamped: Optional[float] = None


class ResultRow(BaseModel):
    attack: str
    transform_set: str
    gamma: float
    asr_r: float
    avg_asr_u: float
    asr_u_clean: float
    norm_violations: int
    runtime_seconds: float
    asr_u_clean_clamped: Optional[float] = None


class ExperimentConfig(BaseModel):
    dataset: str = "toy"
    eval_dataset: Optional[str] = None
    train_n: int = Field(default=500, ge=1)
    eval_n: int = Field(default=1000, ge=1)
    model: Optional[str] = None
    train_model: bool = False
    train: TrainConfig = TrainConfig()
    transform_sets: List[TransformSet] = [TransformSet()]
    attacks: List[AttackName] = list(AttackName)
    attack: AttackConfig = AttackConfig()
    gammas: List[float] = [0.5, 0.6, 0.7]
    output_dir: str = "results"
    seed: int = 0
    record_timing: bool = True
    report_clamped: bool = False

    @field_validator("gammas")
    @classmethod
    def gammas_in_open_interval(cls, gammas: List[float]) -> List[float]:
        if not gammas:
            raise ValueError("at least one gamma is required")
        for gamma in gammas:
            if not 0 < gamma < 1:
                raise ValueError(f"gamma {gamma} outside (0, 1)")
        return sorted(set(gammas))

    @field_validator("transform_sets")
    @classmethod
    def distinct_transform_sets(cls, sets: List[TransformSet]) -> List[TransformSet]:
        if not sets:
            raise ValueError("at least one transformation set is required")
        notations = [tset.notation() for tset in sets]
        for index, notation in enumerate(notations):
            if notation in notations[:index]:
                raise ValueError(f"duplicate transformation set {notation}")
        return sets

    @model_validator(mode="after")
    def model_source_given(self) -> "ExperimentConfig":
        if self.model is None and not self.train_model:
            raise ValueError("either a model checkpoint or train_model = true is required")
        return self


class ErrorResponse(BaseModel):
    error: str
    message: str

    def render(self) -> str:
        return f"error: {self.error}: {self.message}"
