# src/models.py

import math
from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.errors import ConfigError


class ModalityKind(str, Enum):
    TEXT = "text"
    IMAGE = "image"


class MissingType(str, Enum):
    """Which modality a sample lacks; indexes the prompt bank."""
    COMPLETE = "complete"
    MISSING_TEXT = "missing_text"
    MISSING_IMAGE = "missing_image"

    def present(self, stream: ModalityKind) -> bool:
        if stream is ModalityKind.TEXT:
            return self is not MissingType.MISSING_TEXT
        return self is not MissingType.MISSING_IMAGE


class MissingCase(str, Enum):
    """How a split is corrupted: both modalities can go missing, or only one."""
    BOTH = "both"
    TEXT_MISSING = "text_missing"
    IMAGE_MISSING = "image_missing"


class Variant(str, Enum):
    BASELINE = "baseline"
    MMP_INDEPENDENT = "mmp_independent"
    DCP = "dcp"
    DCP_A = "dcp_a"  # correlated prompts only
    DCP_B = "dcp_b"  # correlated + dynamic prompts


class GeneratorKind(str, Enum):
    NONE = "none"
    FC = "fc"
    MLP = "mlp"


class ModalMode(str, Enum):
    UNI = "uni"
    BI = "bi"


class DynamicOp(str, Enum):
    ATTENTION = "attention"
    MAX = "max"
    MIN = "min"
    AVG = "avg"


class CommonProjector(str, Enum):
    FC = "fc"
    MLP = "mlp"


class LabelMode(str, Enum):
    SINGLE = "single"
    MULTILABEL = "multilabel"


class LossMode(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    BCE_MULTILABEL = "bce_multilabel"


class MissingSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    case: MissingCase = Field(MissingCase.BOTH, description="Which modalities may be dropped.")
    eta: float = Field(0.7, ge=0.0, le=1.0, description="Fraction of modality-incomplete samples.")


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_layers: int = Field(4, ge=1, description="Encoder layers per stream (N).")
    d_model: int = Field(64, ge=1, description="Width shared by both streams.")
    n_heads: int = Field(4, ge=1, description="Attention heads in backbone layers.")
    ff_hidden: Optional[int] = Field(None, ge=1, description="MLP hidden width; defaults to 4 * d_model.")
    prompt_depth: int = Field(2, ge=1, description="Leading layers that receive generated prompts (J).")
    max_seq_len: int = Field(32, ge=1, description="Longest token/patch sequence a stream accepts.")
    vocab_size: int = Field(16384, ge=2, description="Text-stream vocabulary size.")
    patch_dim: int = Field(8, ge=1, description="Width of one image patch vector.")

    @model_validator(mode="after")
    def _check_shape(self) -> "EncoderConfig":
        if self.prompt_depth > self.n_layers:
            raise ValueError(f"prompt_depth {self.prompt_depth} exceeds n_layers {self.n_layers}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self

    @property
    def ff_width(self) -> int:
        return self.ff_hidden or 4 * self.d_model


class PromptConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    correlated_length: int = Field(12, ge=0, description="Rows of correlated prompt per stream (L_R).")
    dynamic_length: int = Field(12, ge=0, description="Rows of dynamic prompt per stream (L_D).")
    common_length: int = Field(12, ge=0, description="Rows of modal-common prompt (L_C).")
    generator: GeneratorKind = Field(GeneratorKind.MLP, description="How deep correlated prompts are produced.")
    reduction: int = Field(16, ge=1, description="Bottleneck reduction factor r of the chain generators.")
    modal_mode: ModalMode = Field(ModalMode.BI, description="Whether chain generators see both streams.")
    dynamic_op: DynamicOp = Field(DynamicOp.ATTENTION, description="Input-conditioned generator kind.")
    dynamic_reduction: int = Field(16, ge=1, description="Reduction factor of the dynamic generator's MLP.")
    common_projector: CommonProjector = Field(CommonProjector.MLP, description="Projection of the shared prompt.")
    common_reduction: int = Field(16, ge=1, description="Reduction factor of the modal-common projectors.")
    init_std: float = Field(0.02, gt=0.0, description="Std of the normal init of every bank parameter.")

    @property
    def total_length(self) -> int:
        return self.correlated_length + self.dynamic_length + self.common_length


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_train: int = Field(2000, ge=1)
    n_val: int = Field(400, ge=0)
    n_test: int = Field(400, ge=1)
    n_classes: int = Field(4, ge=2)
    noise: float = Field(0.2, ge=0.0, lt=0.5, description="Per-token / per-patch corruption probability.")
    label_mode: LabelMode = LabelMode.SINGLE
    vocab_size: int = Field(16384, ge=2)
    text_len: int = Field(8, ge=1)
    n_patches: int = Field(6, ge=1)
    patch_dim: int = Field(8, ge=1)
    image_jitter: float = Field(0.3, ge=0.0, description="Std of the Gaussian noise added to every image patch.")
    text_synonyms: int = Field(1, ge=1, description="Interchangeable tokens per (position, code).")
    image_modes: int = Field(1, ge=1, description="Prototype modes per (code, patch).")

    @model_validator(mode="after")
    def _check_codebook(self) -> "DatasetConfig":
        if self.label_mode is LabelMode.MULTILABEL:
            if self.text_len < self.n_classes or self.n_patches < self.n_classes:
                raise ValueError("multilabel mode needs text_len and n_patches >= n_classes")
        n_codes = 2 if self.label_mode is LabelMode.MULTILABEL else self.n_classes
        if n_codes * self.text_synonyms > self.vocab_size:
            raise ValueError(f"vocab_size {self.vocab_size} cannot hold {n_codes} x {self.text_synonyms} tokens per position")
        return self

    @property
    def n(self) -> int:
        return self.n_train + self.n_val + self.n_test

    @property
    def fractions(self) -> Tuple[float, float, float]:
        total = self.n
        return (self.n_train / total, self.n_val / total, self.n_test / total)


class TrainingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(15, ge=0)
    batch_size: int = Field(4, ge=1)
    lr_max: float = Field(1e-2, gt=0.0)
    weight_decay: float = Field(2e-2, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    warmup_fraction: float = Field(0.1, ge=0.0, le=1.0)
    reassign_missing_each_epoch: bool = Field(
        False, description="Keep training data complete and redraw the missing composition every epoch."
    )
    eval_chunk: int = Field(256, ge=1, description="Samples per evaluation forward pass.")
    eval_train_each_epoch: bool = Field(
        True, description="Evaluate the training slice after every epoch; otherwise only before training and at the end."
    )


class ModelSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    d_model: int = Field(64, ge=1)
    n_layers: int = Field(4, ge=1)
    n_heads: int = Field(4, ge=1)
    ff_hidden: Optional[int] = Field(None, ge=1)
    prompt_depth: int = Field(2, ge=1)
    max_seq_len: int = Field(32, ge=1)
    backbone_seed: int = Field(0, ge=0, description="Seed of the frozen backbone weights.")
    weights: Optional[str] = Field(None, description="Weight archive directory to load the backbone from.")

    @model_validator(mode="after")
    def _check_shape(self) -> "ModelSection":
        if self.prompt_depth > self.n_layers:
            raise ValueError(f"prompt_depth {self.prompt_depth} exceeds n_layers {self.n_layers}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self


class ExperimentSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "dcp-lab"
    variants: List[Variant] = Field(default_factory=lambda: [Variant.DCP])
    seeds: List[int] = Field(default_factory=lambda: [0])

    @field_validator("variants", "seeds")
    @classmethod
    def _not_empty(cls, value: list) -> list:
        if not value:
            raise ValueError("must list at least one entry")
        return value


class MissingSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    case: MissingCase = MissingCase.BOTH
    etas: List[float] = Field(default_factory=lambda: [0.7])
    eval_cases: List[MissingCase] = Field(default_factory=list, description="Extra evaluation cases at the training eta.")

    @field_validator("etas")
    @classmethod
    def _check_etas(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("must list at least one missing rate")
        for eta in value:
            if not 0.0 <= eta <= 1.0 or math.isnan(eta):
                raise ValueError(f"missing rate {eta} is outside [0, 1]")
        return value


class OutputSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    directory: str = "runs"


class ExperimentConfig(BaseModel):
    """Everything one `run` needs, one sub-model per config-file section."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelSection = Field(default_factory=ModelSection)
    prompts: PromptConfig = Field(default_factory=PromptConfig)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    missing: MissingSection = Field(default_factory=MissingSection)
    data: DatasetConfig = Field(default_factory=DatasetConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def _check_lengths(self) -> "ExperimentConfig":
        longest = max(self.data.text_len, self.data.n_patches)
        if longest > self.model.max_seq_len:
            raise ValueError(f"data sequences of length {longest} exceed model.max_seq_len {self.model.max_seq_len}")
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            n_layers=self.model.n_layers,
            d_model=self.model.d_model,
            n_heads=self.model.n_heads,
            ff_hidden=self.model.ff_hidden,
            prompt_depth=self.model.prompt_depth,
            max_seq_len=self.model.max_seq_len,
            vocab_size=self.data.vocab_size,
            patch_dim=self.data.patch_dim,
        )

    @property
    def loss_mode(self) -> LossMode:
        if self.data.label_mode is LabelMode.MULTILABEL:
            return LossMode.BCE_MULTILABEL
        return LossMode.CROSS_ENTROPY


def prompts_for_variant(variant: Variant, prompts: PromptConfig) -> PromptConfig:
    """
    Derives the prompt settings a variant runs with. Every prompted variant keeps
    the configured total length; disabled families hand their rows to the
    correlated family.
    """
    total = prompts.total_length
    if variant is Variant.BASELINE:
        resolved = prompts.model_copy(update={"correlated_length": 0, "dynamic_length": 0, "common_length": 0})
    elif variant is Variant.MMP_INDEPENDENT:
        resolved = prompts.model_copy(update={
            "correlated_length": total, "dynamic_length": 0, "common_length": 0,
            "generator": GeneratorKind.NONE,
        })
    elif variant is Variant.DCP_A:
        resolved = prompts.model_copy(update={"correlated_length": total, "dynamic_length": 0, "common_length": 0})
    elif variant is Variant.DCP_B:
        resolved = prompts.model_copy(update={
            "correlated_length": prompts.correlated_length + prompts.common_length, "common_length": 0,
        })
    else:
        resolved = prompts
    check_variant(variant, resolved)
    return resolved


def check_variant(variant: Variant, prompts: PromptConfig) -> None:
    if variant is Variant.BASELINE and prompts.total_length != 0:
        raise ConfigError("baseline variant must have all prompt lengths 0")
    if variant is Variant.MMP_INDEPENDENT and prompts.generator is not GeneratorKind.NONE:
        raise ConfigError("mmp_independent variant must use generator = none")
