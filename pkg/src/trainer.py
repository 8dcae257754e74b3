"""
Desk-scale training of experts, gate and heads, ablation runs and
finite-difference gradient verification.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

import numkernel as nk
from config import read_flat_config
from experts import EXPERT_ORDER, ExpertTag, ModelDims
from metrics import EvalReport, evaluate
from model import GSMModel, ModelFormatError, dims_for
from numkernel import NonFiniteError, ParamSet, Tape
from synthdata import Dataset, GeneratorConfig, SyntheticVideo, build_catalogue, generate_video

logger = logging.getLogger(__name__)

# Ablation switch name -> TrainConfig field.
ABLATIONS: Dict[str, str] = {
    "ae": "disable_ae",
    "ore": "disable_ore",
    "be": "disable_be",
    "ge": "disable_ge",
    "eg": "disable_gate",
    "sir": "disable_sir",
}

TRACE_COLUMNS = ("step", "g_ae", "g_ore", "g_be", "g_ge", "l_task", "l_gate", "total")


class TrainingDivergedError(RuntimeError):
    """A non-finite loss or gradient appeared during training."""

    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")


class UnknownBlockError(ValueError):
    """A parameter block name that the model does not have."""


class TrainConfig(BaseModel):
    d: int = Field(default=32, ge=1)
    gtn_layers: int = Field(default=2, ge=1)
    alpha: float = Field(default=0.4, ge=0)
    learning_rate: float = Field(default=1e-3, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    schedule: str = "constant"
    warmup_steps: int = Field(default=0, ge=0)
    batch_size: int = Field(default=8, ge=1)
    epochs: int = Field(default=5, ge=0)
    seed: int = 0
    log_every: int = Field(default=10, ge=1)
    layer_norm_eps: float = Field(default=1e-5, gt=0)
    literal_degree: bool = False
    threshold: float = Field(default=0.5, gt=0, lt=1)
    min_event_frames: int = Field(default=2, ge=1)
    init_from: Optional[str] = None
    disable_ae: bool = False
    disable_ore: bool = False
    disable_be: bool = False
    disable_ge: bool = False
    disable_gate: bool = False
    disable_sir: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if len(self.disabled_experts) == len(EXPERT_ORDER):
            raise ValueError("at least one expert must stay enabled")
        return self

    @property
    def disabled_experts(self) -> List[ExpertTag]:
        flags = (self.disable_ae, self.disable_ore, self.disable_be, self.disable_ge)
        return [tag for tag, off in zip(EXPERT_ORDER, flags) if off]

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.disable_sir else self.alpha

    def with_ablation(self, name: str) -> "TrainConfig":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}, expected one of {list(ABLATIONS)}")
        return self.model_validate({**self.model_dump(), ABLATIONS[name]: True})

    @classmethod
    def from_file(cls, path: Path, **overrides) -> "TrainConfig":
        """Load a flat `key = value` file; keys are the field names."""
        values = read_flat_config(path, allowed=cls.model_fields.keys())
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.model_validate(values)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    weight_decay: float = 0.01


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices; frozen parameters never move."""

    def __init__(self, params: ParamSet, config: TrainConfig, total_steps: int = 0):
        self.params = params
        self.config = config
        self.total_steps = total_steps
        self.state = OptimizerState(
            m={name: np.zeros_like(params[name].data) for name in params},
            v={name: np.zeros_like(params[name].data) for name in params},
            weight_decay=config.weight_decay,
        )

    def learning_rate(self, step: int) -> float:
        base = self.config.learning_rate
        if self.config.warmup_steps and step <= self.config.warmup_steps:
            return base * step / self.config.warmup_steps
        if self.config.schedule == "cosine" and self.total_steps > self.config.warmup_steps:
            progress = (step - self.config.warmup_steps) / (self.total_steps - self.config.warmup_steps)
            return base * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
        return base

    def step(self) -> None:
        c = self.config
        self.state.step += 1
        t = self.state.step
        lr = self.learning_rate(t)
        for name in self.params.trainable_names():
            grad = self.params.grad(name)
            m, v = self.state.m[name], self.state.v[name]
            m[...] = c.beta1 * m + (1 - c.beta1) * grad
            v[...] = c.beta2 * v + (1 - c.beta2) * grad * grad
            m_hat = m / (1 - c.beta1 ** t)
            v_hat = v / (1 - c.beta2 ** t)
            data = self.params[name].data
            if data.ndim >= 2 and self.state.weight_decay:
                data -= lr * self.state.weight_decay * data
            data -= lr * m_hat / (np.sqrt(v_hat) + c.adam_eps)


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------

@dataclass
class GateRecord:
    step: int
    gate: np.ndarray
    l_task: float
    l_gate: float
    total: float


@dataclass
class GateTrace:
    records: List[GateRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def gates(self) -> np.ndarray:
        return np.array([r.gate for r in self.records]).reshape(-1, len(EXPERT_ORDER))

    def to_text(self) -> str:
        lines = ["\t".join(TRACE_COLUMNS)]
        for r in self.records:
            cells = [str(r.step)] + [repr(float(x)) for x in r.gate] + [repr(r.l_task), repr(r.l_gate), repr(r.total)]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, path: Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> "GateTrace":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except UnicodeDecodeError as e:
            raise ModelFormatError(f"{path}: not a gate trace ({e})") from e
        if not lines or tuple(lines[0].split("\t")) != TRACE_COLUMNS:
            raise ModelFormatError(f"{path}: not a gate trace")
        records = []
        for number, line in enumerate(lines[1:], start=2):
            cells = line.split("\t")
            if len(cells) != len(TRACE_COLUMNS):
                raise ModelFormatError(f"{path}: line {number} has {len(cells)} columns, expected {len(TRACE_COLUMNS)}")
            try:
                records.append(GateRecord(
                    step=int(cells[0]),
                    gate=np.array([float(x) for x in cells[1:5]]),
                    l_task=float(cells[5]),
                    l_gate=float(cells[6]),
                    total=float(cells[7]),
                ))
            except ValueError as e:
                raise ModelFormatError(f"{path}: line {number}: {e}") from e
        return cls(records)


def local_spread(gate: np.ndarray) -> float:
    """max − min over the three local expert weights."""
    local = np.asarray(gate)[: len(EXPERT_ORDER) - 1]
    return float(local.max() - local.min())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: GSMModel
    trace: GateTrace
    task_losses: List[float]
    epoch_losses: List[float]
    steps: int


def build_model(config: TrainConfig, dims: ModelDims) -> GSMModel:
    model = GSMModel(
        dims,
        disabled=config.disabled_experts,
        uniform_gate=config.disable_gate,
        literal_degree=config.literal_degree,
        layer_norm_eps=config.layer_norm_eps,
        seed=config.seed,
    )
    if config.init_from:
        model.warm_start(Path(config.init_from))
    return model


def train(config: TrainConfig, dataset: Dataset, dims: Optional[ModelDims] = None) -> TrainResult:
    """
    Minimise l_task + alpha·l_gate with AdamW.

    Batch order comes from the seed; gradients are reduced in batch order, so
    identical configs give bitwise-identical parameters and traces.
    """
    if not len(dataset):
        raise ValueError("cannot train on an empty dataset")
    if dims is None:
        if dataset.config is None:
            raise ValueError("dataset carries no generator config; pass model dims explicitly")
        dims = dims_for(dataset.config, config.d, config.gtn_layers)
    model = build_model(config, dims)
    params = model.params
    batches_per_epoch = math.ceil(len(dataset) / config.batch_size)
    optimizer = AdamW(params, config, total_steps=batches_per_epoch * config.epochs)
    rng = np.random.default_rng(config.seed)
    alpha = config.effective_alpha

    trace = GateTrace()
    task_losses: List[float] = []
    epoch_losses: List[float] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        epoch_total = 0.0
        for b in range(batches_per_epoch):
            batch = [dataset.videos[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            step += 1
            params.zero_grad()
            gates, l_task, l_gate, total = [], 0.0, 0.0, 0.0
            for video in batch:
                try:
                    with Tape() as tape:
                        breakdown, result = model.loss_and_forward(video, alpha)
                        objective = nk.mul(breakdown.objective, 1.0 / len(batch))
                except NonFiniteError as e:
                    raise TrainingDivergedError(step, f"{e} (video {video.video_id})") from e
                if not math.isfinite(breakdown.total):
                    raise TrainingDivergedError(step, f"non-finite loss on video {video.video_id}")
                nk.backward(objective, tape, params)
                gates.append(result.gate.as_array())
                l_task += breakdown.l_task / len(batch)
                l_gate += breakdown.l_gate / len(batch)
                total += breakdown.total / len(batch)
            for name in params.trainable_names():
                if not np.all(np.isfinite(params.grad(name))):
                    raise TrainingDivergedError(step, f"non-finite gradient for {name}")
            optimizer.step()
            task_losses.append(l_task)
            epoch_total += total * len(batch)
            if (step - 1) % config.log_every == 0:
                trace.records.append(GateRecord(step, np.mean(gates, axis=0), l_task, l_gate, total))
                logger.info(f"step {step}: total={total:.4f} task={l_task:.4f} gate={l_gate:.4f}")
        epoch_losses.append(epoch_total / len(dataset))
        logger.info(f"epoch {epoch + 1}/{config.epochs}: mean loss {epoch_losses[-1]:.4f}")
    return TrainResult(model, trace, task_losses, epoch_losses, step)


def steps_to_threshold(losses: Sequence[float], threshold: float, window: int = 5) -> Optional[int]:
    """First 1-based step whose trailing mean task loss is at or below threshold."""
    if window < 1:
        raise ValueError("window must be at least 1")
    values = np.asarray(losses, dtype=np.float64)
    for step in range(1, len(values) + 1):
        if values[max(0, step - window):step].mean() <= threshold:
            return step
    return None


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

def ablate(
    config: TrainConfig,
    train_set: Dataset,
    eval_set: Dataset,
    variants: Sequence[str] = tuple(ABLATIONS),
    dims: Optional[ModelDims] = None,
) -> Dict[str, EvalReport]:
    """Train the full model and each switched-off variant on the same data and seed."""
    reports: Dict[str, EvalReport] = {}
    for name in ("full",) + tuple(variants):
        variant = config if name == "full" else config.with_ablation(name)
        logger.info(f"ablation variant {name}")
        result = train(variant, train_set, dims)
        predictions = result.model.predict_dataset(eval_set, variant.threshold, variant.min_event_frames)
        reports[name] = evaluate(predictions, eval_set)
    return reports


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

MICRO_GENERATOR = dict(
    videos=1,
    duration_min_s=0.5,
    duration_max_s=0.5,
    events_mean=1.0,
    event_min_s=0.25,
    event_max_s=0.25,
    noise=0.1,
    n_subjects=6,
    n_event_types=4,
    n_objects=6,
    n_scenes=3,
    templates_per_type=1,
    max_persons=2,
    d_b=4,
    d_g=4,
    workers=1,
)


def micro_sample(seed: int, n_frames: int = 4) -> SyntheticVideo:
    """A tiny generated video (M = n_frames) for finite-difference checks."""
    generator = GeneratorConfig(seed=seed, **MICRO_GENERATOR)
    catalogue_seed, video_seed = np.random.SeedSequence(seed).spawn(2)
    catalogue = build_catalogue(generator, np.random.default_rng(catalogue_seed))
    return generate_video(0, video_seed, generator, catalogue, n_frames=n_frames)


def micro_dims(d: int = 8, gtn_layers: int = 2) -> ModelDims:
    return dims_for(GeneratorConfig(**MICRO_GENERATOR), d=d, gtn_layers=gtn_layers)


@dataclass
class GradcheckReport:
    errors: Dict[str, float]
    tolerance: float
    seed: int
    attempts: int

    @property
    def failed(self) -> List[str]:
        return [block for block, error in self.errors.items() if not error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed


def _near_kink(tape: Tape, margin: float) -> bool:
    for entry in tape.ops("relu"):
        x = entry.inputs[0].data
        if np.any((np.abs(x) < margin) & (x != 0)):
            return True
    return False


def gradcheck(
    config: TrainConfig,
    sample: Optional[SyntheticVideo] = None,
    objective: str = "total",
    h: float = 1e-5,
    tolerance: float = 1e-4,
    kink_margin: float = 1e-4,
    max_attempts: int = 20,
    corrupt_block: Optional[str] = None,
    dims: Optional[ModelDims] = None,
) -> GradcheckReport:
    """
    Compare analytic and central-difference gradients per parameter block.

    Initialisations that put a ReLU input within kink_margin of zero are
    resampled with the next seed. corrupt_block perturbs that block's analytic
    gradient, a negative control for the check itself.
    """
    dims = dims or micro_dims(config.d, config.gtn_layers)
    alpha = config.effective_alpha
    for attempt in range(max_attempts):
        seed = config.seed + attempt
        video = sample if sample is not None else micro_sample(seed)
        model = GSMModel(
            dims,
            disabled=config.disabled_experts,
            uniform_gate=config.disable_gate,
            literal_degree=config.literal_degree,
            layer_norm_eps=config.layer_norm_eps,
            seed=seed,
        )
        params = model.params
        if corrupt_block is not None and corrupt_block not in params.blocks():
            raise UnknownBlockError(f"unknown parameter block {corrupt_block!r}; choose from {sorted(params.blocks())}")
        params.zero_grad()
        with Tape() as tape:
            breakdown = model.loss(video, alpha, objective)
        if _near_kink(tape, kink_margin):
            logger.warning(f"gradcheck seed {seed}: ReLU input near its kink, resampling")
            continue
        nk.backward(breakdown.objective, tape, params)

        def value(_: ParamSet) -> float:
            return model.loss(video, alpha, objective).total

        names = params.trainable_names()
        numeric = nk.finite_diff_grad(value, params, h=h, names=names)
        errors = {}
        for block, members in params.blocks().items():
            members = [name for name in members if name in numeric]
            if not members:
                continue
            analytic = np.concatenate([params.grad(name).ravel() for name in members])
            if block == corrupt_block:
                analytic = analytic * 1.5 + 1e-2
            estimate = np.concatenate([numeric[name].ravel() for name in members])
            errors[block] = nk.relative_error(analytic, estimate)
        report = GradcheckReport(errors, tolerance, seed, attempt + 1)
        level = logging.INFO if report.passed else logging.WARNING
        logger.log(level, f"gradcheck seed {seed}: worst block error {max(errors.values()):.2e}")
        return report
    raise RuntimeError(f"no kink-free initialisation found in {max_attempts} attempts")
