"""
GSM model: the four spatial experts, expert gate, gated fusion and task heads
wired together for one video at a time.
"""
import json
import logging
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import numkernel as nk
from experts import (
    EXPERT_BLOCKS, EXPERT_ORDER, ExpertOutput, ExpertTag, ModelDims,
    action_expert_forward, background_expert_forward, global_expert_forward,
    init_expert_params, mask_gtn_forward, video_tokens,
)
from fusion import FusedOutput, GateWeights, fuse, gate, init_fusion_params, uniform_gate
from losses import (
    CLASS_HEADS, DEFAULT_ALPHA, LossBreakdown, TaskTargets, frame_logits, gsb_loss,
    head_logits, init_head_params, span_pooling, task_loss, total_loss,
)
from metrics import PredictedEvent, VideoPrediction
from numkernel import ParamSet, Tensor
from synthdata import Dataset, DatasetFormatError, EventQuadruple, GeneratorConfig, SyntheticVideo
from vocabulary import Vocabulary, get_vocabulary

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
HEAD_VOCABULARIES = {"subject": "n_subjects", "event_type": "n_event_types", "object": "n_objects", "scene": "n_scenes"}


class ModelFormatError(ValueError):
    """Model or gate-trace file that cannot be read back."""


def dims_for(config: GeneratorConfig, d: int = 32, gtn_layers: int = 2) -> ModelDims:
    """Model sizes matching a generated dataset."""
    return ModelDims(
        d=d,
        d_b=config.d_b,
        d_g=config.d_g,
        n_node_classes=config.n_objects,
        gtn_layers=gtn_layers,
        n_subjects=config.n_subjects,
        n_event_types=config.n_event_types,
        n_objects=config.n_objects,
        n_scenes=config.n_scenes,
    )


def head_vocabularies(dims: ModelDims) -> Dict[str, Vocabulary]:
    return {head: get_vocabulary(head, getattr(dims, size)) for head, size in HEAD_VOCABULARIES.items()}


def targets_for(video: SyntheticVideo, dims: ModelDims) -> TaskTargets:
    vocab = head_vocabularies(dims)
    ids = {head: [] for head in vocab}
    for event in video.events:
        for head, labels in vocab.items():
            label = getattr(event.quadruple, head)
            try:
                ids[head].append(labels.index(label))
            except KeyError:
                raise DatasetFormatError(
                    f"video {video.video_id}: {head} {label!r} is outside the model's {len(labels)}-label vocabulary"
                ) from None
    return TaskTargets(
        subject_ids=ids["subject"],
        event_type_ids=ids["event_type"],
        object_ids=ids["object"],
        scene_ids=ids["scene"],
        spans=video.event_spans(),
        frame_labels=video.frame_labels,
    )


def decode_spans(probabilities: np.ndarray, threshold: float = 0.5, min_frames: int = 2) -> List[Tuple[int, int]]:
    """Maximal runs of frames at or above threshold, at least min_frames long."""
    above = np.asarray(probabilities) >= threshold
    spans, start = [], None
    for f, flag in enumerate(list(above) + [False]):
        if flag and start is None:
            start = f
        elif not flag and start is not None:
            if f - start >= min_frames:
                spans.append((start, f))
            start = None
    return spans


@dataclass
class ForwardResult:
    experts: List[ExpertOutput]
    fused: FusedOutput

    @property
    def gate(self) -> GateWeights:
        return self.fused.gate


class GSMModel:
    """
    Experts, gate, fusion and heads over one shared ParamSet.

    Disabled experts emit zero matrices and their parameters are frozen;
    with uniform_gate the gate is replaced by fixed equal weights.
    """

    def __init__(
        self,
        dims: ModelDims,
        disabled: Iterable[ExpertTag] = (),
        uniform_gate: bool = False,
        literal_degree: bool = False,
        layer_norm_eps: float = 1e-5,
        seed: int = 0,
    ):
        self.dims = dims
        self.disabled = tuple(tag for tag in EXPERT_ORDER if tag in set(disabled))
        if len(self.disabled) == len(EXPERT_ORDER):
            raise ValueError("at least one expert must stay enabled")
        self.uniform_gate = uniform_gate
        self.literal_degree = literal_degree
        self.layer_norm_eps = layer_norm_eps
        self.seed = seed

        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        init_expert_params(self.params, dims, rng)
        init_fusion_params(self.params, dims.d, rng)
        init_head_params(self.params, dims, rng)
        for tag in self.disabled:
            self.params.set_trainable(EXPERT_BLOCKS[tag], False)
        if uniform_gate:
            self.params.set_trainable("gate", False)

    # -- forward ---------------------------------------------------------

    def expert_outputs(self, video: SyntheticVideo) -> List[ExpertOutput]:
        m, d = video.n_frames, self.dims.d
        outputs = []
        for tag in EXPERT_ORDER:
            if tag in self.disabled:
                outputs.append(ExpertOutput(tag, nk.zeros((m, d))))
            elif tag == ExpertTag.AE:
                outputs.append(action_expert_forward(video.poses, video_tokens(video.features, self.params), self.params))
            elif tag == ExpertTag.ORE:
                outputs.append(mask_gtn_forward(
                    video.relations, self.params, layers=self.dims.gtn_layers, literal_degree=self.literal_degree
                ))
            elif tag == ExpertTag.BE:
                outputs.append(background_expert_forward(video.features, self.params))
            else:
                outputs.append(global_expert_forward(video.features, self.params))
        return outputs

    def forward(self, video: SyntheticVideo) -> ForwardResult:
        experts = self.expert_outputs(video)
        weights = uniform_gate() if self.uniform_gate else gate(experts, self.params["gate.W_g"])
        fused = fuse(experts, weights, self.params["norm.gamma"], self.params["norm.beta"], self.layer_norm_eps)
        return ForwardResult(experts, fused)

    def loss(self, video: SyntheticVideo, alpha: float = DEFAULT_ALPHA, objective: str = "total") -> LossBreakdown:
        """Loss of one video; run inside a Tape to differentiate it."""
        return self.loss_and_forward(video, alpha, objective)[0]

    def loss_and_forward(
        self, video: SyntheticVideo, alpha: float = DEFAULT_ALPHA, objective: str = "total"
    ) -> Tuple[LossBreakdown, ForwardResult]:
        """
        objective "total" is l_task + alpha·l_gate; "task" and "gate" isolate
        one term (alpha is then ignored).
        """
        if objective not in ("total", "task", "gate"):
            raise ValueError(f"unknown objective {objective!r}")
        result = self.forward(video)
        l_task = task_loss(result.fused, targets_for(video, self.dims), self.params, self.dims)
        l_gate = gsb_loss(result.gate)
        if objective == "task":
            return total_loss(l_task, l_gate.item(), 0.0), result
        if objective == "gate":
            return total_loss(0.0, l_gate, 1.0), result
        return total_loss(l_task, l_gate, alpha), result

    # -- inference -------------------------------------------------------

    def frame_probabilities(self, video: SyntheticVideo, result: Optional[ForwardResult] = None) -> np.ndarray:
        result = result or self.forward(video)
        return nk.sigmoid(frame_logits(result.fused, self.params).data)

    def classify_spans(self, fused: FusedOutput, spans: Sequence[Tuple[int, int]]) -> List[EventQuadruple]:
        if not spans:
            return []
        pooled = nk.matmul(Tensor(span_pooling(spans, fused.matrix.shape[0])), fused.matrix)
        vocab = head_vocabularies(self.dims)
        picks = {head: np.argmax(head_logits(pooled, self.params, head).data, axis=1) for head, _ in CLASS_HEADS}
        return [
            EventQuadruple(**{head: vocab[head].label(int(picks[head][i])) for head in vocab})
            for i in range(len(spans))
        ]

    def predict(self, video: SyntheticVideo, threshold: float = 0.5, min_event_frames: int = 2) -> VideoPrediction:
        """Thresholded frame head, span decoding and per-span quadruples."""
        result = self.forward(video)
        probabilities = self.frame_probabilities(video, result)
        spans = decode_spans(probabilities, threshold, min_event_frames)
        quadruples = self.classify_spans(result.fused, spans)
        events = [
            PredictedEvent(
                start_s=start / video.fps,
                end_s=end / video.fps,
                quadruple=quadruple,
                confidence=float(np.clip(probabilities[start:end].mean(), 0.0, 1.0)),
            )
            for (start, end), quadruple in zip(spans, quadruples)
        ]
        return VideoPrediction(
            video_id=video.video_id,
            events=events,
            frame_labels=(probabilities >= threshold).astype(int).tolist(),
            frame_scores=probabilities.tolist(),
        )

    def predict_dataset(self, dataset: Dataset, threshold: float = 0.5, min_event_frames: int = 2) -> List[VideoPrediction]:
        return [self.predict(video, threshold, min_event_frames) for video in dataset]

    def gate_profile(self, dataset: Dataset) -> Dict[str, Dict[str, float]]:
        """Mean gate weights over the events of each event type."""
        sums: Dict[str, np.ndarray] = {}
        counts: Dict[str, int] = {}
        for video in dataset:
            if not video.events:
                continue
            weights = self.forward(video).gate.as_array()
            for event in video.events:
                key = event.quadruple.event_type
                sums[key] = sums.get(key, 0.0) + weights
                counts[key] = counts.get(key, 0) + 1
        profile = {}
        for key in sorted(sums):
            mean = sums[key] / counts[key]
            profile[key] = {tag.value: float(mean[i]) for i, tag in enumerate(EXPERT_ORDER)}
            profile[key]["events"] = counts[key]
        return profile

    # -- persistence -----------------------------------------------------

    def metadata(self) -> Dict:
        return {
            "dims": asdict(self.dims),
            "disabled": [tag.value for tag in self.disabled],
            "uniform_gate": self.uniform_gate,
            "literal_degree": self.literal_degree,
            "layer_norm_eps": self.layer_norm_eps,
            "seed": self.seed,
        }

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"param/{name}": array for name, array in self.params.state_dict().items()}
        with path.open("wb") as handle:
            np.savez(
                handle,
                __format_version__=np.array(MODEL_FORMAT_VERSION),
                __meta__=np.array(json.dumps(self.metadata(), sort_keys=True)),
                **arrays,
            )
        return path

    @classmethod
    def load(cls, path: Path) -> "GSMModel":
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as archive:
                version = int(archive["__format_version__"])
                if version != MODEL_FORMAT_VERSION:
                    raise ModelFormatError(f"{path}: model file version {version}, expected {MODEL_FORMAT_VERSION}")
                meta = json.loads(str(archive["__meta__"]))
                state = {key[len("param/"):]: archive[key] for key in archive.files if key.startswith("param/")}
            model = cls(
                ModelDims(**meta["dims"]),
                disabled=[ExpertTag(tag) for tag in meta["disabled"]],
                uniform_gate=meta["uniform_gate"],
                literal_degree=meta["literal_degree"],
                layer_norm_eps=meta["layer_norm_eps"],
                seed=meta["seed"],
            )
            model.params.load_state(state)
        except ModelFormatError:
            raise
        except (ValueError, KeyError, TypeError, EOFError, zipfile.BadZipFile) as e:
            raise ModelFormatError(f"{path}: not a readable model file ({e})") from e
        return model

    def warm_start(self, path: Path) -> List[str]:
        """Copy expert parameters from a saved model; heads, gate and norm stay fresh."""
        source = GSMModel.load(path)
        state = {
            name: array for name, array in source.params.state_dict().items()
            if name.split(".", 1)[0] in EXPERT_BLOCKS.values()
        }
        loaded = self.params.load_state(state, strict=False)
        logger.info(f"warm start: {len(loaded)} expert parameters from {path}")
        return loaded
