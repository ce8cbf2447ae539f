"""
Downstream Service
Fine-tuning on labelled clips with K concatenated views, clip-level evaluation by
probability averaging, and hyperparameter ablation grids
"""
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml
from torch.utils.data import DataLoader, Dataset

from app.config import (
    FinetuneConfig,
    RunConfig,
    ViewConfig,
    apply_overrides,
    build_run_config,
    config_hash,
    dump_run_config,
    finetune_window_length,
    get_settings,
    run_config_to_dict,
)
from app.exceptions import CheckpointError, ConfigurationError, DatasetError, VDIMError
from app.models import ClassifierInput, DatasetSplit, EvalReport, VideoClip, VideoPrediction
from app.services.encoder import EncoderSpec, VideoEncoder, build_encoder, encoder_spec_from_config
from app.services.infomax import ContrastiveHeads, build_heads
from app.services.pretrain import (
    CHECKPOINT_DIR,
    TrainState,
    checkpoint_path,
    derive_seed,
    get_pretrain_service,
    load_checkpoint,
    restore_module,
    save_checkpoint,
    seed_everything,
)
from app.services.video_io import pad_to_length, sample_window, window_starts
from app.services.view_generator import ViewGeneratorService
from app.utils.metrics import MetricsWriter
from app.utils.plotting import render_heatmap

logger = logging.getLogger(__name__)

GLOBAL_LAYER = 8
FINETUNE_METRICS_FILE = "finetune_metrics.jsonl"

# short names accepted on the ablation command line
AXIS_ALIASES = {
    "lr": "finetune.initial_lr",
    "decay": "finetune.decay_factor",
    "decay_every": "finetune.decay_every",
    "K": "finetune.views",
    "views": "finetune.views",
    "downsample": "finetune.downsample",
    "steps": "finetune.steps",
}
PRETRAIN_SECTIONS = ("pretrain.", "view.", "encoder.", "dataset.")


def step_decay_lr(step: int, cfg: FinetuneConfig) -> float:
    """initial_lr * decay_factor ** floor(step / decay_every)"""
    return cfg.initial_lr * cfg.decay_factor ** (step // cfg.decay_every)


def finetune_view_config(run: RunConfig) -> ViewConfig:
    return run.view.model_copy(update={"color_mode": run.finetune.color_mode})


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class DownstreamModel(nn.Module):
    """
    Encoder, global head and a one-hidden-layer classifier over K concatenated
    per-view feature vectors.
    """

    def __init__(self, encoder: VideoEncoder, heads: Optional[ContrastiveHeads], class_count: int,
                 cfg: FinetuneConfig):
        super().__init__()
        if GLOBAL_LAYER not in encoder.tap_layers:
            raise ConfigurationError(f"downstream features need tap {GLOBAL_LAYER} (taps {encoder.tap_layers})")
        if cfg.classifier_input is ClassifierInput.PROJECTED and (heads is None or GLOBAL_LAYER not in heads.layers):
            raise ConfigurationError(f"projected classifier input needs a contrastive head for layer {GLOBAL_LAYER}")
        self.encoder = encoder
        self.heads = heads
        self.views = cfg.views
        self.classifier_input = cfg.classifier_input
        self.freeze_encoder = cfg.freeze_encoder
        self.freeze_batch_norm = cfg.freeze_batch_norm
        width = heads.out_dim if cfg.classifier_input is ClassifierInput.PROJECTED else encoder.spec.channels_at(GLOBAL_LAYER)
        self.feature_dim = cfg.views * width
        self.classifier = nn.Sequential(
            nn.Linear(self.feature_dim, cfg.hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.hidden, class_count),
        )
        if cfg.freeze_encoder:
            for parameter in self.backbone_parameters():
                parameter.requires_grad_(False)

    @property
    def class_count(self) -> int:
        return self.classifier[-1].out_features

    def backbone_parameters(self) -> List[nn.Parameter]:
        parameters = list(self.encoder.parameters())
        if self.heads is not None:
            parameters += list(self.heads.parameters())
        return parameters

    def train(self, mode: bool = True) -> "DownstreamModel":
        super().train(mode)
        if mode and self.freeze_encoder:
            self.encoder.eval()
            if self.heads is not None:
                self.heads.eval()
        elif mode and self.freeze_batch_norm:
            for module in self.modules():
                if isinstance(module, nn.modules.batchnorm._BatchNorm):
                    module.eval()
        return self

    def features(self, views: torch.Tensor) -> torch.Tensor:
        """(B, K, T, H, W, C) views -> (B, K * D) concatenated global features"""
        if views.shape[1] != self.views:
            raise ValueError(f"model expects {self.views} views per clip, got {views.shape[1]}")
        return encode_views(self.encoder, self.heads, views, self.classifier_input)

    def forward(self, views: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(views))


def encode_views(encoder: VideoEncoder, heads: Optional[ContrastiveHeads], views: torch.Tensor,
                 classifier_input: ClassifierInput = ClassifierInput.PROJECTED) -> torch.Tensor:
    """(B, K, T, H, W, C) views -> (B, K * D) global features, projected or raw"""
    batch = views.shape[0]
    parameter = next(encoder.parameters())
    x = views.flatten(0, 1).permute(0, 4, 1, 2, 3).to(dtype=parameter.dtype, device=parameter.device)
    pyramid = encoder(x.contiguous())
    if classifier_input is ClassifierInput.PROJECTED:
        grid = heads[GLOBAL_LAYER](pyramid[GLOBAL_LAYER])
    else:
        grid = pyramid[GLOBAL_LAYER]
    return grid.flatten(start_dim=1).reshape(batch, -1)


def extract_downstream_features(
    encoder: VideoEncoder,
    heads: Optional[ContrastiveHeads],
    clip: VideoClip,
    views: int,
    view_cfg: ViewConfig,
    downsample: int = 1,
    classifier_input: ClassifierInput = ClassifierInput.PROJECTED,
    rng: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    K views at offsets 0, L*d, 2*L*d, ... encoded and projected through the global
    head, concatenated into one (K * D,) vector. Short clips are filled with their last frame.
    """
    if GLOBAL_LAYER not in encoder.tap_layers:
        raise ConfigurationError(f"downstream features need tap {GLOBAL_LAYER} (taps {encoder.tap_layers})")
    if classifier_input is ClassifierInput.PROJECTED and (heads is None or GLOBAL_LAYER not in heads.layers):
        raise ConfigurationError(f"projected features need a contrastive head for layer {GLOBAL_LAYER}")
    length = views * view_cfg.final_length * downsample
    clip = clip.with_frames(pad_to_length(clip.frames, length))
    view_set = ViewGeneratorService(view_cfg).clip_views(clip, views, downsample, rng)
    stacked = torch.stack(view_set.views).unsqueeze(0)
    modules = [encoder] + ([heads] if heads is not None else [])
    modes = [module.training for module in modules]
    for module in modules:
        module.eval()
    try:
        with torch.no_grad():
            return encode_views(encoder, heads, stacked, classifier_input)[0]
    finally:
        for module, mode in zip(modules, modes):
            module.train(mode)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

class FinetuneBatches(Dataset):
    """Labelled K-view batches indexed by step, a pure function of (seed, step)"""

    def __init__(self, split: DatasetSplit, config: RunConfig, steps: int):
        if len(split) == 0:
            raise DatasetError(f"fine-tuning split '{split.split_name}' is empty")
        ft = config.finetune
        self.split = split
        self.steps = steps
        self.batch_size = ft.batch_size
        self.views = ft.views
        self.downsample = ft.downsample
        self.seed = ft.seed if ft.seed is not None else config.seed
        self.window_length = finetune_window_length(config.view, ft)
        self.generator = ViewGeneratorService(finetune_view_config(config))
        self.dtype = ft.precision.dtype

    def __len__(self) -> int:
        return self.steps

    def __getitem__(self, step: int) -> Tuple[torch.Tensor, torch.Tensor]:
        clips, labels = [], []
        for slot in range(self.batch_size):
            position = step * self.batch_size + slot
            epoch, offset = divmod(position, len(self.split))
            order = torch.randperm(len(self.split), generator=torch.Generator().manual_seed(derive_seed(self.seed, 1, epoch)))
            clip = self.split.decode(int(order[offset]))
            rng = torch.Generator().manual_seed(derive_seed(self.seed, 1, step, slot))
            window = sample_window(clip, self.window_length, rng)
            view_set = self.generator.clip_views(window, self.views, self.downsample, rng)
            clips.append(torch.stack(view_set.views))
            labels.append(clip.label)
        return torch.stack(clips).to(self.dtype), torch.tensor(labels, dtype=torch.long)


# ---------------------------------------------------------------------------
# Fine-tuning and evaluation
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    model: DownstreamModel
    config: RunConfig
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    checkpoint: Optional[Path] = None

    def train_accuracy(self) -> float:
        """Mean batch accuracy over the last tenth of training"""
        if not self.history:
            return math.nan
        tail = self.history[-max(1, len(self.history) // 10):]
        return float(np.mean([record["train_acc"] for record in tail]))


def build_downstream_model(config: RunConfig, class_count: int,
                           pretrained: Optional[TrainState] = None) -> DownstreamModel:
    """Wrap a pretrained encoder and heads, or fresh ones seeded from the run seed"""
    if pretrained is not None:
        encoder, heads = pretrained.encoder, pretrained.objective.heads
    else:
        seed_everything(config.finetune.seed if config.finetune.seed is not None else config.seed)
        spec = encoder_spec_from_config(config.encoder)
        encoder = build_encoder(spec, check_shapes=False)
        heads = build_heads(spec.channels_at, [GLOBAL_LAYER], config.encoder)
    model = DownstreamModel(encoder, heads, class_count, config.finetune)
    return model.to(dtype=config.finetune.precision.dtype)


def load_pretrained(path: Path, config: RunConfig) -> TrainState:
    """Encoder and heads from a pretrain checkpoint, under the current run's config"""
    spec = encoder_spec_from_config(config.encoder)
    payload = load_checkpoint(path, spec)
    if payload["kind"] != "pretrain":
        raise CheckpointError(f"expected a pretrain checkpoint, got '{payload['kind']}'", path=str(path))
    service = get_pretrain_service(config)
    state = service.build_state()
    restore_module(state.encoder, payload["state"], "encoder", path)
    restore_module(state.objective.heads, payload["state"], "heads", path)
    state.step = payload["step"]
    return state


def load_downstream_model(path: Path, config: Optional[RunConfig] = None) -> Tuple[DownstreamModel, RunConfig, Dict]:
    """Rebuild a fine-tuned model; its run config is taken from the checkpoint unless given"""
    payload = load_checkpoint(path)
    if payload["kind"] != "finetune":
        raise CheckpointError(f"checkpoint holds a '{payload['kind']}' model without a classifier", path=str(path))
    if config is None:
        config = build_run_config(payload.get("run_config", {}))
    spec: EncoderSpec = payload["encoder_spec"]
    if spec != encoder_spec_from_config(config.encoder):
        raise CheckpointError("checkpoint encoder spec does not match the run config", path=str(path))

    encoder = VideoEncoder(spec)
    heads = None
    head_state = payload["state"].get("heads")
    if head_state:
        layers = sorted({int(key.split(".")[1]) for key in head_state})
        heads = build_heads(spec.channels_at, layers, config.encoder)
    model = DownstreamModel(encoder, heads, int(payload["class_count"]), config.finetune)
    model.to(dtype=config.finetune.precision.dtype)
    restore_module(model.encoder, payload["state"], "encoder", path)
    if heads is not None:
        restore_module(model.heads, payload["state"], "heads", path)
    restore_module(model.classifier, payload["state"], "classifier", path)
    model.eval()
    return model, config, payload


def finetune(
    train_split: DatasetSplit,
    config: RunConfig,
    pretrained: Optional[TrainState] = None,
    run_dir: Optional[Path] = None,
    eval_split: Optional[DatasetSplit] = None,
) -> FinetuneResult:
    """
    End-to-end cross-entropy training of encoder, global head and classifier with a
    step-decay learning rate. With `pretrained=None` the encoder is randomly initialized.
    """
    ft = config.finetune
    settings = get_settings()
    device = settings.resolve_device()
    run_dir = Path(run_dir) if run_dir is not None else config.resolved_output_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_run_config(config, run_dir / "resolved_config.yaml")

    for item in train_split.items:
        if not 0 <= item.label < train_split.class_count:
            raise DatasetError(f"label {item.label} outside [0, {train_split.class_count})", reference=item.reference)

    model = build_downstream_model(config, train_split.class_count, pretrained).to(device)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=ft.initial_lr)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: ft.decay_factor ** (step // ft.decay_every)
    )
    seed_everything(derive_seed(ft.seed if ft.seed is not None else config.seed, 2) % (2 ** 32),
                    settings.deterministic)

    writer = MetricsWriter(run_dir / FINETUNE_METRICS_FILE, config_hash(config), append=False)
    loader = DataLoader(FinetuneBatches(train_split, config, ft.steps), batch_size=None,
                        num_workers=settings.num_workers)
    result = FinetuneResult(model=model, config=config)
    logger.info(
        f"Fine-tuning {ft.steps} steps: K={ft.views}, batch {ft.batch_size}, "
        f"{'pretrained' if pretrained is not None else 'random-init'} encoder"
        f"{' (frozen)' if ft.freeze_encoder else ''}, {train_split.class_count} classes"
    )

    for views, labels in loader:
        model.train()
        views, labels = views.to(device), labels.to(device)
        logits = model(views)
        loss = F.cross_entropy(logits, labels)
        if not torch.isfinite(loss):
            raise VDIMError(f"non-finite fine-tuning loss at step {result.step + 1}")
        lr = optimizer.param_groups[0]["lr"]
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        scheduler.step()
        result.step += 1

        record = {
            "loss": float(loss.detach()),
            "train_acc": float((logits.argmax(dim=1) == labels).float().mean()),
            "lr": lr,
        }
        result.history.append(record)
        if result.step % ft.log_interval == 0 or result.step == ft.steps:
            writer.write(result.step, **record)
            logger.info(f"finetune step {result.step}/{ft.steps} loss {record['loss']:.4f} "
                        f"acc {record['train_acc']:.3f} lr {lr:.2e}")
        if ft.eval_interval and eval_split is not None and result.step % ft.eval_interval == 0:
            report = evaluate(model, eval_split, config, samples_per_video=1)
            writer.write(result.step, val_acc=report.video_accuracy)

    result.checkpoint = save_checkpoint(
        checkpoint_path(run_dir / CHECKPOINT_DIR, result.step),
        kind="finetune",
        step=result.step,
        spec=model.encoder.spec,
        config=config,
        modules={k: v for k, v in (("encoder", model.encoder), ("heads", model.heads),
                                   ("classifier", model.classifier)) if v is not None},
        extra={"class_count": model.class_count},
    )
    logger.info(f"✅ Fine-tuning finished: train accuracy {result.train_accuracy():.3f}")
    return result


def aggregate_predictions(probabilities: torch.Tensor) -> Tuple[torch.Tensor, int]:
    """Mean of per-window class probabilities and its argmax (lowest index wins ties)"""
    mean = probabilities.mean(dim=0)
    return mean, int(torch.argmax(mean))


def evaluation_windows(clip: VideoClip, window_length: int, samples: int) -> List[VideoClip]:
    starts = window_starts(clip.num_frames, window_length, samples)
    frames = pad_to_length(clip.frames, max(window_length, clip.num_frames))
    return [clip.with_frames(frames[start:start + window_length]) for start in starts]


def evaluate(
    model: DownstreamModel,
    split: DatasetSplit,
    config: RunConfig,
    samples_per_video: Optional[int] = None,
    checkpoint_id: str = "",
) -> EvalReport:
    """
    Evenly spaced windows per video, class probabilities averaged per video.
    Undecodable videos are reported as error items and left out of every accuracy.
    """
    if len(split) == 0:
        raise DatasetError(f"evaluation split '{split.split_name}' is empty")
    ft = config.finetune
    samples = samples_per_video or ft.samples_per_video
    view_cfg = finetune_view_config(config).for_evaluation()
    generator = ViewGeneratorService(view_cfg)
    window_length = finetune_window_length(config.view, ft)
    parameter = next(model.parameters())

    was_training = model.training
    model.eval()
    predictions: List[VideoPrediction] = []
    errors: List[Dict[str, str]] = []
    window_hits = window_total = 0
    try:
        for index, item in enumerate(split.items):
            try:
                clip = split.decode(index)
            except (DatasetError, OSError) as e:
                logger.warning(f"⚠️ Skipping undecodable video {item.reference}: {e}")
                errors.append({"reference": item.reference, "error": str(e)})
                continue
            windows = evaluation_windows(clip, window_length, samples)
            batch = torch.stack([
                torch.stack(generator.clip_views(window, ft.views, ft.downsample).views) for window in windows
            ]).to(dtype=parameter.dtype, device=parameter.device)
            with torch.no_grad():
                probabilities = F.softmax(model(batch), dim=1).double().cpu()
            mean, predicted = aggregate_predictions(probabilities)
            window_hits += int((probabilities.argmax(dim=1) == item.label).sum())
            window_total += len(windows)
            predictions.append(VideoPrediction(
                reference=item.reference,
                label=item.label,
                predicted=predicted,
                probabilities=[float(p) for p in mean],
                windows=len(windows),
            ))
    finally:
        model.train(was_training)

    per_class: Dict[int, float] = {}
    for label in sorted({p.label for p in predictions}):
        members = [p for p in predictions if p.label == label]
        per_class[label] = sum(p.predicted == p.label for p in members) / len(members)
    video_accuracy = (sum(p.predicted == p.label for p in predictions) / len(predictions)) if predictions else 0.0

    report = EvalReport(
        split_name=split.split_name,
        class_count=split.class_count,
        samples_per_video=samples,
        video_accuracy=video_accuracy,
        clip_accuracy=window_hits / window_total if window_total else 0.0,
        per_class_accuracy=per_class,
        predictions=predictions,
        error_items=errors,
        warning_count=len(errors),
        config_hash=config_hash(config),
        checkpoint_id=checkpoint_id,
    )
    logger.info(f"Evaluation on '{split.split_name}': video accuracy {report.video_accuracy:.3f} over "
                f"{len(predictions)} videos ({len(errors)} errors)")
    return report


def write_report(report: EvalReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

def parse_axes(text: str) -> Dict[str, List[Any]]:
    """'key=v1,v2;key2=v3' -> {'key': [v1, v2], 'key2': [v3]} with YAML-parsed values"""
    axes: Dict[str, List[Any]] = {}
    for chunk in filter(None, (part.strip() for part in text.split(";"))):
        if "=" not in chunk:
            raise ConfigurationError(f"ablation axis '{chunk}' must look like key=v1,v2")
        key, raw = chunk.split("=", 1)
        key = key.strip()
        values = [_axis_value(value) for value in _split_values(raw)]
        if not key or not values:
            raise ConfigurationError(f"ablation axis '{chunk}' needs a key and at least one value")
        axes[key] = values
    if not axes:
        raise ConfigurationError("ablation needs at least one axis")
    return axes


def _split_values(raw: str) -> List[str]:
    """Split on commas outside brackets, so `[5,6,8],[8]` gives two list values"""
    values, depth, current = [], 0, []
    for char in raw:
        if char in "[{":
            depth += 1
        elif char in "]}":
            depth -= 1
        if char == "," and depth == 0:
            values.append("".join(current).strip())
            current = []
        else:
            current.append(char)
    values.append("".join(current).strip())
    if depth != 0:
        raise ConfigurationError(f"ablation values '{raw}' have unbalanced brackets")
    return [value for value in values if value]


def _axis_value(text: str) -> Any:
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"ablation value '{text}' is not valid YAML: {e}") from e
    if isinstance(value, str):
        # YAML 1.1 reads 1e-3 as a string
        try:
            return float(value)
        except ValueError:
            return value
    return value


def resolve_axis(key: str) -> str:
    return AXIS_ALIASES.get(key, key)


def _axis_label(value: Any) -> Any:
    """List and mapping values become strings so table columns stay hashable"""
    if isinstance(value, (list, tuple, dict)):
        return json.dumps(value)
    return value


def ablation_grid(
    base: RunConfig,
    axes: Dict[str, Sequence[Any]],
    train_split: DatasetSplit,
    test_split: DatasetSplit,
    run_dir: Path,
    pretrained_checkpoint: Optional[Path] = None,
    runner: Optional[Callable[..., Tuple[EvalReport, float]]] = None,
) -> pd.DataFrame:
    """
    Cartesian product of axis values. Cells that change pretraining sections pretrain
    their own encoder; all others share one pretrained checkpoint. A failing cell is
    recorded with its error and the grid continues.
    """
    if not axes:
        raise ConfigurationError("ablation needs at least one axis")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    names = list(axes)
    paths = [resolve_axis(name) for name in names]
    per_cell_pretrain = any(path.startswith(PRETRAIN_SECTIONS) for path in paths)
    runner = runner or _run_cell

    shared: Optional[TrainState] = None
    if not per_cell_pretrain:
        if pretrained_checkpoint is not None:
            shared = load_pretrained(pretrained_checkpoint, base)
        else:
            shared = get_pretrain_service(base, run_dir / "pretrain").run(train_split)

    rows = []
    base_data = run_config_to_dict(base)
    for index, values in enumerate(itertools.product(*(axes[name] for name in names))):
        row: Dict[str, Any] = dict(zip(names, map(_axis_label, values)))
        cell_dir = run_dir / f"cell_{index:03d}"
        try:
            overrides = [f"--{path}={json.dumps(value)}" for path, value in zip(paths, values)]
            cell_config = build_run_config(apply_overrides(base_data, overrides))
            cell_config = cell_config.model_copy(update={"output_dir": cell_dir})
            report, train_acc = runner(cell_config, cell_dir, None if per_cell_pretrain else shared,
                                       train_split, test_split)
            row.update(test_acc=report.video_accuracy, train_acc=train_acc,
                       steps=cell_config.finetune.steps, error="")
            logger.info(f"✅ Ablation cell {index} {dict(zip(names, values))}: test acc {report.video_accuracy:.3f}")
        except Exception as e:
            logger.error(f"❌ Ablation cell {index} {dict(zip(names, values))} failed: {e}")
            row.update(test_acc=float("nan"), train_acc=float("nan"), steps=0, error=str(e))
        rows.append(row)

    table = pd.DataFrame(rows, columns=names + ["test_acc", "train_acc", "steps", "error"])
    table.to_csv(run_dir / "ablation.csv", index=False)
    render_heatmap(table, names[0], names[1] if len(names) > 1 else names[0], run_dir / "ablation_heatmap.png")
    return table


def _run_cell(config: RunConfig, cell_dir: Path, pretrained: Optional[TrainState],
              train_split: DatasetSplit, test_split: DatasetSplit) -> Tuple[EvalReport, float]:
    if pretrained is None:
        pretrained = get_pretrain_service(config, cell_dir / "pretrain").run(train_split)
    else:
        pretrained = _copy_state(pretrained, config)
    result = finetune(train_split, config, pretrained, cell_dir)
    report = evaluate(result.model, test_split, config, checkpoint_id=str(result.checkpoint or ""))
    write_report(report, cell_dir / "eval_report.json")
    return report, result.train_accuracy()


def _copy_state(state: TrainState, config: RunConfig) -> TrainState:
    """Fresh modules carrying the shared pretrained weights, so cells never train each other's encoder"""
    copy = get_pretrain_service(config).build_state()
    copy.encoder.load_state_dict(state.encoder.state_dict())
    copy.objective.heads.load_state_dict(state.objective.heads.state_dict())
    copy.step = state.step
    return copy


class DownstreamService:
    """
    Fine-tune, evaluate and ablate for one RunConfig
    """

    def __init__(self, config: RunConfig, run_dir: Optional[Path] = None):
        self.config = config
        self.run_dir = Path(run_dir) if run_dir is not None else config.resolved_output_dir()

    def finetune_and_evaluate(self, train_split: DatasetSplit, test_split: DatasetSplit,
                              checkpoint: Optional[Path] = None) -> Tuple[FinetuneResult, EvalReport]:
        pretrained = load_pretrained(checkpoint, self.config) if checkpoint is not None else None
        result = finetune(train_split, self.config, pretrained, self.run_dir, eval_split=test_split)
        report = evaluate(result.model, test_split, self.config, checkpoint_id=str(result.checkpoint or ""))
        write_report(report, self.run_dir / "eval_report.json")
        return result, report

    def evaluate_checkpoint(self, checkpoint: Path, split: DatasetSplit) -> EvalReport:
        model, config, _ = load_downstream_model(checkpoint, self.config)
        model.to(get_settings().resolve_device())
        report = evaluate(model, split, config, checkpoint_id=str(checkpoint))
        write_report(report, self.run_dir / f"eval_report_{split.split_name}.json")
        return report

    def ablate(self, axes: Dict[str, Sequence[Any]], train_split: DatasetSplit, test_split: DatasetSplit,
               checkpoint: Optional[Path] = None) -> pd.DataFrame:
        return ablation_grid(self.config, axes, train_split, test_split, self.run_dir / "ablation", checkpoint)


def get_downstream_service(config: RunConfig, run_dir: Optional[Path] = None) -> DownstreamService:
    return DownstreamService(config, run_dir)
