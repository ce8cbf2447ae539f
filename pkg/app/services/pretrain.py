"""
Pretraining Service
Self-supervised loop: view pairs, encoder, contrastive heads, infoNCE, Adam.
Writes the metrics stream and versioned checkpoints.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from app.config import RunConfig, config_hash, dump_run_config, get_settings, run_config_to_dict, window_length_for
from app.exceptions import CheckpointError, DatasetError, NonFiniteLossError, ScoreError
from app.models import DatasetSplit, FeaturePyramid
from app.services.encoder import EncoderSpec, VideoEncoder, build_encoder, encode, encoder_spec_from_config
from app.services.infomax import InfoMaxObjective, difference_pyramid, get_infomax_objective, infonce
from app.services.view_generator import ViewGeneratorService
from app.utils.metrics import MetricsWriter, read_metrics, write_json
from app.utils.plotting import render_loss_curve

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_DIR = "checkpoints"
METRICS_FILE = "metrics.jsonl"


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from integer parts"""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def seed_everything(seed: int, deterministic: bool = False) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False


# ---------------------------------------------------------------------------
# State and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped"""
    step: int
    encoder: VideoEncoder
    objective: InfoMaxObjective
    optimizer: torch.optim.Optimizer
    config: RunConfig
    history: List[Dict[str, float]] = field(default_factory=list)
    rng_state: Optional[torch.Tensor] = None

    @property
    def spec(self) -> EncoderSpec:
        return self.encoder.spec

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def parameters(self) -> Dict[str, torch.Tensor]:
        named = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        named.update({f"heads.{k}": v for k, v in self.objective.heads.state_dict().items()})
        return named

    def running_loss(self, window: int = 20) -> float:
        recent = [record["loss"] for record in self.history[-window:]]
        return float(np.mean(recent)) if recent else math.nan


def checkpoint_path(directory: Path, step: int) -> Path:
    return Path(directory) / f"ckpt_{step}.pt"


def save_checkpoint(path: Path, kind: str, step: int, spec: EncoderSpec, config: RunConfig,
                    modules: Dict[str, Any], extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Versioned container: named state dicts plus the encoder spec and the run config hash.
    Saved through a temporary file that is renamed into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "step": int(step),
        "encoder_spec": spec.to_dict(),
        "config_hash": config_hash(config),
        "run_config": run_config_to_dict(config),
        "state": {name: module.state_dict() for name, module in modules.items()},
    }
    payload.update(extra or {})
    partial = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, partial)
    partial.replace(path)
    logger.info(f"💾 Saved {kind} checkpoint at step {step}: {path}")
    return path


def load_checkpoint(path: Path, expected_spec: Optional[EncoderSpec] = None,
                    map_location: Any = "cpu") -> Dict[str, Any]:
    """Read and validate a checkpoint container; its encoder spec must match `expected_spec` when given"""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError("checkpoint file not found", path=str(path))
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as e:
        raise CheckpointError(f"checkpoint is unreadable or corrupted: {e}", path=str(path)) from e

    if not isinstance(payload, dict):
        raise CheckpointError("checkpoint does not contain a state container", path=str(path))
    missing = {"format_version", "kind", "step", "encoder_spec", "config_hash", "state"} - set(payload)
    if missing:
        raise CheckpointError(f"checkpoint is missing fields {sorted(missing)}", path=str(path))
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {payload['format_version']} (expected {CHECKPOINT_FORMAT_VERSION})",
            path=str(path),
        )
    try:
        payload["encoder_spec"] = EncoderSpec.from_dict(payload["encoder_spec"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint encoder spec is invalid: {e}", path=str(path)) from e
    if expected_spec is not None and payload["encoder_spec"] != expected_spec:
        raise CheckpointError(
            f"encoder spec mismatch: checkpoint has preset '{payload['encoder_spec'].preset}' with taps "
            f"{payload['encoder_spec'].tap_layers}, run expects '{expected_spec.preset}' with taps "
            f"{expected_spec.tap_layers}",
            path=str(path),
        )
    return payload


def restore_module(module: torch.nn.Module, state: Dict[str, Any], name: str, path: Path) -> None:
    try:
        module.load_state_dict(state[name])
    except (KeyError, RuntimeError, ValueError) as e:
        raise CheckpointError(f"cannot restore '{name}': {e}", path=str(path)) from e


def latest_checkpoint(directory: Path) -> Optional[Path]:
    candidates = []
    for path in Path(directory).glob("ckpt_*.pt"):
        try:
            candidates.append((int(path.stem.split("_", 1)[1]), path))
        except ValueError:
            continue
    return max(candidates)[1] if candidates else None


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

class PretrainBatches(Dataset):
    """
    Map-style dataset indexed by step. The batch for a step is a pure function of
    (seed, step): samples follow a per-epoch permutation and every sample gets its
    own generator, so workers and resumed runs see identical data.
    """

    def __init__(self, split: DatasetSplit, config: RunConfig, steps: int):
        if len(split) == 0:
            raise DatasetError(f"pretraining split '{split.split_name}' is empty")
        self.split = split
        self.config = config
        self.steps = steps
        self.batch_size = config.pretrain.batch_size
        self.seed = config.pretrain.seed if config.pretrain.seed is not None else config.seed
        self.windows_per_video = config.dataset.windows_per_video
        self.temporal_difference = config.pretrain.temporal_difference
        self.views = ViewGeneratorService(config.view, self.temporal_difference)
        self.dtype = config.pretrain.precision.dtype

    def __len__(self) -> int:
        return self.steps

    def sample_index(self, step: int, slot: int) -> int:
        epoch_size = len(self.split) * self.windows_per_video
        position = step * self.batch_size + slot
        epoch, offset = divmod(position, epoch_size)
        order = torch.randperm(epoch_size, generator=torch.Generator().manual_seed(derive_seed(self.seed, epoch)))
        return int(order[offset]) % len(self.split)

    def __getitem__(self, step: int) -> Tuple[torch.Tensor, torch.Tensor]:
        first, second = [], []
        for slot in range(self.batch_size):
            clip = self.split.decode(self.sample_index(step, slot))
            rng = torch.Generator().manual_seed(derive_seed(self.seed, step, slot))
            views = self.views.generate(clip, rng)
            first.append(views.views[0])
            second.append(views.views[1])
        return torch.stack(first).to(self.dtype), torch.stack(second).to(self.dtype)


# ---------------------------------------------------------------------------
# Service
# ---------------------------------------------------------------------------

class PretrainService:
    """
    Runs contrastive pretraining for one RunConfig inside one run directory
    """

    def __init__(self, config: RunConfig, run_dir: Optional[Path] = None, device: Optional[torch.device] = None):
        self.config = config
        self.settings = get_settings()
        self.run_dir = Path(run_dir) if run_dir is not None else config.resolved_output_dir()
        self.device = device or self.settings.resolve_device()
        self.spec = encoder_spec_from_config(config.encoder)
        self.seed = config.pretrain.seed if config.pretrain.seed is not None else config.seed

    @property
    def checkpoint_dir(self) -> Path:
        return self.run_dir / CHECKPOINT_DIR

    def build_state(self) -> TrainState:
        cfg = self.config.pretrain
        seed_everything(self.seed, self.settings.deterministic)
        encoder = build_encoder(self.spec)
        objective = get_infomax_objective(self.config.encoder, cfg, self.spec.channels_at)
        encoder.to(device=self.device, dtype=cfg.precision.dtype)
        objective.to(device=self.device, dtype=cfg.precision.dtype)
        optimizer = torch.optim.Adam(
            list(encoder.parameters()) + list(objective.parameters()),
            lr=cfg.learning_rate,
            betas=tuple(cfg.betas),
            eps=cfg.eps,
        )
        return TrainState(step=0, encoder=encoder, objective=objective, optimizer=optimizer, config=self.config)

    def restore_state(self, path: Path) -> TrainState:
        payload = load_checkpoint(path, self.spec, map_location=self.device)
        if payload["kind"] != "pretrain":
            raise CheckpointError(f"expected a pretrain checkpoint, got '{payload['kind']}'", path=str(path))
        state = self.build_state()
        restore_module(state.encoder, payload["state"], "encoder", path)
        restore_module(state.objective.heads, payload["state"], "heads", path)
        restore_module(state.optimizer, payload["state"], "optimizer", path)
        state.step = payload["step"]
        state.history = list(payload.get("history", []))
        state.rng_state = payload.get("rng_state")
        if state.rng_state is not None:
            torch.set_rng_state(state.rng_state)
        if payload["config_hash"] != state.config_hash:
            logger.warning(f"⚠️ Resuming {path} under a different config (hash {payload['config_hash'][:12]} "
                           f"-> {state.config_hash[:12]})")
        logger.info(f"Resumed pretraining from step {state.step}: {path}")
        return state

    def save(self, state: TrainState) -> Path:
        state.rng_state = torch.get_rng_state()
        return save_checkpoint(
            checkpoint_path(self.checkpoint_dir, state.step),
            kind="pretrain",
            step=state.step,
            spec=self.spec,
            config=self.config,
            modules={"encoder": state.encoder, "heads": state.objective.heads, "optimizer": state.optimizer},
            extra={"history": state.history, "rng_state": state.rng_state},
        )

    def split_pyramids(self, pyramid: FeaturePyramid, batch: int,
                       objective: InfoMaxObjective) -> Tuple[FeaturePyramid, FeaturePyramid]:
        """Antecedent and consequent pyramids from one concatenated encoder pass"""

        def chunk(index: int, layers) -> FeaturePyramid:
            return FeaturePyramid(taps={
                layer: pyramid[layer][index * batch:(index + 1) * batch] for layer in layers
            })

        antecedent = chunk(0, objective.antecedent_layers)
        if not self.config.pretrain.temporal_difference:
            return antecedent, chunk(1, objective.consequent_layers)
        return antecedent, difference_pyramid(
            chunk(1, objective.consequent_layers), chunk(2, objective.consequent_layers)
        )

    def train_step(self, state: TrainState, first: torch.Tensor, second: torch.Tensor) -> Dict[str, float]:
        """One optimizer update on a batch of view pairs"""
        cfg = self.config.pretrain
        batch = first.shape[0]
        state.encoder.train()
        state.objective.train()

        first = first.to(self.device)
        second = second.to(self.device)
        if cfg.temporal_difference:
            half = second.shape[1] // 2
            inputs = torch.cat([first, second[:, :half], second[:, half:]], dim=0)
        else:
            inputs = torch.cat([first, second], dim=0)

        pyramid = encode(state.encoder, inputs)
        antecedent, consequent = self.split_pyramids(pyramid, batch, state.objective)
        scores = state.objective.scores(antecedent, consequent)
        try:
            result = infonce(scores, state.objective.pairs, cfg.negative_mode, cfg.loss_reduction)
        except ScoreError as e:
            self._abort(state, str(e), scores)
        if not torch.isfinite(result.loss):
            self._abort(state, f"loss is {float(result.loss)}", scores)

        state.optimizer.zero_grad(set_to_none=True)
        result.loss.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(
                list(state.encoder.parameters()) + list(state.objective.parameters()), cfg.grad_clip
            )
        state.optimizer.step()
        state.step += 1

        record = {"loss": float(result.loss.detach())}
        record.update(result.mi())
        state.history.append(record)
        return record

    def _abort(self, state: TrainState, reason: str, scores) -> None:
        diagnostics = {"step": state.step + 1, "reason": reason, "pairs": {}}
        for (j, jp), values in scores.negatives.items():
            values = values.detach().double()
            finite = values[torch.isfinite(values)]
            diagnostics["pairs"][f"j{j}_jp{jp}"] = {
                "non_finite": int((~torch.isfinite(values)).sum()),
                "min": float(finite.min()) if finite.numel() else None,
                "max": float(finite.max()) if finite.numel() else None,
                "mean": float(finite.mean()) if finite.numel() else None,
                "std": float(finite.std()) if finite.numel() > 1 else None,
            }
        dump = write_json(self.run_dir / f"diagnostics_step{state.step + 1}.json", diagnostics)
        logger.error(f"❌ Non-finite loss at step {state.step + 1}: {reason}; score statistics in {dump}")
        raise NonFiniteLossError(f"non-finite loss at step {state.step + 1}: {reason} (see {dump})",
                                 step=state.step + 1, diagnostics=diagnostics)

    def run(self, split: DatasetSplit, resume_from: Optional[Path] = None) -> TrainState:
        cfg = self.config.pretrain
        self.run_dir.mkdir(parents=True, exist_ok=True)
        dump_run_config(self.config, self.run_dir / "resolved_config.yaml")

        state = self.restore_state(resume_from) if resume_from is not None else self.build_state()
        writer = MetricsWriter(self.run_dir / METRICS_FILE, state.config_hash)
        writer.truncate_after(state.step)
        if state.step >= cfg.steps:
            logger.info(f"Pretraining already complete at step {state.step}")
            return state

        batches = PretrainBatches(split, self.config, cfg.steps)
        loader = DataLoader(
            batches,
            batch_size=None,
            sampler=range(state.step, cfg.steps),
            num_workers=self.settings.num_workers,
        )
        window = window_length_for(self.config.view, cfg.temporal_difference)
        logger.info(
            f"Pretraining {cfg.steps - state.step} steps from step {state.step}: batch {cfg.batch_size}, "
            f"window {window} frames, {len(split)} videos, device {self.device}"
        )

        for first, second in loader:
            record = self.train_step(state, first, second)
            if state.step % cfg.log_interval == 0 or state.step == cfg.steps:
                writer.write(state.step, **record)
                logger.info(f"step {state.step}/{cfg.steps} loss {record['loss']:.4f}")
            if state.step % cfg.checkpoint_interval == 0 or state.step == cfg.steps:
                self.save(state)

        render_loss_curve(read_metrics(writer.path, "loss"), self.run_dir / "loss_curve.png")
        logger.info(f"✅ Pretraining finished at step {state.step}, running loss {state.running_loss():.4f}")
        return state


def pretrain(split: DatasetSplit, config: RunConfig, run_dir: Optional[Path] = None,
             resume_from: Optional[Path] = None) -> TrainState:
    return get_pretrain_service(config, run_dir).run(split, resume_from)


def get_pretrain_service(config: RunConfig, run_dir: Optional[Path] = None) -> PretrainService:
    return PretrainService(config, run_dir)
