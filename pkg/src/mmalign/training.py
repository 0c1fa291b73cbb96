"""Training loop: staged momentum schedule, per-batch optimization of the
combined objective, periodic pseudo-label calibration, curriculum batch
ordering, JSONL history and bit-exact float64 checkpoints.

Every stochastic choice (batch shuffles, mutual-information shuffles) is
drawn from a generator seeded by ``(rng_seed, epoch, purpose)``, so a run
is a pure function of (data, config) and resuming from a checkpoint
replays the exact remaining epochs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml
from torch import nn

from .encoders import (MI_MODALITIES, MODALITIES, EncoderConfig, FeatureDims, GraphInputs,
                       MultiModalEncoder, prepare_inputs)
from .errors import CheckpointError, ConfigError, NonFiniteLossError, ValidationError
from .evaluation import EvalReport, evaluate_alignment
from .features import ModalFeatureBundle
from .kg import MMKGPair
from .losses import (LossBreakdown, MutualInfoEstimator, alignment_kl_loss, combine_losses,
                     contrastive_loss, momentum_update, mutual_info_loss)
from .pseudo import (PseudoLabelStore, calibrate_pseudo_labels, predict_unlabeled,
                     reorder_pairs, shuffled_batches)

CHECKPOINT_FORMAT_VERSION = 1

# Distinct stream tags for per-epoch random draws.
_RNG_BATCHES = 1
_RNG_SHUFFLE = 2

_INT_FIELDS = {
    "config_version", "embed_dim", "node_dim", "gat_heads", "segments", "attn_heads",
    "attn_head_dim", "adaptor_dim", "mine_hidden", "bow_rel_size", "bow_attr_size",
    "text_dim", "visual_dim", "epochs", "batch_size", "momentum_interval",
    "momentum_start", "stability_window", "reorder_start", "reorder_stop",
    "checkpoint_every", "eval_every", "rng_seed",
}
_FLOAT_FIELDS = {"learning_rate", "temperature", "momentum", "train_fraction", "mine_ema_decay"}
_BOOL_FIELDS = {
    "use_alignment_loss", "use_mutual_info_loss", "use_contrastive_loss",
    "use_calibration", "pseudo_labels_all_losses", "strict_ensemble_check",
    "mine_bias_correction",
}
_STR_FIELDS = {"eval_candidates", "eval_direction"}


@dataclass(frozen=True)
class TrainConfig:
    """Flat run configuration; serialized as a YAML mapping."""

    config_version: int = 1
    # model dimensions
    embed_dim: int = 100
    node_dim: int = 100
    gat_heads: int = 1
    segments: int = 4
    attn_heads: int = 2
    attn_head_dim: int = 16
    adaptor_dim: int = 32
    mine_hidden: int = 64
    # raw feature widths used when loading datasets
    bow_rel_size: int = 1000
    bow_attr_size: int = 1000
    text_dim: int = 64
    visual_dim: int = 64
    # optimization
    epochs: int = 300
    batch_size: int = 512
    learning_rate: float = 1e-3
    temperature: float = 0.1
    momentum: float = 0.999
    momentum_interval: int = 1
    momentum_start: int = 500
    stability_window: int = 2
    reorder_start: int = 1
    reorder_stop: int = 50
    train_fraction: float = 0.2
    rng_seed: int = 0
    checkpoint_every: int = 50
    eval_every: int = 10
    eval_candidates: str = "test"
    eval_direction: str = "src_to_tgt"
    # loss switches
    use_alignment_loss: bool = True
    use_mutual_info_loss: bool = True
    use_contrastive_loss: bool = True
    use_calibration: bool = True
    pseudo_labels_all_losses: bool = True
    strict_ensemble_check: bool = False
    mine_bias_correction: bool = False
    mine_ema_decay: float = 0.99

    def __post_init__(self):
        if self.config_version != 1:
            raise ConfigError(f"unsupported config_version {self.config_version}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        for name in ("momentum_interval", "momentum_start", "stability_window", "reorder_start"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.reorder_stop < 0:
            raise ConfigError("reorder_stop must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ConfigError("cadences must be >= 0 (0 disables)")
        if self.eval_candidates not in ("test", "all"):
            raise ConfigError(f"eval_candidates must be 'test' or 'all', got {self.eval_candidates!r}")
        if self.eval_direction not in ("src_to_tgt", "tgt_to_src", "mean"):
            raise ConfigError(f"unknown eval_direction {self.eval_direction!r}")
        if not 0.0 < self.mine_ema_decay < 1.0:
            raise ConfigError("mine_ema_decay must lie strictly between 0 and 1")
        # model dimension sanity is delegated to EncoderConfig
        self.encoder_config()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            embed_dim=self.embed_dim,
            node_dim=self.node_dim,
            gat_heads=self.gat_heads,
            segments=self.segments,
            attn_heads=self.attn_heads,
            attn_head_dim=self.attn_head_dim,
            adaptor_dim=self.adaptor_dim,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a flat mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values = {}
        for key, value in data.items():
            if key in _BOOL_FIELDS:
                if not isinstance(value, bool):
                    raise ConfigError(f"config key {key} must be a boolean, got {value!r}")
            elif key in _INT_FIELDS:
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"config key {key} must be an integer, got {value!r}")
            elif key in _FLOAT_FIELDS:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"config key {key} must be a number, got {value!r}")
                value = float(value)
            elif key in _STR_FIELDS and not isinstance(value, str):
                raise ConfigError(f"config key {key} must be a string, got {value!r}")
            values[key] = value
        return cls(**values)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if data is None:
            data = {}
        return cls.from_dict(data)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TrainData:
    """Tensors and index sets shared by every epoch."""

    inputs_src: GraphInputs
    inputs_tgt: GraphInputs
    train_pairs: list[tuple[int, int]]
    test_pairs: list[tuple[int, int]]
    n_source: int
    n_target: int


def prepare_training_data(pair: MMKGPair,
                          bundles: tuple[ModalFeatureBundle, ModalFeatureBundle]) -> TrainData:
    inputs_src, inputs_tgt = prepare_inputs(pair, bundles)
    train_pairs = sorted(pair.train_seeds.pairs)
    if len(train_pairs) < 2:
        raise ValidationError("training needs at least 2 seed pairs")
    return TrainData(
        inputs_src=inputs_src,
        inputs_tgt=inputs_tgt,
        train_pairs=train_pairs,
        test_pairs=sorted(pair.test_seeds.pairs),
        n_source=pair.source.n_entities,
        n_target=pair.target.n_entities,
    )


@dataclass
class TrainState:
    """Everything that evolves across epochs."""

    epoch: int
    stage: str  # "online" until the momentum copy exists, then "momentum"
    online: MultiModalEncoder
    target: MultiModalEncoder
    mine_nets: nn.ModuleDict
    optimizer: torch.optim.Optimizer
    opt_param_names: list[str]
    pseudo: PseudoLabelStore
    mine_ema: dict[str, float] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    dump_dir: Path | None = None


def build_state(config: TrainConfig,
                bundles: tuple[ModalFeatureBundle, ModalFeatureBundle]) -> TrainState:
    """Fresh deterministic state: online/momentum encoders start identical."""
    dims = FeatureDims.from_bundles(*bundles)
    enc_cfg = config.encoder_config()
    online = MultiModalEncoder(enc_cfg, dims, seed=config.rng_seed, role="online")
    target = MultiModalEncoder(enc_cfg, dims, seed=config.rng_seed, role="momentum")
    target.load_state_dict(online.state_dict())
    for p in target.parameters():
        p.requires_grad_(False)

    mine_nets = nn.ModuleDict()
    for k, name in enumerate(MI_MODALITIES):
        net = MutualInfoEstimator(online.joint_dim, config.embed_dim, config.mine_hidden)
        net.reset_parameters(config.rng_seed + 7919 * (k + 1))
        mine_nets[name] = net

    named = [(f"online:{n}", p) for n, p in online.named_parameters()]
    named += [(f"mine:{n}", p) for n, p in mine_nets.named_parameters()]
    optimizer = torch.optim.Adam([p for _, p in named], lr=config.learning_rate)
    return TrainState(
        epoch=0,
        stage="online",
        online=online,
        target=target,
        mine_nets=mine_nets,
        optimizer=optimizer,
        opt_param_names=[n for n, _ in named],
        pseudo=PseudoLabelStore(),
    )


def _epoch_rng(config: TrainConfig, epoch: int, tag: int, extra: int | None = None) -> np.random.Generator:
    seq = [config.rng_seed, epoch, tag] if extra is None else [config.rng_seed, epoch, tag, extra]
    return np.random.default_rng(seq)


def _merge_trailing_singleton(batches: list[list[tuple[int, int]]]) -> list[list[tuple[int, int]]]:
    if len(batches) >= 2 and len(batches[-1]) == 1:
        batches[-2] = batches[-2] + batches[-1]
        batches.pop()
    return batches


def _full_embeddings(encoder: MultiModalEncoder, data: TrainData):
    with torch.no_grad():
        return encoder(data.inputs_src), encoder(data.inputs_tgt)


def _ensemble_agreement(embs_src, embs_tgt, predictions: dict[int, tuple[int, float]],
                        candidate_tgt: Sequence[int]) -> dict[int, tuple[int, float]]:
    """Keep only predictions backed by a strict majority of the uni-modal
    nearest-neighbor votes."""
    if not predictions:
        return {}
    sources = sorted(predictions)
    votes = {src: 0 for src in sources}
    for name in MODALITIES:
        modal_pred = predict_unlabeled(embs_src.modal[name].numpy(), embs_tgt.modal[name].numpy(),
                                       sources, candidate_tgt)
        for src in sources:
            if modal_pred[src][0] == predictions[src][0]:
                votes[src] += 1
    majority = len(MODALITIES) // 2 + 1
    return {src: predictions[src] for src in sources if votes[src] >= majority}


def _dump_nonfinite(state: TrainState, epoch: int, batch_index: int,
                    raw_terms: dict[str, float]) -> str | None:
    if state.dump_dir is None:
        return None
    finite = {}
    for name, p in state.online.named_parameters():
        finite[name] = bool(torch.isfinite(p).all())
    payload = {
        "epoch": epoch,
        "batch_index": batch_index,
        "loss_terms": raw_terms,
        "online_params_finite": finite,
    }
    path = Path(state.dump_dir) / f"nonfinite_epoch{epoch}_batch{batch_index}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return str(path)


def train_epoch(state: TrainState, data: TrainData, config: TrainConfig) -> dict:
    """Run one full epoch and return its history record.

    Order of operations: momentum copy (when the epoch reaches the start of
    the momentum stage), batch construction (curriculum or shuffled), one
    optimizer step per batch, the periodic momentum update, then the
    periodic pseudo-label calibration and evaluation.
    """
    epoch = state.epoch + 1
    if state.stage == "online" and epoch >= config.momentum_start:
        state.target.load_state_dict(state.online.state_dict())
        state.stage = "momentum"

    pairs = list(data.train_pairs)
    if config.use_calibration:
        pairs += state.pseudo.promoted_pairs()
    train_set = set(data.train_pairs)

    if config.reorder_start <= epoch < config.reorder_stop:
        embs_src, embs_tgt = _full_embeddings(state.online, data)
        batches = reorder_pairs(pairs, embs_src.joint.numpy(), embs_tgt.joint.numpy(),
                                config.batch_size)
    else:
        batches = shuffled_batches(pairs, config.batch_size,
                                   _epoch_rng(config, epoch, _RNG_BATCHES))
    batches = _merge_trailing_singleton(batches)

    sums: dict[str, dict[str, float]] = {"align": {}, "mutual_info": {}, "contrast": {}}
    total_sum = 0.0
    for b, batch in enumerate(batches):
        idx_s = torch.tensor([s for s, _ in batch], dtype=torch.long)
        idx_t = torch.tensor([t for _, t in batch], dtype=torch.long)
        out_src = state.online(data.inputs_src)
        out_tgt = state.online(data.inputs_tgt)
        if state.stage == "momentum":
            with torch.no_grad():
                mom_src = state.target(data.inputs_src)
                mom_tgt = state.target(data.inputs_tgt)
        else:
            mom_src, mom_tgt = out_src, out_tgt

        if config.pseudo_labels_all_losses:
            core_s, core_t = idx_s, idx_t
        else:
            keep = [k for k, p in enumerate(batch) if p in train_set]
            core_s = idx_s[keep]
            core_t = idx_t[keep]
        run_core = core_s.shape[0] >= 2

        align: dict[str, torch.Tensor] = {}
        if config.use_alignment_loss and run_core:
            j_s = out_src.joint[core_s]
            j_t = out_tgt.joint[core_t]
            for name in MODALITIES:
                align[name] = alignment_kl_loss(j_s, j_t, out_src.modal[name][core_s],
                                                out_tgt.modal[name][core_t], config.temperature)

        mi_term = None
        mi_estimates: dict[str, float] = {}
        if config.use_mutual_info_loss and run_core:
            joint_rows = torch.cat([out_src.joint[core_s], out_tgt.joint[core_t]], dim=0)
            modal_rows = {name: torch.cat([out_src.modal[name][core_s],
                                           out_tgt.modal[name][core_t]], dim=0)
                          for name in MI_MODALITIES}
            shuffle = torch.from_numpy(
                _epoch_rng(config, epoch, _RNG_SHUFFLE, b).permutation(joint_rows.shape[0]))
            ema = state.mine_ema if config.mine_bias_correction else None
            mi_term, mi_estimates = mutual_info_loss(state.mine_nets, joint_rows, modal_rows,
                                                     shuffle, ema, config.mine_ema_decay)

        contrast: dict[str, torch.Tensor] = {}
        if config.use_contrastive_loss:
            for name in MODALITIES + ("joint",):
                contrast[name] = contrastive_loss(out_src[name][idx_s], out_tgt[name][idx_t],
                                                  mom_src[name][idx_s], mom_tgt[name][idx_t],
                                                  config.temperature)

        if not align and mi_term is None and not contrast:
            continue
        total, breakdown = combine_losses(align, mi_term, mi_estimates, contrast)
        if not torch.isfinite(total):
            raw = {"align": breakdown.align, "mutual_info": breakdown.mutual_info,
                   "contrast": breakdown.contrast, "total": breakdown.total}
            dump = _dump_nonfinite(state, epoch, b, raw)
            raise NonFiniteLossError(
                f"non-finite loss at epoch {epoch}, batch {b}", dump_path=dump)
        state.optimizer.zero_grad(set_to_none=True)
        total.backward()
        state.optimizer.step()

        for group, values in (("align", breakdown.align), ("mutual_info", breakdown.mutual_info),
                              ("contrast", breakdown.contrast)):
            for key, value in values.items():
                sums[group][key] = sums[group].get(key, 0.0) + value
        total_sum += breakdown.total

    n_batches = max(len(batches), 1)
    losses = LossBreakdown(
        align={k: v / n_batches for k, v in sums["align"].items()},
        mutual_info={k: v / n_batches for k, v in sums["mutual_info"].items()},
        contrast={k: v / n_batches for k, v in sums["contrast"].items()},
        total=total_sum / n_batches,
    )

    if state.stage == "momentum" and epoch % config.momentum_interval == 0:
        momentum_update(state.target, state.online, config.momentum)

    promoted_new: list[tuple[int, int]] = []
    if config.use_calibration and config.stability_window > 0 \
            and epoch % config.stability_window == 0:
        embs_src, embs_tgt = _full_embeddings(state.online, data)
        consumed_src = set(s for s, _ in data.train_pairs) | set(state.pseudo.promoted)
        consumed_tgt = set(t for _, t in data.train_pairs) | state.pseudo.promoted_targets()
        unlabeled = [s for s in range(data.n_source) if s not in consumed_src]
        candidates = [t for t in range(data.n_target) if t not in consumed_tgt]
        predictions = predict_unlabeled(embs_src.joint.numpy(), embs_tgt.joint.numpy(),
                                        unlabeled, candidates)
        if config.strict_ensemble_check:
            predictions = _ensemble_agreement(embs_src, embs_tgt, predictions, candidates)
        promoted_new = calibrate_pseudo_labels(state.pseudo, predictions, epoch,
                                               config.stability_window)

    record = {
        "epoch": epoch,
        "stage": state.stage,
        "n_batches": len(batches),
        "n_pairs": len(pairs),
        "losses": losses.to_json_dict(),
        "promoted_new": len(promoted_new),
        "promoted_total": len(state.pseudo.promoted),
    }
    if config.eval_every > 0 and epoch % config.eval_every == 0 and data.test_pairs:
        record["metrics"] = evaluate_epoch(state, data, config).to_json_dict()
    state.epoch = epoch
    state.history.append(record)
    return record


def evaluate_epoch(state: TrainState, data: TrainData, config: TrainConfig) -> EvalReport:
    """Evaluate the current online joint embeddings on the held-out pairs."""
    embs_src, embs_tgt = _full_embeddings(state.online, data)
    return evaluate_alignment(embs_src.joint.numpy(), embs_tgt.joint.numpy(), data.test_pairs,
                              candidates=config.eval_candidates,
                              direction=config.eval_direction)


def save_checkpoint(state: TrainState, config: TrainConfig, path: str | Path) -> None:
    """Serialize parameters, optimizer moments and run metadata to an ``.npz``
    archive of named float64 arrays plus one JSON manifest string."""
    arrays: dict[str, np.ndarray] = {}
    for prefix, module in (("online", state.online), ("target", state.target),
                           ("mine", state.mine_nets)):
        for name, tensor in module.state_dict().items():
            arrays[f"param:{prefix}:{name}"] = tensor.detach().numpy()

    params = [p for group in state.optimizer.param_groups for p in group["params"]]
    if len(params) != len(state.opt_param_names):
        raise CheckpointError("optimizer parameter list does not match the recorded names")
    for name, p in zip(state.opt_param_names, params):
        opt_state = state.optimizer.state.get(p)
        if not opt_state:
            continue
        arrays[f"opt:{name}:exp_avg"] = opt_state["exp_avg"].detach().numpy()
        arrays[f"opt:{name}:exp_avg_sq"] = opt_state["exp_avg_sq"].detach().numpy()
        arrays[f"opt:{name}:step"] = np.asarray(float(opt_state["step"]), dtype=np.float64)

    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "epoch": state.epoch,
        "stage": state.stage,
        "pseudo": state.pseudo.to_json_dict(),
        "mine_ema": dict(state.mine_ema),
    }
    arrays["manifest"] = np.asarray(json.dumps(manifest, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint_manifest(path: str | Path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as npz:
            if "manifest" not in npz:
                raise CheckpointError(f"{path}: missing manifest entry")
            manifest = json.loads(str(npz["manifest"][()]))
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {version!r}")
    return manifest


def read_checkpoint_config(path: str | Path) -> TrainConfig:
    manifest = read_checkpoint_manifest(path)
    try:
        config = TrainConfig.from_dict(manifest["config"])
    except (KeyError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid config in manifest: {exc}") from exc
    if config.config_hash() != manifest.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch in manifest")
    return config


def load_checkpoint(path: str | Path,
                    bundles: tuple[ModalFeatureBundle, ModalFeatureBundle]) -> tuple[TrainState, TrainConfig]:
    """Rebuild a :class:`TrainState` bit-identical to the one saved."""
    manifest = read_checkpoint_manifest(path)
    config = read_checkpoint_config(path)
    state = build_state(config, bundles)
    with np.load(path, allow_pickle=False) as npz:
        keys = set(npz.files)
        for prefix, module in (("online", state.online), ("target", state.target),
                               ("mine", state.mine_nets)):
            tensors = {}
            for name, current in module.state_dict().items():
                key = f"param:{prefix}:{name}"
                if key not in keys:
                    raise CheckpointError(f"{path}: missing array {key}")
                stored = npz[key]
                if tuple(stored.shape) != tuple(current.shape):
                    raise CheckpointError(
                        f"{path}: shape mismatch for {key}: checkpoint {tuple(stored.shape)} "
                        f"vs model {tuple(current.shape)}")
                tensors[name] = torch.from_numpy(stored.copy())
            module.load_state_dict(tensors)

        opt_sd = state.optimizer.state_dict()
        opt_state = {}
        for index, name in enumerate(state.opt_param_names):
            key = f"opt:{name}:exp_avg"
            if key not in keys:
                continue
            opt_state[index] = {
                "step": torch.tensor(float(npz[f"opt:{name}:step"][()]), dtype=torch.float32),
                "exp_avg": torch.from_numpy(npz[key].copy()),
                "exp_avg_sq": torch.from_numpy(npz[f"opt:{name}:exp_avg_sq"].copy()),
            }
        opt_sd["state"] = opt_state
        state.optimizer.load_state_dict(opt_sd)

    for p in state.target.parameters():
        p.requires_grad_(False)
    state.epoch = int(manifest["epoch"])
    state.stage = str(manifest["stage"])
    state.pseudo = PseudoLabelStore.from_json_dict(manifest["pseudo"])
    state.mine_ema = {k: float(v) for k, v in manifest.get("mine_ema", {}).items()}
    return state, config


def run_training(pair: MMKGPair, bundles: tuple[ModalFeatureBundle, ModalFeatureBundle],
                 config: TrainConfig, out_dir: str | Path,
                 resume_from: str | Path | None = None) -> TrainState:
    """Train for ``config.epochs`` epochs, writing ``history.jsonl``,
    periodic checkpoints and ``checkpoint_final.npz`` under ``out_dir``.

    With ``resume_from``, training continues after the checkpoint's epoch;
    the checkpoint must carry the same config hash as ``config``.
    """
    torch.use_deterministic_algorithms(True)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_training_data(pair, bundles)

    if resume_from is not None:
        state, ck_config = load_checkpoint(resume_from, bundles)
        if ck_config.config_hash() != config.config_hash():
            raise CheckpointError(
                f"{resume_from}: checkpoint config does not match the requested config")
    else:
        state = build_state(config, bundles)
    state.dump_dir = out

    config.save(out / "config.yaml")
    history_path = out / "history.jsonl"
    mode = "a" if (resume_from is not None and history_path.exists()) else "w"
    with open(history_path, mode, encoding="utf-8") as history:
        while state.epoch < config.epochs:
            record = train_epoch(state, data, config)
            history.write(json.dumps(record, sort_keys=True) + "\n")
            history.flush()
            if config.checkpoint_every > 0 and state.epoch % config.checkpoint_every == 0:
                save_checkpoint(state, config, out / f"checkpoint_{state.epoch:05d}.npz")
    save_checkpoint(state, config, out / "checkpoint_final.npz")
    return state
