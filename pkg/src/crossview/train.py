"""Training loop: AdamW with warmup+cosine schedule, gradient clipping,
optional sharpness-aware two-step updates, checkpointing, evaluation.

Runs are deterministic given the seed: the validation split, per-epoch
shuffles, and parameter init all derive from it, and per-epoch shuffles are
stateless (seeded by (seed, epoch)) so a resumed run replays the schedule of
an uninterrupted one exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as datamod
from . import evaluate as evalmod
from . import losses as lossmod
from .autodiff import Tape, Tensor, backward
from .errors import ContractError, NumericError, TrainingDiverged
from .losses import LossConfig
from .model import ModelConfig, init_siamese, saig_forward

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def lr_schedule(step, total_steps, base_lr, warmup_fraction=0.1):
    """Linear ramp to base_lr over the warmup steps, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(warmup_fraction * total_steps))
    if step < warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    t = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Decoupled weight decay (multiplicative) + bias-corrected moments."""

    def __init__(self, tensors, lr=1e-4, weight_decay=0.0, betas=ADAM_BETAS, eps=ADAM_EPS):
        self.tensors = dict(tensors)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.tensors.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in self.tensors.items()}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.tensors.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def param_scalar_count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def state_arrays(self, prefix="opt."):
        arrays = {}
        for name in self.tensors:
            arrays[f"{prefix}m.{name}"] = self.m[name]
            arrays[f"{prefix}v.{name}"] = self.v[name]
        return arrays

    def load_state_arrays(self, arrays, step_count, prefix="opt."):
        for name in self.tensors:
            self.m[name] = np.asarray(arrays[f"{prefix}m.{name}"]).astype(
                self.m[name].dtype
            )
            self.v[name] = np.asarray(arrays[f"{prefix}v.{name}"]).astype(
                self.v[name].dtype
            )
        self.step_count = int(step_count)


def global_grad_norm(grads):
    total = 0.0
    for g in grads:
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)


def clip_global_norm(grads, max_norm):
    """Scale all gradients in place so the global L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    total = global_grad_norm(grads)
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def sam_perturbed_grads(tensors, rho, recompute):
    """Replace ``.grad`` with gradients taken at the ascent-perturbed point.

    ``tensors`` must already carry base-point gradients; ``recompute()`` must
    refresh every ``.grad`` at the current parameter values. Parameters are
    restored exactly (saved copies, not arithmetic inverses) before return.
    Zero gradient norm or rho == 0 leaves the base gradients untouched.
    """
    if rho == 0:
        return
    if rho < 0:
        raise ContractError("rho must be non-negative")
    named = list(tensors.items())
    norm = global_grad_norm([t.grad for _, t in named if t.grad is not None])
    if norm == 0.0:
        return
    saved = {name: t.data for name, t in named}
    scale = rho / norm
    for name, t in named:
        if t.grad is not None:
            t.data = t.data + scale * t.grad
    try:
        recompute()
    finally:
        for name, t in named:
            t.data = saved[name]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int
    data: str
    model: ModelConfig
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-4
    weight_decay: float = 0.03
    batch_size: int = 32
    warmup_fraction: float = 0.1
    clip_norm: float = 1.0
    sam_enabled: bool = False
    sam_rho: float = 2.0
    seed: int = 0
    deterministic: bool = True
    early_stop_r1: float = None
    augment_rotations: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 (losses need in-batch negatives)")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if not 0 <= self.warmup_fraction < 1:
            raise ContractError("warmup_fraction must be in [0, 1)")

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "data": str(self.data),
            "model": self.model.to_dict(),
            "loss": {
                "alpha": self.loss.alpha,
                "tau": self.loss.tau,
                "strategy": self.loss.strategy,
            },
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "warmup_fraction": self.warmup_fraction,
            "clip_norm": self.clip_norm,
            "sam_enabled": self.sam_enabled,
            "sam_rho": self.sam_rho,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "early_stop_r1": self.early_stop_r1,
            "augment_rotations": self.augment_rotations,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            d = dict(d)
            d["model"] = ModelConfig.from_dict(d["model"])
            loss = d.get("loss", {})
            d["loss"] = LossConfig(
                alpha=loss.get("alpha", 10.0),
                tau=loss.get("tau", 0.02),
                strategy=loss.get("strategy", "exhaustive"),
            )
            return cls(**d)
        except (KeyError, TypeError) as e:
            raise ContractError(f"invalid train config: {e}") from e

    @classmethod
    def from_json_file(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ContractError(f"train config is not valid JSON: {e}") from e
        return cls.from_dict(doc)


@dataclass
class TrainResult:
    log: list
    best_r1: float
    siamese: object
    last_checkpoint: Path = None
    best_checkpoint: Path = None
    log_path: Path = None


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def split_indices(n, seed, val_fraction=0.125):
    """Seed-deterministic held-out split; at least one validation pair."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def compute_descriptors(images, config, params, batch=64):
    """Inference-mode descriptors for a stack of images, in chunks."""
    outs = []
    for i in range(0, len(images), batch):
        chunk = Tensor(images[i : i + batch])
        outs.append(saig_forward(chunk, config, params, training=False).data)
    return np.concatenate(outs, axis=0)


def validation_r1(siamese, pairs, indices):
    ground = np.stack([pairs[i].ground for i in indices])
    aerial = np.stack([pairs[i].aerial for i in indices])
    dg = compute_descriptors(ground, siamese.ground_config, siamese.ground)
    da = compute_descriptors(aerial, siamese.aerial_config, siamese.aerial)
    ids = [pairs[i].pair_id for i in indices]
    index = evalmod.build_index(da, ids)
    rankings = evalmod.rank_all(dg, index)
    return evalmod.recall_at_k(rankings, evalmod.self_match_labels(ids), 1)


def _trainer_checkpoint_arrays(siamese, opt):
    arrays = ckpt.siamese_state_arrays(siamese)
    arrays.update(opt.state_arrays())
    return arrays


def _save_trainer_checkpoint(path, siamese, opt, config, step, epoch, best_r1):
    meta = {
        "config": {
            "ground": siamese.ground_config.to_dict(),
            "aerial": siamese.aerial_config.to_dict(),
        },
        "train_config": config.to_dict(),
        "step": step,
        "epoch": epoch,
        "best_r1": best_r1,
    }
    ckpt.save_checkpoint(path, _trainer_checkpoint_arrays(siamese, opt), meta)


def train(config, out_dir=None, resume_from=None, log_fn=None, stop_after_epoch=None):
    """Run the full loop; returns a TrainResult with the per-epoch log.

    When ``out_dir`` is given, writes ``metrics.jsonl``, ``last.ckpt`` and
    ``best.ckpt`` (by validation r@1). A non-finite loss aborts with
    TrainingDiverged, saving the pre-step state to ``diverged.ckpt``.
    ``stop_after_epoch`` simulates an interruption at an epoch boundary; a
    later ``resume_from`` run with the same config replays the remainder of
    the schedule exactly.
    """
    pairs = datamod.load_dataset(config.data)
    n = len(pairs)
    train_idx, val_idx = split_indices(n, config.seed)
    if not train_idx:
        raise ContractError("dataset too small to split")

    ground_hw = pairs[0].ground.shape[1:]
    aerial_hw = pairs[0].aerial.shape[1:]

    start_epoch = 0
    best_r1 = -1.0
    if resume_from is not None:
        siamese, meta, arrays = ckpt.load_siamese(resume_from, extra_arrays=True)
        opt = AdamW(
            siamese.named_tensors(), lr=config.lr, weight_decay=config.weight_decay
        )
        opt.load_state_arrays(arrays, step_count=meta["step"])
        start_epoch = int(meta["epoch"])
        best_r1 = float(meta.get("best_r1", -1.0))
        step = int(meta["step"])
    else:
        siamese = init_siamese(config.model, ground_hw, aerial_hw, config.seed)
        opt = AdamW(
            siamese.named_tensors(), lr=config.lr, weight_decay=config.weight_decay
        )
        step = 0

    named = opt.tensors
    batches = _plan_batches(train_idx, config.batch_size)
    steps_per_epoch = len(batches)
    if steps_per_epoch == 0:
        raise ContractError("not enough training pairs for one batch")
    total_steps = config.epochs * steps_per_epoch

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"
        if resume_from is None and log_path.exists():
            log_path.unlink()

    log = []
    best_path = last_path = None
    for epoch in range(start_epoch + 1, config.epochs + 1):
        epoch_rng = np.random.default_rng([config.seed, epoch])
        order = epoch_rng.permutation(train_idx)
        epoch_losses = []
        for chunk_slots in batches:
            batch = datamod.make_pair_batch([pairs[order[s]] for s in chunk_slots])
            if config.augment_rotations:
                batch = _augment_rot90(batch, epoch_rng)
            snapshot = {k: v.copy() for k, v in _trainer_checkpoint_arrays(siamese, opt).items()}
            try:
                loss_val = _train_step(siamese, named, opt, batch, config, step, total_steps)
            except NumericError:
                loss_val = float("nan")
            if not math.isfinite(loss_val):
                diverged_path = None
                if out is not None:
                    diverged_path = out / "diverged.ckpt"
                    ckpt.save_checkpoint(
                        diverged_path,
                        snapshot,
                        {
                            "config": {
                                "ground": siamese.ground_config.to_dict(),
                                "aerial": siamese.aerial_config.to_dict(),
                            },
                            "train_config": config.to_dict(),
                            "step": step,
                            "epoch": epoch - 1,
                            "best_r1": best_r1,
                        },
                    )
                raise TrainingDiverged(step, diverged_path)
            epoch_losses.append(loss_val)
            step += 1

        r1 = validation_r1(siamese, pairs, val_idx)
        entry = {"epoch": epoch, "loss": float(np.mean(epoch_losses)), "r_at_1": r1}
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

        improved = r1 > best_r1
        best_r1 = max(best_r1, r1)
        if out is not None:
            last_path = out / "last.ckpt"
            _save_trainer_checkpoint(last_path, siamese, opt, config, step, epoch, best_r1)
            if improved or best_path is None:
                best_path = out / "best.ckpt"
                _save_trainer_checkpoint(best_path, siamese, opt, config, step, epoch, best_r1)
        if config.early_stop_r1 is not None and r1 >= config.early_stop_r1:
            break
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break

    return TrainResult(
        log=log,
        best_r1=best_r1,
        siamese=siamese,
        last_checkpoint=last_path,
        best_checkpoint=best_path,
        log_path=log_path,
    )


def _plan_batches(train_idx, batch_size):
    """Slot ranges into the shuffled order; trailing chunks < 2 are dropped."""
    slots = []
    for i in range(0, len(train_idx), batch_size):
        chunk = list(range(i, min(i + batch_size, len(train_idx))))
        if len(chunk) >= 2:
            slots.append(chunk)
    return slots


def _augment_rot90(batch, rng):
    """Rotate each scene by a random multiple of 90 degrees, consistently.

    Rotating the world maps the aerial view to rot90 and the ground panorama
    to a quarter-width column roll, so the pair stays a true match. Applied
    only when the panorama width is divisible by 4.
    """
    w = batch.ground.shape[-1]
    if w % 4:
        return batch
    ks = rng.integers(0, 4, len(batch.pair_ids))
    if not ks.any():
        return batch
    ground = batch.ground.copy()
    aerial = batch.aerial.copy()
    for i, k in enumerate(ks):
        if k:
            aerial[i] = np.rot90(aerial[i], k, axes=(1, 2))
            ground[i] = np.roll(ground[i], int(k) * (w // 4), axis=2)
    return datamod.PairBatch(
        ground=np.ascontiguousarray(ground),
        aerial=np.ascontiguousarray(aerial),
        pair_ids=batch.pair_ids,
        semi_positive_mask=batch.semi_positive_mask,
    )


def _train_step(siamese, named, opt, batch, config, step, total_steps):
    exclude = batch.semi_positive_mask

    def compute():
        with Tape() as tape:
            dg = saig_forward(
                Tensor(batch.ground), siamese.ground_config, siamese.ground, training=True
            )
            da = saig_forward(
                Tensor(batch.aerial), siamese.aerial_config, siamese.aerial, training=True
            )
            loss = lossmod.pair_loss(dg, da, config.loss, exclude_mask=exclude)
        backward(tape, loss)
        return loss.item()

    loss_val = compute()
    if not math.isfinite(loss_val):
        return loss_val
    if config.sam_enabled:
        sam_perturbed_grads(named, config.sam_rho, compute)
    clip_global_norm([t.grad for t in named.values() if t.grad is not None], config.clip_norm)
    lr_t = lr_schedule(step, total_steps, config.lr, config.warmup_fraction)
    opt.step(lr=lr_t)
    return loss_val


# ---------------------------------------------------------------------------
# checkpoint evaluation (CLI `eval`)
# ---------------------------------------------------------------------------


def evaluate_checkpoint(checkpoint_path, manifest_path, ks=(1, 5, 10)):
    """Rank every ground query against the aerial gallery of a dataset."""
    siamese, meta = ckpt.load_siamese(checkpoint_path)
    pairs = datamod.load_dataset(manifest_path)
    ground = np.stack([p.ground for p in pairs])
    aerial = np.stack([p.aerial for p in pairs])
    dg = compute_descriptors(ground, siamese.ground_config, siamese.ground)
    da = compute_descriptors(aerial, siamese.aerial_config, siamese.aerial)
    ids = [p.pair_id for p in pairs]
    index = evalmod.build_index(da, ids)
    report = evalmod.evaluate_retrieval(dg, index, evalmod.self_match_labels(ids), ks=ks)
    return report, evalmod.report_json(
        report,
        config_hash=ckpt.config_hash(meta["config"]),
        checkpoint_hash=ckpt.checkpoint_hash(checkpoint_path),
    )
