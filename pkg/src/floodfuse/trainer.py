"""AdamW + cosine-decay training loop, checkpointing, ablation toggles and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .backbone import ModelConfig
from .decoders import FloodFuseNet, build_model
from .losses import LossWeights, total_loss
from .metrics import aggregate, tile_record
from .tilestore import TileBundle, list_bundles, patchify, read_bundle

log = logging.getLogger(__name__)

ABLATIONS = ("no_film", "no_teacher", "no_decouple")
LOG_KEYS = ("step", "lr", "charb", "ssim", "fft", "edge", "dice", "bce", "hydro", "distill", "l_rgb", "l_seg", "total")
_DTYPES = {"f32": torch.float32, "f64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    # cosine horizon in steps; None maps the 200-epoch horizon onto steps per epoch
    cosine_steps: int | None = None
    cosine_epochs: int = 200
    lr_floor: float = 0.0
    epochs: int = 1
    batch: int = 8
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    checkpoint_every: int = 0
    val_fraction: float = 0.2
    patch: int | None = None
    stride: int | None = None
    prior_dropout: float = 0.0
    precision: str = "f32"
    deterministic: bool = True
    ablation: tuple[str, ...] = ()
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")
        unknown = set(self.ablation) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation {sorted(unknown)}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        self.weights.validate()
        self.model.validate()

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision]

    def effective(self) -> "TrainConfig":
        """Apply ablation toggles to the model and loss settings."""
        model, weights = self.model, self.weights
        if "no_film" in self.ablation:
            model = replace(model, use_film=False)
        if "no_teacher" in self.ablation:
            weights = replace(weights, eta=0.0)
        if "no_decouple" in self.ablation:
            model = replace(model, seg_from_rgb=False, rgb_from_seg=False)
        return replace(self, model=model, weights=weights)

    @property
    def use_teacher(self) -> bool:
        return "no_teacher" not in self.ablation

    def to_flat(self) -> dict:
        flat = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("weights", "model")}
        flat["ablation"] = list(self.ablation)
        flat.update(asdict(self.weights))
        flat.update(asdict(self.model))
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        """Build from flat keys spanning TrainConfig, LossWeights and ModelConfig."""
        own = {f.name for f in fields(cls)} - {"weights", "model"}
        wkeys = {f.name for f in fields(LossWeights)}
        mkeys = {f.name for f in fields(ModelConfig)}
        unknown = set(flat) - own - wkeys - mkeys
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: v for k, v in flat.items() if k in own}
        if "ablation" in kw:
            kw["ablation"] = tuple(kw["ablation"])
        return cls(
            **kw,
            weights=LossWeights(**{k: v for k, v in flat.items() if k in wkeys}),
            model=ModelConfig(**{k: v for k, v in flat.items() if k in mkeys}),
        )

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_flat(json.loads(Path(path).read_text()))


def cosine_lr(step: int, lr0: float, total_steps: int, floor: float = 0.0) -> float:
    if total_steps <= 0:
        return lr0
    t = min(step, total_steps) / total_steps
    return floor + (lr0 - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )


def stack_batch(bundles: list[TileBundle], dtype=torch.float32, use_prior: bool = True) -> dict:
    """Collate bundles into tensors; the prior is kept only if every bundle carries one."""
    def cat(attr):
        return torch.from_numpy(np.stack([getattr(b, attr) for b in bundles])).to(dtype)

    batch = {"sar": cat("sar"), "optical": cat("optical"), "mask": cat("mask"), "prior": None}
    if use_prior and all(b.prior is not None for b in bundles):
        batch["prior"] = cat("prior")
    return batch


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainState:
    model: FloodFuseNet
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    total_steps: int
    step: int = 0
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def train_step(batch: dict, state: TrainState) -> dict[str, float]:
    """One AdamW update on ``batch``; returns the logged loss breakdown."""
    cfg = state.cfg
    model = state.model
    model.train()
    prior = batch["prior"] if cfg.use_teacher else None
    if prior is not None and cfg.prior_dropout > 0 and state.rng.random() < cfg.prior_dropout:
        prior = None
    lr = cosine_lr(state.step, cfg.lr0, state.total_steps, cfg.lr_floor)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    out = model(batch["sar"], prior)
    loss, terms = total_loss(out, batch["optical"], batch["mask"], batch["sar"], cfg.weights)
    for name, value in terms.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NonFiniteLoss(f"non-finite loss term '{name}' at step {state.step}")
    loss.backward()
    state.optimizer.step()
    record = {"step": state.step, "lr": lr}
    record.update({k: float(torch.as_tensor(v).detach()) for k, v in terms.items()})
    state.step += 1
    return record


@torch.no_grad()
def predict(model: FloodFuseNet, bundles: list[TileBundle], use_prior: bool = True, chunk: int = 8):
    """Yield ``(bundle, y_hat, m_hat)`` as numpy arrays, in input order."""
    model.eval()
    dtype = next(model.parameters()).dtype
    for i in range(0, len(bundles), chunk):
        part = bundles[i : i + chunk]
        groups = [[b for b in part if b.prior is not None], [b for b in part if b.prior is None]]
        results = {}
        for grp in groups:
            if not grp:
                continue
            batch = stack_batch(grp, dtype, use_prior)
            out = model(batch["sar"], batch["prior"])
            for b, y, m in zip(grp, out.y_hat, out.m_hat):
                results[id(b)] = (y.cpu().numpy(), m.cpu().numpy())
        for b in part:
            yield (b, *results[id(b)])


def evaluate(model: FloodFuseNet, bundles: list[TileBundle], use_prior: bool = True, threshold: float = 0.5):
    records = [
        tile_record(y, b.optical, m, b.mask, threshold, str(b.meta.get("id", i)))
        for i, (b, y, m) in enumerate(predict(model, bundles, use_prior))
    ]
    return records, aggregate(records)


def load_dataset(root, cfg: TrainConfig) -> list[TileBundle]:
    paths = list_bundles(root)
    if not paths:
        raise FileNotFoundError(f"no tile bundles under {root}")
    bundles = [read_bundle(p) for p in paths]
    if cfg.patch:
        bundles = [p for b in bundles for p in patchify(b, cfg.patch, cfg.stride or cfg.patch)]
    return bundles


def split_dataset(bundles: list[TileBundle], cfg: TrainConfig) -> tuple[list[TileBundle], list[TileBundle]]:
    n_val = int(math.floor(len(bundles) * cfg.val_fraction))
    if n_val == 0 or n_val == len(bundles):
        return bundles, []
    order = np.random.default_rng(cfg.seed).permutation(len(bundles))
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [bundles[i] for i in train], [bundles[i] for i in val]


def configure_determinism(cfg: TrainConfig) -> None:
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)


def init_state(cfg: TrainConfig, n_train: int) -> TrainState:
    cfg = cfg.effective()
    cfg.validate()
    model = build_model(cfg.model, seed=cfg.seed, dtype=cfg.dtype)
    steps_per_epoch = max(1, math.ceil(n_train / cfg.batch))
    total = cfg.cosine_steps if cfg.cosine_steps is not None else cfg.cosine_epochs * steps_per_epoch
    return TrainState(
        model=model,
        optimizer=make_optimizer(model, cfg),
        cfg=cfg,
        total_steps=total,
        rng=np.random.default_rng(cfg.seed + 1),
    )


def run_epochs(state: TrainState, train: list[TileBundle], out: Path | None = None, log_file=None) -> list[dict]:
    """Train from ``state.epoch`` up to ``cfg.epochs``; returns the per-step records."""
    cfg = state.cfg
    history = []
    while state.epoch < cfg.epochs:
        order = np.random.default_rng([cfg.seed, state.epoch]).permutation(len(train))
        for i in range(0, len(order), cfg.batch):
            batch = stack_batch([train[j] for j in order[i : i + cfg.batch]], cfg.dtype)
            record = train_step(batch, state)
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps({k: record[k] for k in LOG_KEYS}) + "\n")
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(state, out / "checkpoints" / f"step_{state.step:06d}")
        state.epoch += 1
    return history


def save_state(state: TrainState, path, metrics=None) -> Path:
    return ckpt.save_checkpoint(
        path,
        state.model,
        state.optimizer,
        step=state.step,
        epoch=state.epoch,
        config=state.cfg.to_flat(),
        metrics=metrics,
    )


def restore_state(path, cfg: TrainConfig, n_train: int) -> TrainState:
    state = init_state(cfg, n_train)
    rec = ckpt.load_checkpoint(path, state.model, state.optimizer)
    state.step = rec["step"]
    state.epoch = rec["epoch"]
    return state


def fit(data_dir, cfg: TrainConfig, out_dir, resume=None) -> tuple[Path, dict]:
    """Train on bundles under ``data_dir``; writes ``train_log.jsonl`` and checkpoints to ``out_dir``.

    Returns the final checkpoint directory and the held-out (or training-set) summary.
    """
    cfg.validate()
    configure_determinism(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundles = load_dataset(data_dir, cfg)
    train, val = split_dataset(bundles, cfg)
    state = restore_state(resume, cfg, len(train)) if resume else init_state(cfg, len(train))
    if cfg.epochs == 0:
        path = save_state(state, out / "final")
        return path, {}
    with open(out / "train_log.jsonl", "a") as fh:
        run_epochs(state, train, out, fh)
    eval_set = val or train
    _, summary = evaluate(state.model, eval_set, use_prior=state.cfg.use_teacher)
    summary["split"] = "val" if val else "train"
    path = save_state(state, out / "final", metrics=summary)
    return path, summary


def load_model(path, dtype: torch.dtype | None = None) -> tuple[FloodFuseNet, TrainConfig]:
    """Rebuild a model from a checkpoint directory."""
    state = json.loads((Path(path) / "state.json").read_text())
    cfg = TrainConfig.from_flat(state["config"])
    dtype = dtype or cfg.dtype
    model = FloodFuseNet(cfg.model).to(dtype)
    ckpt.load_checkpoint(path, model)
    model.eval()
    return model, cfg


VARIANTS = ("full",) + ABLATIONS
ABLATION_METRICS = ("psnr", "ssim", "iou")


def run_ablation(data_dir, base: TrainConfig, out_dir, seeds=(0, 1, 2)) -> tuple[list[dict], list[dict]]:
    """Train every variant once per seed; returns (one averaged row per variant, per-run rows).

    Each averaged row also counts how many of PSNR/SSIM/IoU the full model beats it on.
    """
    out = Path(out_dir)
    runs = []
    for variant in VARIANTS:
        for seed in seeds:
            cfg = replace(base, ablation=() if variant == "full" else (variant,), seed=seed)
            _, summary = fit(data_dir, cfg, out / variant / f"seed_{seed}")
            runs.append({"variant": variant, "seed": seed, **{k: summary[k] for k in ("psnr", "ssim", "iou", "dice", "f1")}})
    rows = []
    for variant in VARIANTS:
        mine = [r for r in runs if r["variant"] == variant]
        rows.append({"variant": variant, "seeds": len(mine), **{k: float(np.mean([r[k] for r in mine])) for k in ("psnr", "ssim", "iou", "dice", "f1")}})
    full = rows[0]
    for row in rows:
        row["full_wins"] = sum(full[k] > row[k] for k in ABLATION_METRICS) if row is not full else ""
    return rows, runs
