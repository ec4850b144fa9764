"""Alternating-step training loop, checkpoint round trip and the lambda grid
search.

Each step runs, in order: discriminator update on real plus generated
samples, regressor update on real samples supervised by their own argmax
pixel, then a generator update on the combined objective in which the
regressor is applied frozen to generated images with the group's stored
center as target.

Random streams are documented functions of config.seed: parameter init uses
seed, epoch shuffling seed + 1, training latents seed + 2; grid-search run
seeds are seed + 1000 * cell_index + run_index, with evaluation latents at
run_seed + 3. strict_deterministic pins torch to one thread so repeated runs
are bit-identical.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import torch

from . import data as dt
from .evaluation import evaluate_model
from .losses import (
    LossBreakdown,
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    aux_loss,
    diversity_loss,
    intensity_loss,
    total_generator_loss,
)
from .nets import ArchitectureConfig, Networks, init_networks

_SEED_MASK = 0x7FFFFFFFFFFFFFFF
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries the offending step and batch index."""

    def __init__(self, stage: str, step: int, epoch: int, batch_index: int, value: float):
        super().__init__(
            f"non-finite {stage} loss ({value}) at step {step}, epoch {epoch}, batch {batch_index}"
        )
        self.stage = stage
        self.step = step
        self.epoch = epoch
        self.batch_index = batch_index
        self.value = value


class CheckpointError(RuntimeError):
    """Checkpoint payload is corrupt or does not match the architecture."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate_g: float = 2e-4
    learning_rate_d: float = 2e-4
    learning_rate_r: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    strict_deterministic: bool = False
    saturating_g: bool = False
    diversity_eps: float = 1e-4
    checkpoint_every: int = 10

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (diversity pairs need two latents)")
        for name in ("learning_rate_g", "learning_rate_d", "learning_rate_r"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.diversity_eps <= 0:
            raise ValueError("diversity_eps must be positive")
        self.weights.validate()


@dataclass
class StepRecord:
    step: int
    epoch: int
    d_loss: float
    r_loss: float
    g: LossBreakdown

    def to_dict(self) -> dict:
        g = self.g.to_dict()
        return {
            "step": self.step,
            "epoch": self.epoch,
            "d_loss": self.d_loss,
            "r_loss": self.r_loss,
            "g_adv": g["adv"],
            "g_div": g["div"],
            "g_in": g["intensity"],
            "g_aux": g["aux"],
            "g_total": g["total"],
        }


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    # Wall-clock stays out of train_log.jsonl so strict-mode reruns produce
    # byte-identical logs.
    epoch_seconds: list[float] = field(default_factory=list)

    def jsonl(self) -> str:
        return "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in self.steps)


@dataclass
class StepBatch:
    """Tensors for one optimization step; pair_* carries one entry per
    distinct condition group in the batch (used for diversity pairs)."""

    conditions: torch.Tensor        # (B, 9)
    real: torch.Tensor              # (B, 56, 30)
    max_pixel_targets: torch.Tensor  # (B, 2)
    group_centers: torch.Tensor     # (B, 2)
    ref_responses: torch.Tensor     # (B, 56, 30)
    pair_conditions: torch.Tensor   # (U, 9)
    pair_weights: torch.Tensor      # (U,)
    batch_index: int = 0


def make_optimizers(nets: Networks, config: TrainConfig) -> dict[str, torch.optim.Optimizer]:
    def build(module, lr):
        if config.optimizer == "adam":
            return torch.optim.Adam(
                module.parameters(), lr=lr, betas=(config.beta1, config.beta2), eps=config.adam_eps
            )
        return torch.optim.SGD(module.parameters(), lr=lr)

    return {
        "generator": build(nets.generator, config.learning_rate_g),
        "discriminator": build(nets.discriminator, config.learning_rate_d),
        "regressor": build(nets.regressor, config.learning_rate_r),
    }


def _check_finite(value: torch.Tensor, stage: str, step: int, epoch: int, batch_index: int) -> None:
    v = float(value)
    if not np.isfinite(v):
        raise TrainingDiverged(stage, step, epoch, batch_index, v)


def train_step(
    nets: Networks,
    optimizers: dict[str, torch.optim.Optimizer],
    batch: StepBatch,
    config: TrainConfig,
    latent_gen: torch.Generator,
    step: int = 0,
    epoch: int = 0,
) -> tuple[float, float, LossBreakdown]:
    """One D -> R -> G update. Terms with zero lambda are skipped entirely so
    the all-zero configuration reproduces a plain conditional GAN step,
    including identical latent draws and batch-norm statistics."""
    w = config.weights
    cond = batch.conditions
    b = cond.shape[0]
    k = nets.config.latent_dim if nets.config is not None else 10

    # discriminator
    z = torch.randn(b, k, generator=latent_gen)
    with torch.no_grad():
        fake = nets.generator(z, cond)
    d_loss = adversarial_d_loss(nets.discriminator(batch.real, cond), nets.discriminator(fake, cond))
    _check_finite(d_loss, "discriminator", step, epoch, batch.batch_index)
    optimizers["discriminator"].zero_grad()
    d_loss.backward()
    optimizers["discriminator"].step()

    # regressor, supervised on real images only
    r_loss = aux_loss(nets.regressor(batch.real), batch.max_pixel_targets)
    _check_finite(r_loss, "regressor", step, epoch, batch.batch_index)
    optimizers["regressor"].zero_grad()
    r_loss.backward()
    optimizers["regressor"].step()

    # generator
    z2 = torch.randn(b, k, generator=latent_gen)
    x_gen = nets.generator(z2, cond)
    adv = adversarial_g_loss(nets.discriminator(x_gen, cond), saturating=config.saturating_g)
    zero = torch.zeros((), dtype=x_gen.dtype)
    in_term = intensity_loss(batch.ref_responses, x_gen) if w.lambda_in > 0 else zero
    aux_term = aux_loss(nets.regressor(x_gen), batch.group_centers) if w.lambda_aux > 0 else zero
    if w.lambda_div > 0:
        u = batch.pair_conditions.shape[0]
        za = torch.randn(u, k, generator=latent_gen)
        zb = torch.randn(u, k, generator=latent_gen)
        x_a = nets.generator(za, batch.pair_conditions)
        x_b = nets.generator(zb, batch.pair_conditions)
        div_term = diversity_loss(batch.pair_weights, x_a, x_b, za, zb, eps=config.diversity_eps)
    else:
        div_term = zero
    for name, t in (("adversarial", adv), ("diversity", div_term), ("intensity", in_term), ("aux", aux_term)):
        _check_finite(t, name, step, epoch, batch.batch_index)
    breakdown = total_generator_loss(adv, div_term, in_term, aux_term, w)
    optimizers["generator"].zero_grad()
    breakdown.total.backward()
    optimizers["generator"].step()

    return float(d_loss), float(r_loss), breakdown.as_floats()


def train(
    dataset: dt.Dataset,
    config: TrainConfig,
    arch_config: ArchitectureConfig | None = None,
    run_dir: str | Path | None = None,
) -> tuple[Networks, TrainLog]:
    """Full training loop over the given (already split) dataset.

    Preprocessing statistics are computed once up front. When run_dir is set,
    checkpoints land in run_dir/checkpoint_epoch_NNNN and run_dir/checkpoint,
    the per-step log in run_dir/train_log.jsonl, and a divergence dump in
    run_dir/divergence.json if a loss goes non-finite.
    """
    config.validate()
    arch = arch_config if arch_config is not None else ArchitectureConfig()
    arch.validate()
    if dataset.n_groups < 2:
        raise ValueError("training needs at least 2 condition groups")
    if config.strict_deterministic:
        torch.set_num_threads(1)
    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    stats = dt.compute_stats(dataset)
    nets = init_networks(arch, seed=config.seed)
    optimizers = make_optimizers(nets, config)
    shuffle_rng = np.random.default_rng(config.seed + 1)
    latent_gen = torch.Generator().manual_seed((config.seed + 2) & _SEED_MASK)

    n = len(dataset)
    conds = dataset.conditions.astype(np.float32)
    reals = dataset.responses.astype(np.float32)
    max_targets = dt.find_max_pixels(dataset.responses).astype(np.float32)
    weight_by_sample = np.empty(n, dtype=np.float32)
    center_by_sample = np.empty((n, 2), dtype=np.float32)
    ref_by_sample = np.empty(n, dtype=np.int64)
    for gid, gs in stats.per_group.items():
        idx = dataset.groups[gid]
        weight_by_sample[idx] = gs.diversity_weight
        center_by_sample[idx] = gs.center
        ref_by_sample[idx] = gs.reference_index

    def meta(step: int) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "architecture": dataclasses.asdict(arch),
            "seed": config.seed,
            "step": step,
            "weights": config.weights.to_dict(),
            "train_config": dataclasses.asdict(config),
        }

    log = TrainLog()
    nets.train_mode()
    step = 0
    try:
        for epoch in range(config.epochs):
            t0 = time.monotonic()
            perm = shuffle_rng.permutation(n)
            for bi, start in enumerate(range(0, n, config.batch_size)):
                sel = perm[start : start + config.batch_size]
                if sel.size < 2:
                    continue  # batch norm needs more than one sample
                gids = dataset.group_ids[sel]
                _, first = np.unique(gids, return_index=True)
                batch = StepBatch(
                    conditions=torch.from_numpy(conds[sel]),
                    real=torch.from_numpy(reals[sel]),
                    max_pixel_targets=torch.from_numpy(max_targets[sel]),
                    group_centers=torch.from_numpy(center_by_sample[sel]),
                    ref_responses=torch.from_numpy(reals[ref_by_sample[sel]]),
                    pair_conditions=torch.from_numpy(conds[sel[first]]),
                    pair_weights=torch.from_numpy(weight_by_sample[sel[first]]),
                    batch_index=bi,
                )
                d_loss, r_loss, breakdown = train_step(
                    nets, optimizers, batch, config, latent_gen, step=step, epoch=epoch
                )
                log.steps.append(StepRecord(step, epoch, d_loss, r_loss, breakdown))
                step += 1
            log.epoch_seconds.append(time.monotonic() - t0)
            if out is not None and config.checkpoint_every > 0 and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(nets, meta(step), out / f"checkpoint_epoch_{epoch + 1:04d}")
    except TrainingDiverged as e:
        if out is not None:
            dump = {
                "stage": e.stage,
                "step": e.step,
                "epoch": e.epoch,
                "batch_index": e.batch_index,
                "value": e.value,
            }
            (out / "divergence.json").write_text(json.dumps(dump, indent=2))
        raise

    nets.eval_mode()
    if out is not None:
        save_checkpoint(nets, meta(step), out / "checkpoint")
        (out / "train_log.jsonl").write_text(log.jsonl())
    return nets, log


def save_checkpoint(nets: Networks, meta: dict, path: str | Path) -> None:
    """params.bin holds every state-dict tensor as float32 little-endian in
    manifest order; meta.json records the manifest (with original dtypes, so
    integer batch-norm counters survive the cast) beside the caller's
    metadata."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    manifest = []
    payload = bytearray()
    for mod_name, module in nets.modules_by_name().items():
        for key, tensor in module.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            manifest.append(
                {"name": f"{mod_name}.{key}", "shape": list(arr.shape), "dtype": str(arr.dtype)}
            )
            payload.extend(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta_out = dict(meta)
    meta_out["tensors"] = manifest
    (d / "meta.json").write_text(json.dumps(meta_out, indent=2, sort_keys=True))
    (d / "params.bin").write_bytes(bytes(payload))


def load_checkpoint(path: str | Path) -> tuple[Networks, dict]:
    d = Path(path)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint meta: {e}") from e
    for key in ("architecture", "tensors"):
        if key not in meta:
            raise CheckpointError(f"checkpoint meta missing '{key}'")
    try:
        arch = ArchitectureConfig(**meta["architecture"])
    except TypeError as e:
        raise CheckpointError(f"bad architecture config: {e}") from e
    nets = init_networks(arch, seed=0)

    raw = (d / "params.bin").read_bytes()
    expected = sum(int(np.prod(t["shape"])) for t in meta["tensors"]) * 4
    if len(raw) != expected:
        raise CheckpointError(f"params.bin has {len(raw)} bytes, manifest expects {expected}")

    states: dict[str, dict[str, torch.Tensor]] = {m: {} for m in nets.modules_by_name()}
    offset = 0
    for entry in meta["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += count * 4
        mod_name, _, key = entry["name"].partition(".")
        if mod_name not in states:
            raise CheckpointError(f"unknown module in manifest: {entry['name']}")
        states[mod_name][key] = torch.from_numpy(arr.astype(entry["dtype"]))

    for mod_name, module in nets.modules_by_name().items():
        current = module.state_dict()
        loaded = states[mod_name]
        if set(current) != set(loaded):
            raise CheckpointError(f"{mod_name}: tensor names do not match architecture")
        for key, tensor in loaded.items():
            if tuple(current[key].shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"{mod_name}.{key}: shape {tuple(tensor.shape)} does not match "
                    f"architecture {tuple(current[key].shape)}"
                )
        module.load_state_dict(loaded)
    nets.eval_mode()
    return nets, meta


# Default grids of the lambda sweep.
GRID_DIV = (1e-2, 1e-1, 1e0)
GRID_IN = (1e-7, 1e-8, 1e-9, 1e-10, 1e-11)
GRID_AUX = (1e-4, 1e-3, 1e-2)


def _grid_run(payload: dict) -> dict:
    """Train and evaluate one (cell, run) task; used by worker processes."""
    torch.set_num_threads(1)
    config: TrainConfig = payload["config"]
    try:
        nets, _ = train(payload["train_ds"], config, payload["arch"])
        report = evaluate_model(
            nets,
            payload["test_ds"],
            samples_per_condition=payload["samples_per_condition"],
            seed=(config.seed + 3) & _SEED_MASK,
        )
        return {
            "cell": payload["cell"],
            "run": payload["run"],
            "seed": config.seed,
            "status": "ok",
            "mean_ws": report.mean_ws,
        }
    except Exception as e:  # a failed cell must not abort the sweep
        return {
            "cell": payload["cell"],
            "run": payload["run"],
            "seed": config.seed,
            "status": "failed",
            "mean_ws": None,
            "error": f"{type(e).__name__}: {e}",
        }


def grid_search(
    dataset: dt.Dataset,
    base_config: TrainConfig,
    grid: dict | None = None,
    runs_per_cell: int = 5,
    arch_config: ArchitectureConfig | None = None,
    split_ratio: float = 0.8,
    split_seed: int = 0,
    samples_per_condition: int = 8,
    jobs: int = 1,
) -> list[dict]:
    """Sweep lambda combinations, training runs_per_cell models per cell and
    ranking cells by mean WS over their successful runs (ascending; cells with
    no successful run sort last). Run seeds are
    base_config.seed + 1000 * cell_index + run_index.
    """
    grid = grid or {}
    divs = list(grid.get("lambda_div", GRID_DIV))
    ins = list(grid.get("lambda_in", GRID_IN))
    auxs = list(grid.get("lambda_aux", GRID_AUX))
    if not divs or not ins or not auxs:
        raise ValueError("grid value lists must be non-empty")
    if runs_per_cell < 1:
        raise ValueError("runs_per_cell must be >= 1")

    train_ds, test_ds = dt.split(dataset, split_ratio, split_seed)
    cells = list(itertools.product(divs, ins, auxs))
    tasks = []
    for ci, (ld, li, la) in enumerate(cells):
        for run in range(runs_per_cell):
            cfg = dataclasses.replace(
                base_config,
                weights=LossWeights(lambda_div=ld, lambda_in=li, lambda_aux=la),
                seed=base_config.seed + 1000 * ci + run,
            )
            tasks.append(
                {
                    "cell": ci,
                    "run": run,
                    "config": cfg,
                    "arch": arch_config,
                    "train_ds": train_ds,
                    "test_ds": test_ds,
                    "samples_per_condition": samples_per_condition,
                }
            )

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, mp_context=get_context("spawn")) as pool:
            results = list(pool.map(_grid_run, tasks))
    else:
        results = [_grid_run(t) for t in tasks]

    rows = []
    for ci, (ld, li, la) in enumerate(cells):
        runs = sorted((r for r in results if r["cell"] == ci), key=lambda r: r["run"])
        ok = [r["mean_ws"] for r in runs if r["status"] == "ok"]
        rows.append(
            {
                "lambda_div": ld,
                "lambda_in": li,
                "lambda_aux": la,
                "runs": [
                    {k: r[k] for k in ("seed", "status", "mean_ws", "error") if k in r} for r in runs
                ],
                "mean_ws": float(np.mean(ok)) if ok else None,
            }
        )
    rows.sort(key=lambda r: (r["mean_ws"] is None, r["mean_ws"]))
    for rank, row in enumerate(rows):
        row["rank"] = rank
    return rows
