"""Training objectives, optimization loop, and chunk samplers.

Flow matching: chunks are noised along the straight path
x_t = (1-t) x0 + t eps and the network regresses the constant target
velocity (eps - x0); sampling integrates the learned field backwards
from Gaussian noise with uniform Euler steps. The diffusion baseline
uses a squared-cosine noise schedule with DDIM sampling.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Tensor, clip_grad_norm, save_checkpoint, zero_grads
from .dataset import NormStats, Sample, compute_norm_stats, prompt_payload, \
    render_prompt_boxes
from .errors import ConfigError, NumericError
from .model import ModelConfig, diffusion_forward, encode_condition, \
    velocity_forward

SCHEDULES = ("constant", "warmup", "linear", "cosine",
             "cosine_with_restarts", "polynomial")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 16
    epochs: int = 1
    grad_clip: float = 1.0
    schedule: str = "constant"
    warmup_steps: int = 0
    seed: int = 0
    weight_decay: float = 0.0
    validation_every: int = 2      # epochs between validation passes
    validation_batches: int = 16   # cap on validation batches
    num_cycles: int = 3            # cosine_with_restarts
    poly_power: float = 1.0
    end_lr: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("lr, batch_size, and epochs must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")


# --- time sampling ----------------------------------------------------------

def sample_flow_time(rng, size=None):
    """Flow times in [0.001, 1.0]: Beta(1.5, 1) by inverse CDF, then an
    affine squeeze t -> 0.999 t + 0.001 keeping t strictly positive."""
    u = rng.random(size)
    return 0.999 * u ** (1.0 / 1.5) + 0.001


# --- objectives --------------------------------------------------------------

def flow_interpolate(x0: np.ndarray, eps: np.ndarray, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1)
    return (1.0 - t) * x0 + t * eps


def flow_loss(x0: np.ndarray, eps: np.ndarray, t: np.ndarray, cond,
              config: ModelConfig, params: dict,
              velocity_fn=velocity_forward) -> Tensor:
    """MSE between the predicted velocity at the interpolated point and the
    straight-path target (eps - x0)."""
    x_t = flow_interpolate(x0, eps, t)
    pred = velocity_fn(x_t, np.asarray(t, dtype=np.float64), cond, config, params)
    return ad.mse_mean(pred, Tensor(eps - x0))


def ddpm_schedule(n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Squared-cosine noise schedule: returns (betas, alpha_bars).

    alpha_bar(s) = cos^2(((s/K + 0.008) / 1.008) * pi/2); per-step betas are
    clipped at 0.999.
    """
    s = np.arange(n_steps + 1) / n_steps
    f = np.cos((s + 0.008) / 1.008 * np.pi / 2.0) ** 2
    betas = np.minimum(1.0 - f[1:] / f[:-1], 0.999)
    alpha_bars = np.cumprod(1.0 - betas)
    return betas, alpha_bars


def ddpm_noise(x0: np.ndarray, eps: np.ndarray, k: np.ndarray,
               alpha_bars: np.ndarray) -> np.ndarray:
    ab = alpha_bars[np.asarray(k, dtype=np.int64)].reshape(-1, 1, 1)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddpm_loss(x0: np.ndarray, eps: np.ndarray, k: np.ndarray, cond,
              config: ModelConfig, params: dict, alpha_bars: np.ndarray,
              noise_fn=diffusion_forward) -> Tensor:
    x_k = ddpm_noise(x0, eps, k, alpha_bars)
    pred = noise_fn(x_k, np.asarray(k, dtype=np.int64), cond, config, params)
    return ad.mse_mean(pred, Tensor(eps))


# --- learning-rate schedules ------------------------------------------------------

def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.schedule == "constant":
        return config.lr
    if config.warmup_steps and step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    if config.schedule == "warmup":
        return config.lr
    span = max(total_steps - config.warmup_steps, 1)
    progress = min(max((step - config.warmup_steps) / span, 0.0), 1.0)
    if config.schedule == "linear":
        return config.lr * (1.0 - progress)
    if config.schedule == "cosine":
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    if config.schedule == "cosine_with_restarts":
        if progress >= 1.0:
            return 0.0
        cycle_pos = (progress * config.num_cycles) % 1.0
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * cycle_pos))
    # polynomial
    return (config.lr - config.end_lr) * (1.0 - progress) ** config.poly_power \
        + config.end_lr


# --- data preparation ----------------------------------------------------------------

@dataclass
class TrainData:
    """In-memory training arrays: one row per sample."""
    first: np.ndarray             # (S, size, size, 3) uint8, prompt-rendered
    current: np.ndarray           # (S, size, size, 3) uint8
    history: np.ndarray           # (S, K, 10)
    future: np.ndarray            # (S, H, 10), unnormalized
    payloads: list = field(default_factory=list)
    is_final: np.ndarray = None   # (S,) bool
    keys: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.future)


def prepare_data(samples: list[Sample], variant: str, annotations: dict,
                 image_size: tuple[int, int]) -> TrainData:
    """Materialize samples into arrays, rendering prompt boxes into the
    first frame for the vision variants. First frames are cached per
    episode since every sample of an episode shares one."""
    first_cache: dict[str, np.ndarray] = {}
    firsts, currents, history, future, payloads, finals, keys = \
        [], [], [], [], [], [], []
    for s in samples:
        key = s.record.key
        ann = annotations.get(key)
        payload = prompt_payload(variant, ann, image_size)
        if key not in first_cache:
            frame = s.first_frame()
            if payload["render"]:
                frame = render_prompt_boxes(frame, ann.object_box, ann.target_box)
            first_cache[key] = frame
        firsts.append(first_cache[key])
        currents.append(s.current_frame())
        history.append(s.action_history)
        future.append(s.future_actions)
        payloads.append(payload)
        finals.append(s.is_final_chunk)
        keys.append((key, s.timestep))
    return TrainData(first=np.stack(firsts), current=np.stack(currents),
                     history=np.stack(history), future=np.stack(future),
                     payloads=payloads, is_final=np.array(finals, dtype=bool),
                     keys=keys)


def _batch_loss(data: TrainData, idx: np.ndarray, stats: NormStats,
                model_config: ModelConfig, params: dict, rng,
                alpha_bars: np.ndarray | None) -> Tensor:
    x0 = stats.normalize(data.future[idx])
    hist = stats.normalize(data.history[idx])
    cond = encode_condition(params, model_config, data.first[idx],
                            data.current[idx], hist,
                            [data.payloads[i] for i in idx])
    eps = rng.standard_normal(x0.shape)
    if model_config.head == "flow":
        t = sample_flow_time(rng, len(idx))
        return flow_loss(x0, eps, t, cond, model_config, params)
    k = rng.integers(model_config.diffusion_steps, size=len(idx))
    return ddpm_loss(x0, eps, k, cond, model_config, params, alpha_bars)


def train(params: dict, model_config: ModelConfig, data: TrainData,
          config: TrainConfig, out_dir=None, val_data: TrainData | None = None,
          stats: NormStats | None = None) -> dict:
    """Seeded shuffled mini-batch training with gradient clipping and AdamW.

    Returns {"params", "stats", "log", "val_log"}; when ``out_dir`` is given
    also writes train_log.csv, the run config echo, and checkpoints.
    """
    if stats is None:
        stats = compute_norm_stats(data.future)
    trainable = {k: p for k, p in params.items()
                 if not (model_config.freeze_tokenizer and k.startswith("tok."))}
    optimizer = AdamW(trainable, lr=config.lr, weight_decay=config.weight_decay)
    alpha_bars = None
    if model_config.head == "diffusion":
        _, alpha_bars = ddpm_schedule(model_config.diffusion_steps)

    rng = np.random.default_rng(config.seed)
    n = len(data)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    log: list[tuple[int, float, float]] = []
    val_log: list[tuple[int, float]] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        echo = {"train": vars(config), "model": vars(model_config)}
        (out_dir / "run_config.json").write_text(json.dumps(echo, indent=1,
                                                            sort_keys=True))

    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            if idx.size == 0:
                continue
            optimizer.lr = lr_at(config, step, total_steps)
            zero_grads(trainable)
            try:
                loss = _batch_loss(data, idx, stats, model_config, params,
                                   rng, alpha_bars)
                ad.backward(loss)
            except NumericError:
                if out_dir is not None:
                    save_checkpoint(out_dir / "abort_snapshot.ptck", params,
                                    extra={"step": step, "epoch": epoch,
                                           "reason": "non-finite loss"})
                raise
            for p in trainable.values():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            clip_grad_norm(trainable, config.grad_clip)
            optimizer.step()
            log.append((step, optimizer.lr, float(loss.data)))
            step += 1
        if val_data is not None and (epoch + 1) % config.validation_every == 0:
            val_log.append((step, validate(params, model_config, val_data,
                                           config, stats)))
            if out_dir is not None:
                save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1}.ptck",
                                params, optimizer,
                                extra=_ckpt_extra(stats, model_config, step))

    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_final.ptck", params, optimizer,
                        extra=_ckpt_extra(stats, model_config, step))
        with open(out_dir / "train_log.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "lr", "loss"])
            w.writerows(log)
        if val_log:
            with open(out_dir / "val_log.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["step", "val_loss"])
                w.writerows(val_log)
    return {"params": params, "stats": stats, "log": log, "val_log": val_log}


def _ckpt_extra(stats: NormStats, model_config: ModelConfig, step: int) -> dict:
    return {"norm_stats": stats.to_dict(), "model_config": vars(model_config),
            "step": step}


def validate(params: dict, model_config: ModelConfig, val_data: TrainData,
             config: TrainConfig, stats: NormStats) -> float:
    """Mean objective over a capped number of deterministic batches."""
    rng = np.random.default_rng([config.seed, 99991])
    alpha_bars = None
    if model_config.head == "diffusion":
        _, alpha_bars = ddpm_schedule(model_config.diffusion_steps)
    n = len(val_data)
    n_batches = min(config.validation_batches,
                    max(1, math.ceil(n / config.batch_size)))
    losses = []
    for b in range(n_batches):
        idx = np.arange(b * config.batch_size, min((b + 1) * config.batch_size, n))
        if idx.size == 0:
            break
        loss = _batch_loss(val_data, idx, stats, model_config, params, rng,
                           alpha_bars)
        losses.append(float(loss.data))
    return float(np.mean(losses))


# --- samplers ---------------------------------------------------------------------

def euler_sample(velocity_fn, noise: np.ndarray, steps: int = 10) -> np.ndarray:
    """Integrate x' = -v(x, t) from t=1 (pure noise) to t=0 with uniform
    Euler steps; ``velocity_fn(x, t) -> array``."""
    if steps < 1:
        raise ConfigError("euler_sample: steps must be >= 1")
    x = np.array(noise, dtype=np.float64)
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        x = x - dt * np.asarray(velocity_fn(x, t))
    return x


def ddim_sample(noise_fn, noise: np.ndarray, alpha_bars: np.ndarray,
                steps: int = 10) -> np.ndarray:
    """Deterministic DDIM (eta = 0) over an evenly spaced timestep subset;
    ``noise_fn(x, k) -> predicted noise``."""
    if steps < 1:
        raise ConfigError("ddim_sample: steps must be >= 1")
    n = len(alpha_bars)
    taus = np.linspace(n - 1, 0, steps).round().astype(int)
    x = np.array(noise, dtype=np.float64)
    for i, k in enumerate(taus):
        ab = alpha_bars[k]
        ab_prev = alpha_bars[taus[i + 1]] if i + 1 < len(taus) else 1.0
        eps_hat = np.asarray(noise_fn(x, int(k)))
        x0_hat = (x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
        x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat
    return x


def sample_chunks(params: dict, model_config: ModelConfig, cond,
                  stats: NormStats, noise: np.ndarray, steps: int = 10) -> np.ndarray:
    """Head-appropriate sampling from given initial noise, denormalized."""
    if model_config.head == "flow":
        def vfn(x, t):
            tt = np.full(x.shape[0], t)
            return velocity_forward(x, tt, cond, model_config, params).data
        out = euler_sample(vfn, noise, steps)
    else:
        _, alpha_bars = ddpm_schedule(model_config.diffusion_steps)

        def nfn(x, k):
            kk = np.full(x.shape[0], k, dtype=np.int64)
            return diffusion_forward(x, kk, cond, model_config, params).data
        out = ddim_sample(nfn, noise, alpha_bars, steps)
    return stats.denormalize(out)
