"""Adam training of the restoration loss with a halving learning-rate
schedule.

Each iteration draws its batch from a counter-based generator keyed by
(seed, iteration), so an interrupted run resumed from a checkpoint
reproduces the uninterrupted loss log exactly; the optimizer moments ride
along inside the checkpoint as extra tensors.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .data import Manifest, sample_patch_batch
from .errors import NumericError, ParameterError
from .model import Model, save_checkpoint
from .tensor import Tape, Tensor, backward, l1_loss

__all__ = ["TrainConfig", "AdamState", "adam_step", "lr_at", "train", "TrainResult",
           "load_training_state"]


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 32
    patch: int = 80
    lr: float = 1e-4
    halve_every: int = 100_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_iters: int = 200_000
    ckpt_every: int = 1000
    log_every: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.batch < 1 or self.patch < 1:
            raise ParameterError("batch and patch must be positive")
        if self.lr <= 0 or self.halve_every < 1:
            raise ParameterError("lr must be positive and halve_every >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ParameterError("invalid Adam hyperparameters")
        if self.total_iters < 0:
            raise ParameterError("total_iters must be >= 0")


class AdamState:
    """First/second moment arrays per parameter plus the step counter."""

    def __init__(self, named_params: list[tuple[str, Tensor]]):
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}
        self.t = 0

    def extra_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("adam.t", np.array([self.t], dtype=np.float32))]
        out.extend((f"adam.m.{k}", v) for k, v in self.m.items())
        out.extend((f"adam.v.{k}", v) for k, v in self.v.items())
        return out

    @staticmethod
    def from_arrays(named_params: list[tuple[str, Tensor]],
                    arrays: dict[str, np.ndarray]) -> "AdamState":
        state = AdamState(named_params)
        state.t = int(arrays["adam.t"][0])
        for name, p in named_params:
            state.m[name] = np.ascontiguousarray(arrays[f"adam.m.{name}"], dtype=p.data.dtype)
            state.v[name] = np.ascontiguousarray(arrays[f"adam.v.{name}"], dtype=p.data.dtype)
        return state


def adam_step(named_params: list[tuple[str, Tensor]], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    Parameters without a gradient (never reached by the loss) keep their
    zero moments and do not move.
    """
    if lr <= 0:
        raise ParameterError("lr must be positive")
    state.t += 1
    t = state.t
    correct1 = 1.0 - beta1 ** t
    correct2 = 1.0 - beta2 ** t
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ParameterError(f"gradient shape {g.shape} mismatches {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        m_hat = m / correct1
        v_hat = v / correct2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Initial rate halved after every ``halve_every`` iterations."""
    if iteration < 0:
        raise ParameterError("iteration must be >= 0")
    return cfg.lr * 0.5 ** (iteration // cfg.halve_every)


@dataclass
class TrainResult:
    loss_log: list[tuple[int, float, float]]  # (iteration, lr, loss)
    aborted: bool = False
    abort_reason: str | None = None
    checkpoint_path: str | None = None


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(iteration)]))


def train(model: Model, manifest: Manifest, cfg: TrainConfig,
          out_dir: str | os.PathLike | None = None,
          adam: AdamState | None = None,
          on_iteration=None) -> TrainResult:
    """Sample batch, forward, L1 loss, backward, Adam step, repeat.

    Resumes from ``model.iteration``. Writes ``train_log.csv`` and cadence
    checkpoints under ``out_dir`` when given. A non-finite loss (or any
    non-finite intermediate) aborts the run, keeping the last cadence
    checkpoint on disk untouched.
    """
    cfg.validate()
    named = model.named_parameters()
    if adam is None:
        adam = AdamState(named)
    sr_scale = model.config.scale if model.config.task == "super_resolve" else None

    log: list[tuple[int, float, float]] = []
    ckpt_path = None
    log_path = None
    log_file = None
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "model.ckpt")
        log_path = os.path.join(out_dir, "train_log.csv")
        resuming = model.iteration > 0 and os.path.exists(log_path)
        log_file = open(log_path, "a" if resuming else "w", newline="")
        writer = csv.writer(log_file)
        if not resuming:
            writer.writerow(["iter", "lr", "loss"])

    recent: list[float] = []
    aborted = False
    reason = None
    try:
        while model.iteration < cfg.total_iters:
            step = model.iteration
            rng = _iteration_rng(cfg.seed, step)
            batch = sample_patch_batch(manifest, cfg.batch, cfg.patch, rng,
                                       sr_scale=sr_scale,
                                       dtype=model.dtype)
            rate = lr_at(step, cfg)
            try:
                tape = Tape()
                with tape:
                    pred = model.forward(Tensor(batch.inputs, _checked=True))
                    loss = l1_loss(pred, Tensor(batch.targets, _checked=True))
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise NumericError(f"loss is non-finite at iteration {step}")
                model.zero_grad()
                backward(tape, loss, params=model.parameters())
                tape.clear()
                adam_step(named, adam, rate, cfg.beta1, cfg.beta2, cfg.eps)
            except NumericError as exc:
                aborted = True
                reason = str(exc)
                break

            model.iteration = step + 1
            log.append((model.iteration, rate, loss_value))
            if writer is not None:
                writer.writerow([model.iteration, f"{rate:.8g}", f"{loss_value:.8g}"])
            recent.append(loss_value)
            if len(recent) > 100:
                recent.pop(0)
            if ckpt_path is not None and model.iteration % cfg.ckpt_every == 0:
                save_checkpoint(model, ckpt_path, extra=adam.extra_tensors())
            if on_iteration is not None:
                on_iteration(model.iteration, loss_value, float(np.mean(recent)))
    finally:
        if log_file is not None:
            log_file.close()

    if ckpt_path is not None and not aborted:
        save_checkpoint(model, ckpt_path, extra=adam.extra_tensors())
    return TrainResult(loss_log=log, aborted=aborted, abort_reason=reason,
                       checkpoint_path=ckpt_path)


def load_training_state(path: str | os.PathLike,
                        dtype=np.float32) -> tuple[Model, AdamState]:
    """Rebuild model and optimizer moments from a training checkpoint."""
    from .model import load_checkpoint, read_checkpoint

    model = load_checkpoint(path, dtype=dtype)
    _, _, arrays = read_checkpoint(path)
    named = model.named_parameters()
    if "adam.t" in arrays:
        adam = AdamState.from_arrays(named, arrays)
    else:
        adam = AdamState(named)
    return model, adam
