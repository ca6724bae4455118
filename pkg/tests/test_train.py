"""Adam updates, schedule, training loop determinism, resume, abort."""

import numpy as np
import pytest

from r2restore.data import load_manifest, write_image
from r2restore.degrade import DegradationSpec, awgn
from r2restore.errors import ParameterError
from r2restore.model import ModelConfig, build_model, load_checkpoint
from r2restore.tensor import Tape, Tensor, backward, l1_loss
from r2restore.train import (AdamState, TrainConfig, adam_step,
                             load_training_state, lr_at, train)


def named_scalar(value, name="p"):
    t = Tensor(np.full((1, 1, 1, 1), value, dtype=np.float64), requires_grad=True, name=name)
    return [(name, t)], t


class TestAdamStep:
    def test_first_step_magnitude(self):
        named, p = named_scalar(0.0)
        state = AdamState(named)
        p.grad = np.ones_like(p.data)
        adam_step(named, state, lr=1e-4)
        assert abs(p.data.reshape(-1)[0] + 1e-4) < 1e-10
        assert state.t == 1

    def test_zero_gradient_never_moves(self):
        named, p = named_scalar(0.7)
        state = AdamState(named)
        for _ in range(50):
            p.grad = np.zeros_like(p.data)
            adam_step(named, state, lr=1e-2)
        assert p.data.reshape(-1)[0] == 0.7

    def test_quadratic_converges(self):
        named, p = named_scalar(1.0)
        state = AdamState(named)
        for _ in range(200):
            p.grad = 2.0 * p.data  # d/dtheta theta^2
            adam_step(named, state, lr=0.1)
        assert abs(p.data.reshape(-1)[0]) < 0.05

    def test_matches_independent_scalar_reference(self):
        rng = np.random.default_rng(0)
        named, p = named_scalar(rng.normal())
        state = AdamState(named)
        beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 3e-3

        # independent scalar transcription of the update rule
        theta = float(p.data.reshape(-1)[0])
        m = v = 0.0
        for t in range(1, 31):
            g = float(rng.normal())
            p.grad = np.full_like(p.data, g)
            adam_step(named, state, lr, beta1, beta2, eps)
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
            assert abs(theta - float(p.data.reshape(-1)[0])) < 1e-12

    def test_missing_grad_treated_as_zero(self):
        named, p = named_scalar(0.3)
        state = AdamState(named)
        p.grad = None
        adam_step(named, state, lr=1e-2)
        assert p.data.reshape(-1)[0] == 0.3

    def test_lr_validation(self):
        named, _ = named_scalar(0.0)
        with pytest.raises(ParameterError):
            adam_step(named, AdamState(named), lr=0.0)


class TestSchedule:
    def test_halving_schedule_points(self):
        cfg = TrainConfig(lr=1e-4, halve_every=100_000)
        assert lr_at(0, cfg) == 1e-4
        assert lr_at(100_000, cfg) == 5e-5
        assert lr_at(200_000, cfg) == 2.5e-5
        assert lr_at(99_999, cfg) == 1e-4

    def test_negative_iteration(self):
        with pytest.raises(ParameterError):
            lr_at(-1, TrainConfig())


def make_corpus(tmp_path, count=3, size=48, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    names = []
    for i in range(count):
        img = 0.3 + 0.4 * ((i + 1) * xx + yy) / (i + 2)
        img = img + 0.1 * np.sin(2 * np.pi * (xx * rng.uniform(1, 3) + yy))
        arr = np.clip(np.stack([img] * 3)[None], 0, 1)
        p = tmp_path / f"c{i}.ppm"
        write_image(arr, p)
        names.append(p.name)
    man = tmp_path / "manifest.txt"
    man.write_text("\n".join(f"clean={n}" for n in names) + "\n")
    return man


def tiny_model(seed=0, **kw):
    cfg = dict(width=4, num_eam=1, reduction=4, seed=seed)
    cfg.update(kw)
    return build_model(ModelConfig(**cfg), dtype=np.float32)


class TestTrainLoop:
    def test_zero_iterations_returns_init(self, tmp_path):
        man = load_manifest(make_corpus(tmp_path),
                            degradation=DegradationSpec("awgn", sigma=25, seed=0))
        model = tiny_model()
        init = {n: t.data.copy() for n, t in model.named_parameters()}
        result = train(model, man, TrainConfig(batch=2, patch=16, total_iters=0),
                       out_dir=tmp_path / "run")
        assert result.loss_log == []
        loaded = load_checkpoint(tmp_path / "run" / "model.ckpt")
        for n, t in loaded.named_parameters():
            np.testing.assert_array_equal(t.data, init[n])

    def test_two_runs_same_seed_identical_logs(self, tmp_path):
        man = load_manifest(make_corpus(tmp_path),
                            degradation=DegradationSpec("awgn", sigma=25, seed=1))
        cfg = TrainConfig(batch=2, patch=16, total_iters=8, seed=5, ckpt_every=100)
        r1 = train(tiny_model(seed=3), man, cfg)
        r2 = train(tiny_model(seed=3), man, cfg)
        assert r1.loss_log == r2.loss_log

    def test_interrupted_resume_reproduces_log(self, tmp_path):
        man = load_manifest(make_corpus(tmp_path),
                            degradation=DegradationSpec("awgn", sigma=25, seed=2))
        full_cfg = TrainConfig(batch=2, patch=16, total_iters=12, seed=9, ckpt_every=6)
        uninterrupted = train(tiny_model(seed=4), man, full_cfg, out_dir=tmp_path / "full")

        part_cfg = TrainConfig(batch=2, patch=16, total_iters=6, seed=9, ckpt_every=6)
        train(tiny_model(seed=4), man, part_cfg, out_dir=tmp_path / "part")
        model, adam = load_training_state(tmp_path / "part" / "model.ckpt")
        assert model.iteration == 6 and adam.t == 6
        resumed = train(model, man, full_cfg, out_dir=tmp_path / "part", adam=adam)

        assert resumed.loss_log == uninterrupted.loss_log[6:]
        full_csv = (tmp_path / "full" / "train_log.csv").read_text()
        part_csv = (tmp_path / "part" / "train_log.csv").read_text()
        assert full_csv == part_csv

    def test_single_step_descends_on_frozen_batch(self, tmp_path):
        from r2restore.data import sample_patch_batch
        man = load_manifest(make_corpus(tmp_path, size=40),
                            degradation=DegradationSpec("awgn", sigma=25, seed=3))
        wins = 0
        trials = 100
        for trial in range(trials):
            model = tiny_model(seed=trial)
            rng = np.random.Generator(np.random.Philox(key=[trial, 77]))
            batch = sample_patch_batch(man, 2, 16, rng, dtype=np.float32)
            x = Tensor(batch.inputs, _checked=True)
            y = Tensor(batch.targets, _checked=True)
            named = model.named_parameters()
            adam = AdamState(named)

            tape = Tape()
            with tape:
                before = l1_loss(model.forward(x), y)
            model.zero_grad()
            backward(tape, before, params=model.parameters())
            adam_step(named, adam, lr=1e-4)
            after = l1_loss(model.forward(x), y)
            if after.item() < before.item():
                wins += 1
        assert wins >= 95

    def test_nan_injection_aborts_and_keeps_last_checkpoint(self, tmp_path):
        man = load_manifest(make_corpus(tmp_path),
                            degradation=DegradationSpec("awgn", sigma=25, seed=4))
        model = tiny_model(seed=5)

        def sabotage(iteration, loss, running):
            if iteration == 4:
                model.head.weight.data[0, 0, 0, 0] = np.nan

        cfg = TrainConfig(batch=2, patch=16, total_iters=10, seed=1, ckpt_every=2)
        result = train(model, man, cfg, out_dir=tmp_path / "run", on_iteration=sabotage)
        assert result.aborted
        assert "non-finite" in result.abort_reason
        assert len(result.loss_log) == 4
        restored = load_checkpoint(tmp_path / "run" / "model.ckpt")
        assert restored.iteration == 4  # last cadence save before the abort
        assert np.isfinite(restored.head.weight.data).all()

    def test_log_is_finite_everywhere(self, tmp_path):
        man = load_manifest(make_corpus(tmp_path),
                            degradation=DegradationSpec("awgn", sigma=25, seed=5))
        result = train(tiny_model(seed=6), man,
                       TrainConfig(batch=2, patch=16, total_iters=5, seed=2, ckpt_every=100))
        assert all(np.isfinite(loss) for _, _, loss in result.loss_log)

    def test_overfit_smoke_single_patch(self, tmp_path):
        # memorize one fixed noisy->clean pair; loss must collapse
        rng = np.random.default_rng(7)
        yy, xx = np.mgrid[0:64, 0:64] / 64
        clean = np.clip(0.25 + 0.5 * xx + 0.15 * np.sin(6 * yy), 0, 1)
        clean = np.stack([clean] * 3)[None]
        noisy = awgn(clean, 25.0, seed=13)
        cp, np_ = tmp_path / "clean.ppm", tmp_path / "noisy.ppm"
        write_image(clean, cp)
        write_image(np.clip(noisy, 0, 1), np_)
        man_path = tmp_path / "m.txt"
        man_path.write_text(f"clean={cp.name} degraded={np_.name}\n")
        man = load_manifest(man_path)

        model = tiny_model(seed=8, width=8, reduction=4)
        cfg = TrainConfig(batch=8, patch=32, lr=1e-3, total_iters=500,
                          seed=3, ckpt_every=10_000)
        result = train(model, man, cfg)
        initial = np.mean([loss for _, _, loss in result.loss_log[:10]])
        final = np.mean([loss for _, _, loss in result.loss_log[-10:]])
        assert final < 0.2 * initial
