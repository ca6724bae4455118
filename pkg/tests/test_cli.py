"""Command-line behavior: commands, config precedence, exit codes."""

import numpy as np
import pytest

from r2restore.cli import (EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_USAGE,
                           dispatch, parse_config)
from r2restore.data import read_image_array, write_image
from r2restore.errors import ConfigError
from r2restore.model import ModelConfig, build_model, save_checkpoint


@pytest.fixture
def corpus(tmp_path):
    rng = np.random.default_rng(0)
    names = []
    for i in range(3):
        p = tmp_path / f"img{i}.ppm"
        yy, xx = np.mgrid[0:48, 0:48] / 48
        img = np.clip(0.3 + 0.4 * xx + 0.2 * np.sin(4 * yy + i), 0, 1)
        write_image(np.stack([img] * 3)[None], p)
        names.append(p.name)
    man = tmp_path / "manifest.txt"
    man.write_text("\n".join(f"clean={n}" for n in names) + "\n")
    return man


@pytest.fixture
def tiny_ckpt(tmp_path):
    model = build_model(ModelConfig(width=4, num_eam=1, reduction=4, seed=0),
                        dtype=np.float32)
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(model, path)
    return path


class TestParseConfig:
    def test_empty_config_gives_defaults(self, tmp_path):
        cfg_path = tmp_path / "empty.cfg"
        cfg_path.write_text("# nothing here\n")
        run = parse_config(cfg_path)
        model_cfg = run.model_config()
        train_cfg = run.train_config()
        assert model_cfg.width == 64 and model_cfg.num_eam == 4
        assert model_cfg.reduction == 16
        assert train_cfg.batch == 32 and train_cfg.patch == 80
        assert train_cfg.lr == 1e-4 and train_cfg.halve_every == 100_000

    def test_divisibility_constraint_error(self, tmp_path):
        cfg_path = tmp_path / "bad.cfg"
        cfg_path.write_text("width = 65\nreduction = 16\n")
        with pytest.raises(ConfigError):
            parse_config(cfg_path)

    def test_unknown_key_is_error_with_line(self, tmp_path):
        cfg_path = tmp_path / "bad.cfg"
        cfg_path.write_text("widht = 64\n")
        with pytest.raises(ConfigError, match="2" if False else "widht"):
            parse_config(cfg_path)

    def test_flag_overrides_file(self, tmp_path):
        cfg_path = tmp_path / "a.cfg"
        cfg_path.write_text("lr = 1e-4\n")
        run = parse_config(cfg_path, {"lr": "2e-4"})
        assert run.train_config().lr == 2e-4

    def test_type_error_names_key(self, tmp_path):
        cfg_path = tmp_path / "t.cfg"
        cfg_path.write_text("width = soon\n")
        with pytest.raises(ConfigError, match="width"):
            parse_config(cfg_path)

    def test_comments_and_blank_lines(self, tmp_path):
        cfg_path = tmp_path / "c.cfg"
        cfg_path.write_text("\n# full width\nwidth = 32  # inline\n\n")
        assert parse_config(cfg_path).model_config().width == 32


class TestSummary:
    def test_default_param_count(self, capsys):
        assert dispatch(["summary"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "params=1499347" in out

    def test_summary_with_config(self, tmp_path, capsys):
        cfg_path = tmp_path / "default_color.cfg"
        cfg_path.write_text("")
        assert dispatch(["summary", "--config", str(cfg_path)]) == EXIT_OK
        assert "params=1499347" in capsys.readouterr().out

    def test_summary_override(self, capsys):
        assert dispatch(["summary", "--width", "8", "--num-eam", "1",
                         "--reduction", "4"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "params=" in out and "params=1499347" not in out


class TestExitCodes:
    def test_usage_error_is_2(self):
        assert dispatch(["no-such-command"]) == EXIT_USAGE
        assert dispatch([]) == EXIT_USAGE
        assert dispatch(["restore", "--out", "x"]) == EXIT_USAGE  # missing checkpoint

    def test_config_error_is_3(self, tmp_path):
        cfg_path = tmp_path / "bad.cfg"
        cfg_path.write_text("width = 65\n")
        assert dispatch(["summary", "--config", str(cfg_path)]) == EXIT_CONFIG

    def test_io_error_is_4(self, tmp_path, corpus):
        missing = str(tmp_path / "none.ckpt")
        assert dispatch(["eval", "--checkpoint", missing, "--manifest", str(corpus),
                         "--out", str(tmp_path / "o")]) == EXIT_IO

    def test_format_error_is_4(self, tmp_path, corpus):
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"not a checkpoint at all")
        assert dispatch(["eval", "--checkpoint", str(junk), "--manifest", str(corpus),
                         "--out", str(tmp_path / "o")]) == EXIT_IO

    def test_bad_spec_line_is_4(self, tmp_path, corpus):
        assert dispatch(["degrade", "--manifest", str(corpus),
                         "--spec", "nonsense", "--out", str(tmp_path / "d")]) == EXIT_IO

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_numeric_abort_is_5(self, tmp_path):
        from r2restore.cli import EXIT_NUMERIC
        # finite but enormous weights overflow float32 during forward
        model = build_model(ModelConfig(width=4, num_eam=1, reduction=4), dtype=np.float32)
        for _, t in model.named_parameters():
            t.data[:] = 1e30
        ckpt = tmp_path / "hot.ckpt"
        save_checkpoint(model, ckpt)
        img = tmp_path / "x.ppm"
        write_image(np.random.default_rng(0).random((1, 3, 16, 16)), img)
        assert dispatch(["restore", "--checkpoint", str(ckpt),
                         "--out", str(tmp_path / "o"), str(img)]) == EXIT_NUMERIC

    def test_interrupt_during_train_writes_checkpoint(self, tmp_path, corpus, monkeypatch):
        import r2restore.cli as cli_mod

        def interrupted(*args, **kwargs):
            raise KeyboardInterrupt

        monkeypatch.setattr(cli_mod, "train", interrupted)
        run_dir = tmp_path / "run"
        code = dispatch(["train", "--manifest", str(corpus),
                         "--spec", "kind=awgn sigma=25 seed=0",
                         "--out", str(run_dir),
                         "--width", "4", "--num-eam", "1", "--reduction", "4",
                         "--iters", "50", "--batch", "2", "--patch", "16"])
        assert code == EXIT_OK
        assert (run_dir / "model.ckpt").exists()


class TestDegrade:
    def test_deterministic_output_files(self, tmp_path, corpus):
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        spec = "kind=awgn sigma=25 seed=7"
        assert dispatch(["degrade", "--manifest", str(corpus), "--spec", spec,
                         "--out", str(out1)]) == EXIT_OK
        assert dispatch(["degrade", "--manifest", str(corpus), "--spec", spec,
                         "--out", str(out2)]) == EXIT_OK
        files1 = sorted(p.name for p in out1.iterdir())
        files2 = sorted(p.name for p in out2.iterdir())
        assert files1 == files2 and len(files1) == 7  # 3 pairs + manifest
        for name in files1:
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_writes_paired_manifest(self, tmp_path, corpus):
        out = tmp_path / "d"
        dispatch(["degrade", "--manifest", str(corpus),
                  "--spec", "kind=awgn sigma=15 seed=1", "--out", str(out)])
        lines = (out / "manifest.txt").read_text().strip().splitlines()
        assert len(lines) == 3
        assert all("degraded=" in line for line in lines)

    def test_no_writes_outside_out_dir(self, tmp_path, corpus):
        out = tmp_path / "dd"
        before = set(p.name for p in tmp_path.iterdir())
        dispatch(["degrade", "--manifest", str(corpus),
                  "--spec", "kind=awgn sigma=15 seed=1", "--out", str(out)])
        after = set(p.name for p in tmp_path.iterdir())
        assert after - before == {"dd"}


class TestTrainRestoreEval:
    def test_train_restore_eval_pipeline(self, tmp_path, corpus, capsys):
        run_dir = tmp_path / "run"
        code = dispatch(["train", "--manifest", str(corpus),
                         "--spec", "kind=awgn sigma=25 seed=0",
                         "--out", str(run_dir),
                         "--width", "4", "--num-eam", "1", "--reduction", "4",
                         "--iters", "4", "--batch", "2", "--patch", "16",
                         "--seed", "1"])
        assert code == EXIT_OK
        assert (run_dir / "model.ckpt").exists()
        assert (run_dir / "resolved.cfg").exists()
        assert (run_dir / "train_log.csv").read_text().count("\n") == 5  # header + 4

        noisy = tmp_path / "noisy.ppm"
        rng = np.random.default_rng(5)
        write_image(rng.random((1, 3, 24, 24)), noisy)
        out_dir = tmp_path / "restored"
        assert dispatch(["restore", "--checkpoint", str(run_dir / "model.ckpt"),
                         "--out", str(out_dir), str(noisy)]) == EXIT_OK
        assert (out_dir / "noisy_restored.ppm").exists()
        assert (out_dir / "noisy_restored.png").exists()
        ppm = read_image_array(out_dir / "noisy_restored.ppm", dtype=np.float64)
        png = read_image_array(out_dir / "noisy_restored.png", dtype=np.float64)
        np.testing.assert_array_equal(ppm, png)

        eval_dir = tmp_path / "eval"
        assert dispatch(["eval", "--checkpoint", str(run_dir / "model.ckpt"),
                         "--manifest", str(corpus),
                         "--spec", "kind=awgn sigma=25 seed=3",
                         "--out", str(eval_dir)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "mean_psnr=" in out and "mean_ssim=" in out
        assert (eval_dir / "eval.csv").exists()

    def test_restore_with_ensemble_flag(self, tmp_path, tiny_ckpt):
        img = tmp_path / "x.ppm"
        write_image(np.random.default_rng(1).random((1, 3, 16, 16)), img)
        out_dir = tmp_path / "ens"
        assert dispatch(["restore", "--checkpoint", str(tiny_ckpt), "--ensemble",
                         "--out", str(out_dir), str(img)]) == EXIT_OK
        assert (out_dir / "x_restored.ppm").exists()

    def test_train_resume_via_flag(self, tmp_path, corpus):
        run_dir = tmp_path / "run"
        base = ["train", "--manifest", str(corpus),
                "--spec", "kind=awgn sigma=25 seed=0", "--out", str(run_dir),
                "--width", "4", "--num-eam", "1", "--reduction", "4",
                "--batch", "2", "--patch", "16", "--seed", "1"]
        assert dispatch(base + ["--iters", "2"]) == EXIT_OK
        assert dispatch(base + ["--iters", "4",
                                "--checkpoint", str(run_dir / "model.ckpt")]) == EXIT_OK
        lines = (run_dir / "train_log.csv").read_text().strip().splitlines()
        assert [line.split(",")[0] for line in lines[1:]] == ["1", "2", "3", "4"]


class TestThreadCap:
    def test_invalid_thread_env_is_config_error(self, monkeypatch):
        monkeypatch.setenv("R2RESTORE_THREADS", "lots")
        assert dispatch(["summary"]) == EXIT_CONFIG

    def test_thread_cap_applies(self, monkeypatch, capsys):
        import threadpoolctl
        saved = {info["filepath"]: info["num_threads"]
                 for info in threadpoolctl.threadpool_info()}
        try:
            monkeypatch.setenv("R2RESTORE_THREADS", "1")
            assert dispatch(["summary"]) == EXIT_OK
            limits = {info["user_api"]: info["num_threads"]
                      for info in threadpoolctl.threadpool_info()}
            assert limits.get("blas") == 1
        finally:
            for info in threadpoolctl.threadpool_info():
                threadpoolctl.threadpool_limits(saved[info["filepath"]])
