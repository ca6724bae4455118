"""Command-line orchestration.

Subcommands: degrade, train, restore, eval, gradcheck, summary. Settings
come from a line-oriented `key = value` config file overridden by flags
(flags win); the fully resolved config is echoed into the run directory.
Exit codes: 2 usage, 3 config, 4 I/O, 5 numeric abort.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .data import (load_manifest, read_image_array, tile_large_image,
                   write_image)
from .degrade import DegradationSpec
from .errors import (ConfigError, FormatError, NumericError, ParameterError)
from .metrics import evaluate
from .model import (Model, ModelConfig, build_model, load_checkpoint,
                    param_count_from_config, save_checkpoint,
                    self_ensemble_forward)
from .tensor import Tensor
from .train import TrainConfig, load_training_state, train

__all__ = ["dispatch", "main", "parse_config", "RunConfig"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERIC = 5


# ---------------------------------------------------------------------------
# configuration schema

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, validator, default source)
_SCHEMA = {
    "in_channels": (int, lambda v: v in (1, 3)),
    "out_channels": (int, lambda v: v in (1, 3)),
    "width": (int, lambda v: v >= 1),
    "num_eam": (int, lambda v: v >= 1),
    "reduction": (int, lambda v: v >= 1),
    "lsc": (_parse_bool, None),
    "ssc": (_parse_bool, None),
    "lc": (_parse_bool, None),
    "fa": (_parse_bool, None),
    "task": (str, lambda v: v in ("restore", "super_resolve")),
    "scale": (int, lambda v: v in (2, 3, 4)),
    "shrink_lambda": (float, lambda v: v > 0),
    "seed": (int, None),
    "batch": (int, lambda v: v >= 1),
    "patch": (int, lambda v: v >= 1),
    "lr": (float, lambda v: v > 0),
    "halve_every": (int, lambda v: v >= 1),
    "beta1": (float, lambda v: 0 <= v < 1),
    "beta2": (float, lambda v: 0 <= v < 1),
    "eps": (float, lambda v: v > 0),
    "total_iters": (int, lambda v: v >= 0),
    "ckpt_every": (int, lambda v: v >= 1),
    "log_every": (int, lambda v: v >= 1),
}

_MODEL_KEYS = ("in_channels", "out_channels", "width", "num_eam", "reduction",
               "lsc", "ssc", "lc", "fa", "task", "scale", "shrink_lambda", "seed")
_TRAIN_KEYS = ("batch", "patch", "lr", "halve_every", "beta1", "beta2", "eps",
               "total_iters", "ckpt_every", "log_every", "seed")


class RunConfig:
    """Validated union of model and training settings."""

    def __init__(self, values: dict):
        self.values = values

    def model_config(self) -> ModelConfig:
        kwargs = {k: self.values[k] for k in _MODEL_KEYS if k in self.values}
        cfg = ModelConfig(**kwargs)
        try:
            cfg.validate()
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def train_config(self) -> TrainConfig:
        kwargs = {k: self.values[k] for k in _TRAIN_KEYS if k in self.values}
        cfg = TrainConfig(**kwargs)
        try:
            cfg.validate()
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def to_text(self) -> str:
        merged = dict(ModelConfig().__dict__)
        merged.update(TrainConfig().__dict__)
        merged.update(self.values)
        return "".join(f"{k} = {merged[k]}\n" for k in _SCHEMA)


def parse_config(path: str | os.PathLike | None, overrides: dict | None = None) -> RunConfig:
    """Read `key = value` lines (# comments, no sections); unknown keys and
    constraint violations are errors naming the key and line."""
    values: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, text = line.partition("=")
                key = key.strip()
                text = text.strip()
                if not sep or not key:
                    raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
                if key not in _SCHEMA:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                parser, check = _SCHEMA[key]
                try:
                    value = parser(text)
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
                if check is not None and not check(value):
                    raise ConfigError(f"{path}:{lineno}: value {value!r} out of range for {key}")
                values[key] = value
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _SCHEMA:
            raise ConfigError(f"unknown override key {key!r}")
        parser, check = _SCHEMA[key]
        value = parser(str(value))
        if check is not None and not check(value):
            raise ConfigError(f"override value {value!r} out of range for {key}")
        values[key] = value
    run = RunConfig(values)
    run.model_config()  # cross-field validation up front
    run.train_config()
    return run


# ---------------------------------------------------------------------------
# worker cap


def _apply_thread_cap() -> None:
    cap = os.environ.get("R2RESTORE_THREADS")
    if not cap:
        return
    try:
        limit = max(1, int(cap))
    except ValueError:
        raise ConfigError(f"R2RESTORE_THREADS must be an integer, got {cap!r}") from None
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=limit)
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# subcommands


def _echo_config(run: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved.cfg").write_text(run.to_text())


def _cmd_summary(args) -> int:
    run = parse_config(args.config, _model_overrides(args))
    cfg = run.model_config()
    model = build_model(cfg)
    print(f"task={cfg.task} width={cfg.width} num_eam={cfg.num_eam} reduction={cfg.reduction}")
    print(f"{'layer':<24}{'weight':>16}{'params':>12}")
    for layer, shape, count in model.layer_table():
        print(f"{layer:<24}{shape:>16}{count:>12}")
    count = model.param_count()
    assert count == param_count_from_config(cfg)
    print(f"params={count}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from . import tensor as T
    from .conv import conv2d
    from .gradcheck import grad_check
    from .tensor import Tensor as Tn

    tol = 1e-4
    rng = np.random.default_rng(0)
    worst = 0.0

    def far_from_kinks(shape, kinks=(0.0,)):
        x = rng.normal(size=shape)
        for k in kinks:
            near = np.abs(x - k) < 1e-3
            x[near] += np.where(x[near] >= k, 2e-3, -2e-3)
        return x

    def check(name, fn, params, entries=None):
        nonlocal worst
        report = grad_check(fn, params, max_entries=entries, rng=np.random.default_rng(1))
        worst = max(worst, report.max_rel_err)
        print(f"{name:<24} max_rel_err={report.max_rel_err:.3e}")

    x = Tn(far_from_kinks((2, 3, 6, 6)), requires_grad=True)
    w = Tn(far_from_kinks((4, 3, 3, 3)), requires_grad=True)
    b = Tn(far_from_kinks((1, 4, 1, 1)), requires_grad=True)
    gt = Tn(rng.normal(size=(2, 4, 6, 6)) + 10.0)
    check("conv2d", lambda: T.l1_loss(conv2d(x, w, b, 1, 1), gt), [x, w, b])

    xd = Tn(far_from_kinks((1, 2, 8, 8)), requires_grad=True)
    wd = Tn(far_from_kinks((2, 2, 3, 3)), requires_grad=True)
    gtd = Tn(rng.normal(size=(1, 2, 8, 8)) + 10.0)
    check("conv2d dilated", lambda: T.l1_loss(conv2d(xd, wd, dilation=3, padding=3), gtd), [xd, wd])

    for name, builder, kinks in [
        ("relu", lambda v: T.relu(v), (0.0,)),
        ("sigmoid", lambda v: T.sigmoid(v), ()),
        ("softshrink", lambda v: T.softshrink(v, 0.5), (-0.5, 0.5)),
        ("global_avg_pool", lambda v: T.sigmoid(T.global_avg_pool(v)), ()),
        ("pixel_shuffle", lambda v: T.pixel_shuffle(v, 2), ()),
    ]:
        v = Tn(far_from_kinks((1, 4, 4, 4), kinks or (99.0,)), requires_grad=True)
        target = Tn(rng.normal(size=builder(v).shape) + 10.0)
        check(name, lambda b=builder, v=v, t=target: T.l1_loss(b(v), t), [v])

    f = Tn(far_from_kinks((1, 3, 4, 4)), requires_grad=True)
    r = Tn(far_from_kinks((1, 3, 1, 1)), requires_grad=True)
    gtc = Tn(rng.normal(size=(1, 3, 4, 4)) + 10.0)
    check("channel_scale", lambda: T.l1_loss(T.channel_scale(f, r), gtc), [f, r])

    model = build_model(ModelConfig(width=8, num_eam=1, reduction=4, seed=0), dtype=np.float64)
    model.tail.weight.data[:] = rng.uniform(-0.2, 0.2, size=model.tail.weight.shape)
    xm = Tn(rng.uniform(0.25, 0.75, size=(1, 3, 16, 16)))
    gtm = Tn(rng.uniform(0.25, 0.75, size=(1, 3, 16, 16)))
    check("tiny full model", lambda: T.l1_loss(model.forward(xm), gtm),
          model.parameters(), entries=1)

    print(f"max_rel_err={worst:.3e}")
    if worst < tol:
        print("gradcheck PASS")
        return EXIT_OK
    print("gradcheck FAIL", file=sys.stderr)
    return EXIT_NUMERIC


def _cmd_degrade(args) -> int:
    spec = DegradationSpec.from_line(args.spec)
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for index, entry in enumerate(manifest.entries):
        img = read_image_array(entry.clean, dtype=np.float64)
        for tile_index, tile in enumerate(tile_large_image(img)):
            degraded = spec.apply(tile, stream=index)
            stem = entry.clean.stem if tile_index == 0 else f"{entry.clean.stem}_t{tile_index}"
            suffix = ".pgm" if tile.shape[1] == 1 else ".ppm"
            clean_path = out_dir / f"{stem}_clean{suffix}"
            degraded_path = out_dir / f"{stem}_degraded{suffix}"
            write_image(tile, clean_path)
            write_image(degraded, degraded_path)
            lines.append(f"clean={clean_path.name} degraded={degraded_path.name}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} pairs to {out_dir}")
    return EXIT_OK


def _model_overrides(args) -> dict:
    keys = ("width", "num_eam", "reduction", "task", "scale", "seed",
            "in_channels", "out_channels", "lsc", "ssc", "lc", "fa")
    return {k: getattr(args, k, None) for k in keys if getattr(args, k, None) is not None}


def _train_overrides(args) -> dict:
    mapping = {"iters": "total_iters", "lr": "lr", "seed": "seed",
               "batch": "batch", "patch": "patch"}
    out = {}
    for flag, key in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def _cmd_train(args) -> int:
    overrides = {**_model_overrides(args), **_train_overrides(args)}
    run = parse_config(args.config, overrides)
    model_cfg = run.model_config()
    train_cfg = run.train_config()
    out_dir = Path(args.out)
    _echo_config(run, out_dir)

    spec = DegradationSpec.from_line(args.spec) if args.spec else None
    manifest = load_manifest(args.manifest, degradation=spec)

    if args.checkpoint:
        model, adam = load_training_state(args.checkpoint)
    else:
        model = build_model(model_cfg, dtype=np.float32)
        adam = None

    def progress(iteration, loss, running):
        if iteration % train_cfg.log_every == 0:
            print(f"iter={iteration} lr={lr_of(iteration):.3g} loss={running:.6f}", flush=True)

    def lr_of(iteration):
        from .train import lr_at
        return lr_at(iteration - 1, train_cfg)

    try:
        result = train(model, manifest, train_cfg, out_dir=out_dir,
                       adam=adam, on_iteration=progress)
    except KeyboardInterrupt:
        save_checkpoint(model, os.path.join(out_dir, "model.ckpt"))
        print("interrupted; checkpoint written", file=sys.stderr)
        return EXIT_OK
    if result.aborted:
        print(f"aborted: {result.abort_reason}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"finished at iteration {model.iteration}; checkpoint {result.checkpoint_path}")
    return EXIT_OK


def _load_model_for_inference(args) -> Model:
    model = load_checkpoint(args.checkpoint)
    return model


def _cmd_restore(args) -> int:
    model = _load_model_for_inference(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for image_path in args.images:
        arr = read_image_array(image_path, dtype=np.float32)
        x = Tensor(arr)
        y = self_ensemble_forward(model, x) if args.ensemble else model.forward(x)
        stem = Path(image_path).stem
        suffix = ".pgm" if y.shape[1] == 1 else ".ppm"
        write_image(y, out_dir / f"{stem}_restored{suffix}")
        write_image(y, out_dir / f"{stem}_restored.png")
        print(f"{image_path} -> {out_dir / (stem + '_restored' + suffix)}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = _load_model_for_inference(args)
    spec = DegradationSpec.from_line(args.spec) if args.spec else None
    manifest = load_manifest(args.manifest)
    report = evaluate(model, manifest, spec=spec, ensemble=args.ensemble)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval.csv").write_text(report.to_csv())
    print(report.summary_line())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 2 with message on stderr
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="r2restore", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common_model_flags(p):
        p.add_argument("--config", default=None)
        p.add_argument("--width", type=int)
        p.add_argument("--num-eam", dest="num_eam", type=int)
        p.add_argument("--reduction", type=int)
        p.add_argument("--task")
        p.add_argument("--scale", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--in-channels", dest="in_channels", type=int)
        p.add_argument("--out-channels", dest="out_channels", type=int)
        for flag in ("lsc", "ssc", "lc", "fa"):
            p.add_argument(f"--{flag}", choices=("true", "false"))

    p = sub.add_parser("summary", help="print the layer table and parameter count")
    common_model_flags(p)
    p.set_defaults(fn=_cmd_summary)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("degrade", help="write degraded copies of a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_degrade)

    p = sub.add_parser("train", help="train a model")
    common_model_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--spec", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--patch", type=int)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("restore", help="restore images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ensemble", action="store_true")
    p.add_argument("images", nargs="+")
    p.set_defaults(fn=_cmd_restore)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--spec", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--ensemble", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded kernels for bit-stable runs")
    return parser


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.deterministic:
            os.environ["R2RESTORE_THREADS"] = "1"
        _apply_thread_cap()
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError,) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    raise SystemExit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
