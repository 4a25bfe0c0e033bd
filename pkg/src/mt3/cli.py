"""Command-line entry points: ``train``, ``eval``, ``verify``, ``corrupt``,
``inspect-checkpoint``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import os
import sys

if "--deterministic" in sys.argv:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = "1"

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import json  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import adapt, checkpoint, config, data, trainers, verify  # noqa: E402
from . import autodiff as ad  # noqa: E402

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

# evaluation regimes each training regime's checkpoint supports
EVAL_REGIMES = {"baseline": ("baseline",), "jt": ("jt", "ttt"), "mt3": ("mt", "mt3")}


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_json_default)


def load_run_config(args) -> config.RunConfig:
    cfg = config.load(args.config) if args.config else config.RunConfig()
    overrides = list(args.set or [])
    for flag in ("regime", "seed", "precision"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{flag}={json.dumps(value)}")
    if getattr(args, "deterministic", False):
        overrides.append("deterministic=true")
    if overrides:
        cfg = config.apply_overrides(cfg, overrides)
    return config.resolve(cfg)


def output_dir(args, cfg: config.RunConfig, kind: str) -> Path:
    if getattr(args, "output", None):
        return Path(args.output)
    if cfg.output:
        return Path(cfg.output)
    return data.default_output_root() / f"{kind}-{cfg.regime}-{config.config_hash(cfg)[:8]}"


def _prepare_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CLIError(f"output directory {path} is not writable: {exc}", EXIT_CONFIG) from None
    return path


# ---------------------------------------------------------------------------
# datasets


def train_dataset(cfg: config.RunConfig) -> data.Dataset:
    d = cfg.data
    if d.train == "synth":
        return data.synth_dataset(d.synth_classes, d.synth_per_class, d.synth_resolution, d.synth_seed)
    if not d.train_files:
        raise CLIError("data.train_files is empty for data.train='cifar10'", EXIT_CONFIG)
    parts = [data.read_cifar10_binary(f) for f in d.train_files]
    return data.Dataset(np.concatenate([p.images for p in parts]),
                        np.concatenate([p.labels for p in parts]), "cifar10-train",
                        {"sources": [p.provenance for p in parts]})


def eval_datasets(cfg: config.RunConfig) -> tuple[dict[str, data.Dataset], data.Dataset | None]:
    """Corrupted test sets keyed by name, plus the clean test set if available."""
    d = cfg.data
    if d.train == "synth":
        clean = data.synth_dataset(d.synth_classes, d.test_per_class, d.synth_resolution, d.test_seed)
        clean = dataclasses.replace(clean, name="clean")
        sets = {}
        for i, raw in enumerate(d.synth_corruptions):
            try:
                spec = data.CorruptionSpec(raw["kind"], dict(raw.get("params", {})),
                                           raw.get("severity", d.severity))
            except (KeyError, ValueError) as exc:
                raise CLIError(f"data.synth_corruptions[{i}]: {exc}", EXIT_CONFIG) from None
            name = raw.get("name", spec.kind)
            sets[name] = data.corrupt_dataset(clean, spec, seed=d.test_seed + i, name=name)
    else:
        clean = data.read_cifar10_binary(d.test_file) if d.test_file else None
        sets = {}
        if d.corruptions:
            if not d.cifar10c_dir:
                raise CLIError("data.cifar10c_dir is required when data.corruptions is set", EXIT_CONFIG)
            root = Path(d.cifar10c_dir)
            for name in d.corruptions:
                ds = data.load_cifar10c(root / f"{name}.npy", root / "labels.npy", d.severity)
                sets[name] = dataclasses.replace(ds, name=name)
    if d.eval_limit is not None:
        lim = np.arange(d.eval_limit)
        sets = {k: v.subset(lim[lim < len(v)]) for k, v in sets.items()}
        clean = clean.subset(lim[lim < len(clean)]) if clean is not None else None
    return sets, clean


# ---------------------------------------------------------------------------
# train


def _latest_checkpoint(out: Path) -> Path | None:
    final = out / "final.ckpt"
    if final.exists():
        return final
    periodic = sorted(out.glob("step-*.ckpt"))
    return periodic[-1] if periodic else None


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] < step]
    path.write_text("".join(line + "\n" for line in keep))


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    out = _prepare_dir(output_dir(args, cfg, "train"))
    digest = config.config_hash(cfg)
    cfg_path = out / "config.json"
    log_path = out / "train_log.jsonl"
    state = None
    if args.resume:
        ckpt_path = _latest_checkpoint(out)
        if ckpt_path is None:
            raise CLIError(f"--resume: no checkpoint in {out}", EXIT_CONFIG)
        ckpt = checkpoint.load(ckpt_path)
        if ckpt.metadata.get("config_hash") != digest and not args.force:
            raise CLIError(f"config hash {digest} differs from checkpoint "
                           f"{ckpt.metadata.get('config_hash')}; pass --force to resume anyway",
                           EXIT_CONFIG)
        state = ckpt.state
        _truncate_log(log_path, state.step)
    elif (log_path.exists() or cfg_path.exists()) and not args.force:
        raise CLIError(f"{out} already holds a run; use --resume or --force", EXIT_CONFIG)
    elif log_path.exists():
        log_path.unlink()
    cfg_path.write_text(config.dumps(cfg) + "\n")

    ds = train_dataset(cfg)
    model_cfg = cfg.model_config()
    tcfg = cfg.trainer_config()
    meta = {"seed": cfg.seed, "config_hash": digest, "regime": cfg.regime}

    def save(st, name):
        epoch = st.step // max(trainers.steps_per_epoch(len(ds), _batch(cfg)), 1)
        checkpoint.save(out / name, checkpoint.Checkpoint(model_cfg, st, {**meta, "epoch": epoch}))

    with open(log_path, "a") as log, ad.precision(cfg.precision):
        def on_record(rec):
            log.write(_dump(rec) + "\n")
            log.flush()

        def on_step(st):
            if cfg.checkpoint_every and st.step % cfg.checkpoint_every == 0:
                save(st, f"step-{st.step:07d}.ckpt")

        state = trainers.train(cfg.regime, ds, model_cfg, tcfg, state, on_record, on_step,
                               cfg.augment.sample, cfg.augment.batch, until=args.until)
    done = state.step >= trainers.total_steps(len(ds), _batch(cfg), tcfg.epochs, tcfg.max_steps)
    save(state, "final.ckpt" if done else f"step-{state.step:07d}.ckpt")
    print(_dump({"output": str(out), "steps": state.step, "finished": done}))
    return EXIT_OK


def _batch(cfg: config.RunConfig) -> int:
    t = cfg.trainer_config()
    return t.meta_batch * t.task_size if cfg.regime == "mt3" else t.batch_size


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    try:
        ckpt = checkpoint.load(args.checkpoint)
    except (OSError, checkpoint.CheckpointError) as exc:
        raise CLIError(f"cannot read checkpoint: {exc}", EXIT_DATA) from None
    trained = ckpt.state.regime
    regimes = args.regimes.split(",") if args.regimes else list(EVAL_REGIMES[trained])
    for r in regimes:
        if r not in adapt.REGIMES:
            raise CLIError(f"unknown eval regime {r!r}", EXIT_CONFIG)
        if r not in EVAL_REGIMES[trained] and not args.force:
            raise CLIError(f"regime {r!r} does not match a {trained!r} checkpoint "
                           f"(allowed: {', '.join(EVAL_REGIMES[trained])})", EXIT_CONFIG)
    out = _prepare_dir(output_dir(args, cfg, "eval"))
    (out / "config.json").write_text(config.dumps(cfg) + "\n")
    sets, clean = eval_datasets(cfg)
    reports = {}
    with ad.precision(cfg.precision):
        for r in regimes:
            acfg = cfg.adapt if r != "ttt" else dataclasses.replace(cfg.adapt, lr=cfg.ttt_lr)
            if args.alpha_zero:
                acfg = dataclasses.replace(acfg, lr=0.0)
            try:
                rep = adapt.evaluate_suite(sets, ckpt.state.params, ckpt.model_config, r, acfg,
                                           clean=clean, metadata={"checkpoint": str(args.checkpoint)})
            except ValueError as exc:
                raise CLIError(str(exc), EXIT_CONFIG) from None
            reports[r] = rep
            (out / f"eval_{r}.json").write_text(_dump(rep) + "\n")
            for fname, text in adapt.plot_series(rep).items():
                (out / f"{r}_{fname}").write_text(text)
    table = adapt.render_table(reports)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify / corrupt / inspect


def cmd_verify(args) -> int:
    ops = args.inject_sign_error or []
    with ad.inject_sign_error(*ops), ad.precision("float64"):
        results = verify.run_all(trials=args.trials, seed=args.seed)
    failed = [r.name for r in results if not r.passed]
    summary = {"passed": not failed, "failed": failed, "checks": [r.to_dict() for r in results],
               "injected_sign_errors": ops}
    print(_dump(summary) if args.json else "\n".join(
        f"{'PASS' if r.passed else 'FAIL'} {r.name}" + (f" err={r.value:.3g}" if r.value is not None else "")
        for r in results) + f"\n{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_VERIFY


def cmd_corrupt(args) -> int:
    try:
        params = json.loads(args.params) if args.params else {}
        spec = data.CorruptionSpec(args.kind, params, args.severity)
    except (ValueError, json.JSONDecodeError) as exc:
        raise CLIError(f"corruption spec: {exc}", EXIT_CONFIG) from None
    if args.input:
        src = Path(args.input)
        if src.suffix == ".npy":
            images = data.read_npy_u8(src, "images")
            labels = np.zeros(len(images), dtype=np.int64)
            if args.labels:
                labels = data.read_npy(args.labels, ("<i8", "<i4", "|u1", "<u1")).astype(np.int64)
            ds = data.Dataset(images, labels, src.stem)
        else:
            ds = data.read_cifar10_binary(src)
    else:
        ds = data.synth_dataset(args.classes, args.per_class, args.resolution, args.seed)
    out = data.corrupt_dataset(ds, spec, seed=args.seed)
    target = Path(args.output)
    _prepare_dir(target.parent if target.suffix else target)
    img_path = target if target.suffix else target / f"{spec.kind}.npy"
    u8 = np.round(np.clip(out.images, 0, 1) * 255).astype(np.uint8)
    data.write_npy(img_path, u8)
    data.write_npy(img_path.with_name("labels.npy"), out.labels.astype(np.int64))
    print(_dump({"images": str(img_path), "labels": str(img_path.with_name("labels.npy")),
                 "n": len(u8), "spec": spec.to_dict()}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        info = checkpoint.summary(args.checkpoint)
    except (OSError, checkpoint.CheckpointError) as exc:
        raise CLIError(f"cannot read checkpoint: {exc}", EXIT_DATA) from None
    print(json.dumps(info, indent=2, sort_keys=True, default=_json_default))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. meta.max_steps=100 (repeatable)")
    p.add_argument("--regime")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--output", help="output directory (default under $MT3_OUTPUT_ROOT)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mt3", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train mt3, jt or baseline")
    _run_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing run, or resume despite a config change")
    p.add_argument("--until", type=int, help="stop after this many steps (resumable)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on clean and corrupted test sets")
    _run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--regimes", help="comma-separated subset of baseline,jt,ttt,mt,mt3")
    p.add_argument("--alpha-zero", action="store_true", help="adapt with lr 0 (reduces mt3 to mt)")
    p.add_argument("--force", action="store_true", help="allow regimes foreign to the checkpoint")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the numerical oracle suite (always 64-bit)")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="machine-readable summary")
    p.add_argument("--inject-sign-error", action="append", metavar="OP",
                   help="negate a backward kernel (mutation test)")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("corrupt", help="write a corrupted copy of a dataset as NPY")
    p.add_argument("kind", choices=data.CORRUPTIONS)
    p.add_argument("--params", help='JSON object, e.g. \'{"sigma": 0.1}\'')
    p.add_argument("--severity", type=int, default=5)
    p.add_argument("--input", help="CIFAR-10 binary batch or uint8 NPY (default: synthetic)")
    p.add_argument("--labels", help="labels NPY accompanying an NPY input")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--resolution", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="NPY file or directory")
    p.set_defaults(fn=cmd_corrupt)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint manifest digest")
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ad.NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
