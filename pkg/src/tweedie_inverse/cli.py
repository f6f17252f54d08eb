"""Command-line entry point: degrade, solve, pretrain, train and eval.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 solver
divergence, 5 training divergence, 6 every evaluation row failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as cfgmod
from .config import ConfigError
from .data import (CheckpointError, PNGError, atomic_write, bundled_corpus, load_checkpoint, load_dataset,
                   load_measurement, read_png, save_checkpoint, save_measurement, write_png)
from .denoiser import BiasFreeCNN, pretrain_denoiser
from .evaluate import degraded_baseline, denoise_benchmark, run_benchmark
from .operators import DescriptorError, OperatorDescriptor, make_operator
from .solver import NumericDivergenceError, SolverConfig, config_preset, run
from .trainer import TrainingDivergenceError, calibrate_weight_tables, fine_tune, task_weight

log = logging.getLogger("tweedie_inverse")

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_TRAIN_DIVERGED, EXIT_EVAL_FAILED = 2, 3, 4, 5, 6


class CommandFailed(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _derived_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _write_json(path, payload) -> None:
    atomic_write(path, (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode())


def _provenance(args, config, **extra) -> dict:
    return {"tool": "tweedie_inverse", "version": __version__, "command": args.command, "seed": args.seed,
            "config_sha256": config.get("_sha256"), **extra}


def _out_dir(args, config) -> Path:
    if args.out:
        return Path(args.out)
    return cfgmod.resolve_path(config, config.get("output_dir", "out"))


def _dataset_dir(config, split: str) -> Path:
    entry = config.get("dataset", {}).get(split)
    return bundled_corpus(split) if entry is None else cfgmod.resolve_path(config, entry)


def _test_images(config):
    ds = load_dataset(_dataset_dir(config, "test"), 1, flips=False, rotations=False)
    limit = config.get("dataset", {}).get("max_test_images")
    images = ds.images[:limit] if limit else ds.images
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise CommandFailed(EXIT_CONFIG, f"test images must share one size, found {sorted(shapes)}")
    return torch.from_numpy(np.stack(images))


# --- degrade ---------------------------------------------------------------

def cmd_degrade(args, config) -> int:
    out = _out_dir(args, config) / "degrade"
    tasks = [t for t in cfgmod.tasks(config) if t.iterative]
    if args.tasks:
        tasks = [t for t in tasks if t.name in args.tasks]
    paths = [Path(p) for p in args.images] or sorted(_dataset_dir(config, "test").glob("*.png"))
    if not paths:
        raise CommandFailed(EXIT_IO, "no input images")
    for path in paths:
        image = read_png(path)
        for task in tasks:
            seed = _derived_seed(args.seed, path.stem, task.name)
            desc = task.descriptor(tuple(image.shape), seed)
            op = make_operator(desc)
            xc = op.measure(image)
            stem = f"{path.stem}.{task.name}"
            meta = {"descriptor": desc.to_dict(), "task": task.name, "source": path.name,
                    "source_sha256": _sha256(path), "solver": task.solver_config.__dict__}
            save_measurement(out / f"{stem}.twsm", xc, meta)
            preview = op.lift(xc)
            write_png(out / f"{stem}.preview.png", preview)
            deg = degraded_baseline(op, image)
            _write_json(out / f"{stem}.json", _provenance(args, config, degraded_psnr=round(deg, 6), **meta))
            print(f"{stem}\tK={op.measurement_dim}\tdegraded_psnr={deg:.2f} dB")
    return 0


# --- solve -----------------------------------------------------------------

def _load_model(path) -> BiasFreeCNN:
    return load_checkpoint(path)


def cmd_solve(args, config) -> int:
    out = _out_dir(args, config) / "solve"
    ckpt = args.checkpoint or config.get("model", {}).get("checkpoint")
    if ckpt is None:
        raise CommandFailed(EXIT_CONFIG, "solve needs --checkpoint or model.checkpoint")
    ckpt = Path(ckpt) if args.checkpoint else cfgmod.resolve_path(config, ckpt)
    model = _load_model(ckpt)
    for mpath in map(Path, args.measurements):
        xc, meta = load_measurement(mpath)
        desc = OperatorDescriptor.from_dict(meta["descriptor"])
        op = make_operator(desc)
        if desc.image_dims[0] != model.config.input_channels:
            raise CommandFailed(EXIT_CONFIG, f"{mpath.name}: {desc.image_dims[0]} channels but the model "
                                             f"expects {model.config.input_channels}")
        base = config_preset(args.preset) if args.preset else SolverConfig(**meta["solver"])
        scfg = base.with_overrides(beta=args.beta, h0=args.h0, sigma0=args.sigma0, max_iters=args.iters,
                                   rng_seed=_derived_seed(args.seed, mpath.stem))
        with torch.no_grad():
            try:
                y, trace = run(model, op, xc, scfg)
            except NumericDivergenceError as exc:
                raise CommandFailed(EXIT_DIVERGED, f"{mpath.name}: {exc}") from None
        stem = mpath.stem
        write_png(out / f"{stem}.png", y)
        atomic_write(out / f"{stem}.trace.tsv", trace.to_tsv().encode())
        _write_json(out / f"{stem}.json", _provenance(
            args, config, measurement=mpath.name, measurement_sha256=_sha256(mpath),
            checkpoint_sha256=_sha256(ckpt), descriptor=desc.to_dict(), solver=scfg.__dict__,
            iterations=len(trace)))
        print(f"{stem}\titerations={len(trace)}\tfinal_sigma={trace.records[-1].sigma_est:.4g}")
    return 0


# --- pretrain / train ------------------------------------------------------

def _initial_model(args, config) -> BiasFreeCNN:
    if args.init:
        return load_checkpoint(args.init)
    ckpt = config.get("model", {}).get("checkpoint")
    if ckpt:
        return load_checkpoint(cfgmod.resolve_path(config, ckpt))
    return BiasFreeCNN(cfgmod.model_config(config))


def cmd_pretrain(args, config) -> int:
    out = _out_dir(args, config) / "pretrain"
    pcfg = cfgmod.pretrain_config(config, args.seed)
    ds = load_dataset(_dataset_dir(config, "train"), config.get("dataset", {}).get("crop_size", 32),
                      seed=args.seed)
    if args.dry_run:
        print(f"pretrain: {len(ds)} images, {pcfg}")
        return 0
    model = BiasFreeCNN(cfgmod.model_config(config))
    patches = ds.epoch_patches(0)
    model, history = pretrain_denoiser(model, patches, pcfg)
    save_checkpoint(model, out / "model.twsv")
    atomic_write(out / "history.tsv", "".join(f"{i}\t{v:.9g}\n" for i, v in enumerate(history)).encode())
    _write_json(out / "model.json", _provenance(args, config, pretrain=pcfg.__dict__,
                                                 checkpoint_sha256=_sha256(out / "model.twsv")))
    print(f"pretrained {pcfg.epochs} epochs, final loss {history[-1] if history else float('nan'):.6g}")
    return 0


_CKPT = re.compile(r"ckpt_e(\d+)\.twsv$")


def _latest_checkpoint(directory: Path):
    found = [(int(m.group(1)), p) for p in directory.glob("ckpt_e*.twsv") if (m := _CKPT.search(p.name))]
    return max(found) if found else None


def _print_plan(tasks, scheme, tcfg):
    print("task\tmode\tkind\titers\tbeta\th0\tsigma0\tweight")
    for t in tasks:
        if t.iterative:
            c = t.solver_config
            w = task_weight(scheme, t)
            print(f"{t.name}\titerative\t{t.kind}\t{c.max_iters}\t{c.beta}\t{c.h0}\t{c.sigma0}\t{w:.6g}")
        else:
            w = "sigma-dependent" if scheme.kind == "normalised" else f"{task_weight(scheme, t):.6g}"
            print(f"{t.name}\toneshot\tsigma~U{tuple(t.sigma_range)}\t-\t-\t-\t-\t{w}")
    print(f"epochs={tcfg.epochs} batch={tcfg.batch_size} crop={tcfg.crop_size} lr0={tcfg.lr} "
          f"cycles={tcfg.first_cycle}/{tcfg.cycle} loss={tcfg.loss_kind} scheme={scheme.kind}")


def cmd_train(args, config) -> int:
    out = _out_dir(args, config) / "train"
    tasks = cfgmod.tasks(config)
    scheme = cfgmod.weight_scheme(config)
    tcfg = cfgmod.train_config(config, args.seed)
    if args.dry_run:
        _print_plan(tasks, scheme, tcfg)
        return 0
    ds = load_dataset(_dataset_dir(config, "train"), tcfg.crop_size, tcfg.flips, tcfg.rotations, args.seed)
    start, history_rows = 0, []
    latest = _latest_checkpoint(out) if args.resume else None
    if latest is not None:
        epoch, path = latest
        model = load_checkpoint(path)
        start = epoch + 1
        hist = out / "history.tsv"
        if hist.exists():
            lines = hist.read_text().splitlines()
            history_rows = [l for l in lines[1:] if int(l.split("\t")[0]) <= epoch]
        log.info("resuming from %s at epoch %d", path.name, start)
    else:
        model = _initial_model(args, config)
    if config.get("weights", {}).get("calibrate"):
        # tables come from the starting model; a resumed run reuses them
        wpath = out / "weights.json"
        if latest is not None and wpath.exists():
            saved = json.loads(wpath.read_text())
            prior, table = saved["prior_losses"], {float(k): v for k, v in saved["denoise_losses"].items()}
        else:
            with torch.no_grad():
                prior, table = calibrate_weight_tables(model, ds.epoch_patches(0), tasks, seed=args.seed,
                                                       loss_kind=tcfg.loss_kind)
            _write_json(wpath, {"prior_losses": prior,
                                "denoise_losses": {f"{k:g}": v for k, v in table.items()}})
        scheme.prior_losses.update(prior)
        if table:
            scheme.denoise_losses = table

    def checkpoint(epoch):
        save_checkpoint(model, out / f"ckpt_e{epoch:04d}.twsv")

    try:
        model, history = fine_tune(model, ds, tasks, scheme, tcfg, start_epoch=start, checkpoint_fn=checkpoint)
    except TrainingDivergenceError as exc:
        raise CommandFailed(EXIT_TRAIN_DIVERGED, str(exc)) from None
    tsv = history.to_tsv().splitlines(keepends=True)
    atomic_write(out / "history.tsv", (tsv[0] + "".join(r + "\n" for r in history_rows) + "".join(tsv[1:])).encode())
    final = _latest_checkpoint(out)
    _write_json(out / "train.json", _provenance(
        args, config, tasks=[t.name for t in tasks], scheme=scheme.kind, train=dict(tcfg.__dict__),
        start_epoch=start, final_checkpoint=None if final is None else final[1].name))
    if start >= tcfg.epochs:
        print(f"nothing to do: checkpoints already reach epoch {start - 1}")
    else:
        print(f"trained epochs {start}..{tcfg.epochs - 1}; history in {out / 'history.tsv'}")
    return 0


# --- eval ------------------------------------------------------------------

def cmd_eval(args, config) -> int:
    out = _out_dir(args, config) / "eval"
    if not args.checkpoints:
        raise CommandFailed(EXIT_CONFIG, "eval needs at least one checkpoint")
    names = args.names or [Path(c).stem for c in args.checkpoints]
    if len(names) != len(args.checkpoints) or len(set(names)) != len(names):
        raise CommandFailed(EXIT_CONFIG, "--names must give one distinct name per checkpoint")
    models = {n: _load_model(c) for n, c in zip(names, args.checkpoints)}
    econf = config.get("eval", {})
    baseline = args.baseline or econf.get("baseline") or names[0]
    tasks = cfgmod.eval_tasks(config)
    if args.tasks:
        known = {t.name: t for t in tasks}
        tasks = [known.get(n) or cfgmod.task_spec(n) for n in args.tasks]
    images = _test_images(config)
    seeds = econf.get("seeds", [args.seed])
    report = run_benchmark(models, tasks, images, cfgmod.eval_settings(config), seeds, baseline, jobs=args.jobs)
    report.provenance["checkpoints"] = {n: _sha256(c) for n, c in zip(names, args.checkpoints)}
    report.provenance["config_sha256"] = config.get("_sha256")
    report.write(out, "report")
    rows = list(report.rows)
    sigmas = econf.get("sigmas", [5, 10, 20, 30, 40, 50])
    if sigmas:
        dreport = denoise_benchmark(models, sigmas, images, seed=args.seed, baseline=baseline)
        dreport.provenance["checkpoints"] = report.provenance["checkpoints"]
        dreport.write(out, "denoise")
        rows += dreport.rows
        print(dreport.to_table())
    print(report.to_table())
    failed = [r for r in rows if not r.ok]
    for r in failed:
        print(f"FAILED {r.task}/{r.model}/{r.setting}: {r.error}", file=sys.stderr)
    if rows and len(failed) == len(rows):
        return EXIT_EVAL_FAILED
    return 0


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="concurrent solver runs in eval")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (overrides output_dir)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="tweedie-inverse", parents=[common],
                                     description="Denoiser-prior inverse solver and unrolled multi-task fine-tuning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", parents=[common], help="measure images with each task's operator")
    p.add_argument("images", nargs="*", help="PNG files (default: the test dataset)")
    p.add_argument("--tasks", nargs="+")

    p = sub.add_parser("solve", parents=[common], help="reconstruct images from measurement files")
    p.add_argument("measurements", nargs="+")
    p.add_argument("--checkpoint")
    p.add_argument("--preset", choices=["short", "medium", "long", "long_sigma08"])
    p.add_argument("--beta", type=float)
    p.add_argument("--h0", type=float)
    p.add_argument("--sigma0", type=float)
    p.add_argument("--iters", type=int)

    p = sub.add_parser("pretrain", parents=[common], help="train the bias-free denoiser on AWGN")
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("train", parents=[common], help="multi-task fine-tuning through the unrolled solver")
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--init", help="starting checkpoint (overrides model.checkpoint)")

    p = sub.add_parser("eval", parents=[common], help="benchmark checkpoints against a baseline and write PSNR tables")
    p.add_argument("checkpoints", nargs="*")
    p.add_argument("--names", nargs="+")
    p.add_argument("--baseline")
    p.add_argument("--tasks", nargs="+")
    return parser


COMMANDS = {"degrade": cmd_degrade, "solve": cmd_solve, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", 0), ("jobs", 1), ("out", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = cfgmod.load_config(args.config) if args.config else cfgmod.validate({})
        if args.config and "seed" in config and not _seed_given(argv):
            args.seed = config["seed"]
        return COMMANDS[args.command](args, config)
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DescriptorError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, PNGError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def _seed_given(argv) -> bool:
    argv = sys.argv[1:] if argv is None else argv
    return any(a == "--seed" or a.startswith("--seed=") for a in argv)


if __name__ == "__main__":
    sys.exit(main())
