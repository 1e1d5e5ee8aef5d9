"""``divsal`` command line: generate-synthetic | train | predict | uncertainty | eval | report.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .data import SyntheticSpec, generate_synthetic, load_dataset, save_dataset, spec_to_dict
from .errors import CheckpointError, DatasetError, DivsalError, InvalidInputError
from .metrics import read_aggregate, render_table, report, write_csv
from .model import FRAMEWORKS, PROFILES
from .trainer import TrainConfig, fit, load_checkpoint, make_batch, predict, save_checkpoint, set_deterministic
from .uncertainty import DEFAULT_SAMPLES, decompose, mc_predict, save_uncertainty

log = logging.getLogger("divsal")

SAMPLING_CHOICES = ("random", "all", "majority")
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config_file(path, flat: dict):
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in flat.items()))


def fingerprint(root) -> str:
    """SHA-256 over relative paths and contents of every file under ``root``."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


class RunManifest:
    """JSON run record, rewritten atomically at start and on completion."""

    def __init__(self, out_dir, command: str, argv, config: dict, seed, dataset=None, outputs=None):
        self.path = Path(out_dir) / MANIFEST_NAME
        self.start = time.perf_counter()
        self.data = {
            "command": command,
            "argv": list(argv),
            "config": config,
            "seed": seed,
            "code_version": __version__,
            "torch_version": torch.__version__,
            "deterministic": os.environ.get("DIVSAL_DETERMINISTIC") == "1" or bool(config.get("deterministic", False)),
            "dataset_fingerprint": None if dataset is None else fingerprint(dataset),
            "outputs": outputs or {},
            "timings": {"started": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")},
        }
        self._write()

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")
        os.replace(tmp, self.path)

    def finish(self, **extra):
        self.data["timings"]["finished"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        self.data["timings"]["wall_seconds"] = round(time.perf_counter() - self.start, 3)
        self.data.update(extra)
        self._write()


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise DatasetError(f"{what} not found: {path}")


def _prepare_out(out, force: bool, allow_existing: bool = True):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not allow_existing and not force:
        raise DivsalError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(data, split, image_size):
    _require_dir(Path(data) / split, f"dataset split '{split}'")
    samples = load_dataset(data, split, image_size=image_size)
    if not samples:
        raise DatasetError(f"no samples in {Path(data) / split}")
    return samples


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_generate_synthetic(args, argv):
    out = _prepare_out(args.out, args.force, allow_existing=False)
    for split in ("train", "test"):
        if (out / split).exists():
            shutil.rmtree(out / split)
    probs = tuple(float(p) for p in args.probs.split(","))
    common = dict(
        canvas=args.canvas, objects_per_image=tuple(args.objects), salience_probs=probs,
        jitter_radius=args.jitter, num_annotators=args.annotators,
    )
    specs = [SyntheticSpec(num_images=args.n, seed=args.seed, split="train", **common)]
    if args.n_test > 0:
        specs.append(SyntheticSpec(num_images=args.n_test, seed=args.seed + 7919, split="test", **common))
    manifest = RunManifest(out, "generate-synthetic", argv, {"specs": [spec_to_dict(s) for s in specs]}, args.seed)
    for spec in specs:
        samples, _ = generate_synthetic(spec)
        save_dataset(out, spec.split, samples)
        log.info("wrote %d %s samples to %s", len(samples), spec.split, out)
    manifest.finish(outputs={"root": str(out), "splits": [s.split for s in specs]})
    return 0


def _train_config(args) -> TrainConfig:
    flat = read_config_file(args.config) if args.config else {}
    if args.profile == "desk" or flat.get("profile") == "desk":
        base = TrainConfig.desk().to_flat()
        base.update(flat)
        flat = base
    overrides = {
        "framework": args.framework,
        "sampling": args.sampling,
        "profile": args.profile,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "image_size": args.image_size,
        "seed": args.seed,
        "latent_dim": args.latent_dim,
        "lambda_adv": args.lambda_adv,
        "langevin_steps": args.langevin_steps,
    }
    flat.update({k: v for k, v in overrides.items() if v is not None})
    if os.environ.get("DIVSAL_DETERMINISTIC") == "1":
        flat["deterministic"] = True
    return TrainConfig.from_flat(flat)


def cmd_train(args, argv):
    _require_dir(args.data, "dataset")
    config = _train_config(args)
    samples = _load_split(args.data, args.split, config.image_size)
    config.num_annotators = samples[0].num_annotators
    out = _prepare_out(args.out, args.force)
    ckpt = out / "checkpoint.pt"
    manifest = RunManifest(
        out, "train", argv, config.to_flat(), config.seed, dataset=Path(args.data) / args.split,
        outputs={"checkpoint": str(ckpt), "log": str(out / "train.log"), "config": str(out / "config.txt")},
    )
    write_config_file(out / "config.txt", config.to_flat())
    state = fit(
        samples, config, log_path=out / "train.log",
        checkpoint_dir=out / "checkpoints" if args.checkpoint_every else None,
        checkpoint_every=args.checkpoint_every,
    )
    save_checkpoint(state, ckpt)
    manifest.finish(final_step=state.step, final_total=state.history[-1]["total"])
    return 0


def _load_for_inference(args):
    state = load_checkpoint(args.checkpoint, expected_profile=args.profile)
    cfg = state.config
    samples = _load_split(args.data, args.split, cfg.image_size)
    if samples[0].num_annotators != cfg.num_annotators and cfg.framework == "ensemble":
        log.warning("dataset has M=%d, ensemble was trained with M=%d", samples[0].num_annotators, cfg.num_annotators)
    return state, samples


def cmd_predict(args, argv):
    state, samples = _load_for_inference(args)
    out = _prepare_out(args.out, True)
    manifest = RunManifest(out, "predict", argv, state.config.to_flat(), state.config.seed,
                           dataset=Path(args.data) / args.split, outputs={"predictions": str(out)})
    images = make_batch(samples).image
    probs = predict(state.model, images).numpy()[:, 0]
    for s, p in zip(samples, probs):
        Image.fromarray(np.clip(np.rint(p * 255.0), 0, 255).astype(np.uint8)).save(out / f"{s.id}.png")
    manifest.finish(count=len(samples))
    return 0


def cmd_uncertainty(args, argv):
    state, samples = _load_for_inference(args)
    out = _prepare_out(args.out, True)
    manifest = RunManifest(out, "uncertainty", argv, {**state.config.to_flat(), "samples": args.samples},
                           args.seed, dataset=Path(args.data) / args.split, outputs={"uncertainty": str(out)})
    rng = torch.Generator().manual_seed(args.seed)
    images = make_batch(samples).image
    for start in range(0, len(samples), args.batch_size):
        stack = mc_predict(images[start : start + args.batch_size], state.model, state.config.framework,
                           args.samples, rng)
        for s, per_image in zip(samples[start : start + args.batch_size], stack):
            save_uncertainty(out, s.id, decompose(per_image))
    manifest.finish(count=len(samples))
    return 0


def cmd_eval(args, argv):
    if args.uncertainty_gt and not args.uncertainty:
        raise UsageError("--uncertainty-gt needs --uncertainty DIR")
    samples = _load_split(args.data, args.split, args.image_size)
    _require_dir(args.predictions, "predictions directory")
    unc_dir = args.uncertainty if args.uncertainty_gt else None
    rep = report(samples, args.predictions, unc_dir)
    out_csv = Path(args.out) if args.out else Path(args.predictions) / "metrics.csv"
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    write_csv(rep, out_csv)
    RunManifest(out_csv.parent, "eval", argv, {"split": args.split}, None,
                dataset=Path(args.data) / args.split, outputs={"csv": str(out_csv)}).finish()
    print(render_table({args.name or Path(args.predictions).name: rep.row()}))
    return 0


def cmd_report(args, argv):
    names = args.names.split(",") if args.names else [Path(p).parent.name or str(p) for p in args.csv]
    if len(names) != len(args.csv):
        raise UsageError("--names must list one name per CSV")
    rows = {name: read_aggregate(path) for name, path in zip(names, args.csv)}
    print(render_table(rows))
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="divsal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"divsal {__version__}")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-synthetic", help="render a synthetic multi-annotator dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=500, help="training images")
    g.add_argument("--n-test", type=int, default=100, help="test images (0 to skip)")
    g.add_argument("--annotators", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--canvas", type=int, default=64)
    g.add_argument("--objects", type=int, nargs=2, default=(2, 3), metavar=("MIN", "MAX"))
    g.add_argument("--probs", default="1.0,0.6,0.3", help="comma-separated salience probability per object slot")
    g.add_argument("--jitter", type=int, default=1)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate_synthetic)

    t = sub.add_parser("train", help="train one framework / sampling protocol")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--config", help="flat key = value file; flags override it")
    t.add_argument("--framework", choices=FRAMEWORKS)
    t.add_argument("--sampling", choices=SAMPLING_CHOICES)
    t.add_argument("--profile", choices=sorted(PROFILES))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--image-size", type=int)
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--lambda-adv", type=float)
    t.add_argument("--langevin-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int, default=0, help="epochs between periodic checkpoints")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("predict", cmd_predict, "write majority-branch saliency maps"),
        ("uncertainty", cmd_uncertainty, "write predictive / aleatoric / epistemic maps"),
    ):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--data", required=True)
        c.add_argument("--out", required=True)
        c.add_argument("--split", default="test")
        c.add_argument("--profile", choices=sorted(PROFILES), help="fail unless the checkpoint has this profile")
        if name == "uncertainty":
            c.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
            c.add_argument("--seed", type=int, default=0)
            c.add_argument("--batch-size", type=int, default=32)
        c.set_defaults(func=func)

    e = sub.add_parser("eval", help="score predictions (and uncertainty) against the dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--uncertainty", help="directory written by 'divsal uncertainty'")
    e.add_argument("--uncertainty-gt", action="store_true",
                   help="score uncertainty against the entropy of the mean annotation")
    e.add_argument("--image-size", type=int)
    e.add_argument("--out", help="CSV path (default: <predictions>/metrics.csv)")
    e.add_argument("--name", help="row label in the printed table")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="tabulate aggregate rows of one or more metric CSVs")
    r.add_argument("csv", nargs="+")
    r.add_argument("--names", help="comma-separated row labels")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    if os.environ.get("DIVSAL_DETERMINISTIC") == "1":
        set_deterministic(True)
    try:
        if args.command == "uncertainty" and args.samples < 1:
            raise UsageError("--samples must be >= 1")
        return args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"divsal: error: {exc}", file=sys.stderr)
        return 2
    except (DivsalError, OSError) as exc:
        kind = type(exc).__name__
        print(f"divsal: {kind}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
