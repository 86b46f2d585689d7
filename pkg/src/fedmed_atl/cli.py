"""Command-line entry point: ``fedmed-atl <command> [flags]``.

Commands:
    phantom   write a synthetic two-modality corpus as slice archives
    prepare   split a corpus into a held-out test set and per-client MUD shards
    train     federated training; one checkpoint per round, loss log, metrics
    eval      score a checkpoint (or an oracle) on the held-out test set
    montage   PNG grid of (input A, generated B, ground-truth B) rows
    ablate    run the AR/AT/AS/ATL-1/2/4-view grid under slight and severe noise

Output files land under ``--out``; without it, under ``$FEDMED_ATL_OUT``
(default ``./fedmed-out``) in a per-command subdirectory.

Exit status: 0 on success, 1 on a runtime failure, 2 on a configuration or
usage error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .archive import write_corpus
from .checkpoint import CheckpointError, load_checkpoint, restore_generator, save_checkpoint
from .config import (
    ABLATION_ROWS,
    NOISE_CHOICES,
    VARIANTS,
    VIEW_CHOICES,
    ConfigError,
    ExperimentConfig,
    RunManifest,
    load_scenario,
    method_label,
    variant_weights,
)
from .federated import run_training
from .imaging import IDENTITY, AffineParams, Slice2D
from .metrics import MetricsReport, evaluate, identity_generator, to_metric_range, translate_batch
from .mud import (
    NOISE_NONE,
    ClientDataset,
    ClientSpec,
    Corpus,
    SamplePair,
    load_slice_corpus,
    partition_clients,
    read_manifest,
    split_holdout,
    write_manifest,
)
from .networks import NetConfig
from .phantom import MODALITY_MAPS, PhantomSpec, generate_phantom, phantom_remap

log = logging.getLogger("fedmed_atl")

ENV_OUT = "FEDMED_ATL_OUT"
DEFAULT_OUT = "fedmed-out"

METRICS_HEADER = ("experiment", "variant", "noise", "metric", "value")
LOG_HEADER = ("round", "client", "epoch", "step", "phase", "loss", "value")
ABLATION_HEADER = ("method", "variant", "views", "noise", "mae", "psnr", "ssim", "n_images", "status", "error")

SPLIT_STREAM, PARTITION_STREAM, MONTAGE_STREAM = 11, 12, 13


class CommandError(RuntimeError):
    pass


# --- helpers ----------------------------------------------------------------------

def output_dir(args, sub: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(ENV_OUT, DEFAULT_OUT)) / sub


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(v: float) -> str:
    return "inf" if v == math.inf else repr(float(v))


def resolve_config(args) -> ExperimentConfig:
    cfg = load_scenario(args.config, args.paper_scale)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.variant is not None:
        changes["variant"] = args.variant
    if args.views is not None:
        changes["views_k"] = args.views
    if args.noise is not None:
        changes["noise"] = args.noise
    if getattr(args, "corpus", None):
        changes["corpus"] = args.corpus
    if args.dp is not None:
        changes["dp"] = replace(cfg.dp, enabled=args.dp)
    train = {}
    for flag, name in (("rounds", "rounds"), ("local_epochs", "local_epochs"), ("batch_size", "batch_size"),
                       ("lr", "learning_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            train[name] = value
    if train:
        try:
            changes["train"] = replace(cfg.train, **train)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if getattr(args, "test_volumes", None) is not None:
        changes["test_volumes"] = args.test_volumes
    return replace(cfg, **changes) if changes else cfg


def write_metrics_csv(path: Path, rows: list[tuple]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for experiment, variant, noise, report in rows:
            for metric in ("mae", "psnr", "ssim"):
                w.writerow([experiment, variant, noise, metric, _fmt(getattr(report, metric))])
    return path


def write_training_log(path: Path, records) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in records:
            for name, value in r.values.items():
                w.writerow([r.round, r.client, r.epoch, r.step, r.phase, name, repr(float(value))])
    return path


# --- prepared data ----------------------------------------------------------------

def load_corpus(cfg: ExperimentConfig) -> Corpus:
    if not cfg.corpus:
        raise ConfigError("no corpus given; pass --corpus or set 'corpus' in the scenario")
    root = Path(cfg.corpus)
    if not (root / "A").is_dir():
        raise CommandError(f"{root}: no corpus found (expected A/ and B/ archive folders)")
    corpus = load_slice_corpus(root, cfg.slices[0], cfg.slices[1], cfg.image_size)
    if not len(corpus):
        raise CommandError(f"{root}: no slices inside window {list(cfg.slices)}")
    return corpus


def prepare_data(cfg: ExperimentConfig, corpus: Corpus, out: Path) -> dict:
    """Hold out test volumes, partition the rest into client shards and write them."""
    split_rng = np.random.default_rng([cfg.seed, SPLIT_STREAM])
    train, test = split_holdout(corpus, cfg.test_volumes, split_rng)
    datasets = partition_clients(train, cfg.client_specs(), np.random.default_rng([cfg.seed, PARTITION_STREAM]))
    out.mkdir(parents=True, exist_ok=True)
    clients = []
    for ds in datasets:
        d = out / ds.client_id
        d.mkdir(exist_ok=True)
        a, b = ds.arrays()
        np.save(d / "A.npy", a)
        np.save(d / "B.npy", b)
        write_manifest(d / "manifest.csv", [ds])
        clients.append({"id": ds.client_id, "proportion": ds.proportion, "nominal_proportion": ds.spec.proportion,
                        "pairing": ds.spec.pairing, "noise": ds.spec.noise.name,
                        "paired_fraction": ds.spec.paired_fraction, "subjects": ds.subjects, "n_pairs": len(ds)})
    write_manifest(out / "manifest.csv", datasets)
    test_pairs = [SamplePair(test.slice(s, "A", z), test.slice(s, "B", z), s, s, z, IDENTITY, IDENTITY)
                  for s, v in test.volumes.items() for z in v.slice_indices]
    test_ds = ClientDataset("test", test.subjects, test_pairs, 1.0, ClientSpec("test", 1.0, "paired", NOISE_NONE))
    (out / "test").mkdir(exist_ok=True)
    a, b = test_ds.arrays()
    np.save(out / "test" / "A.npy", a)
    np.save(out / "test" / "B.npy", b)
    write_manifest(out / "test" / "manifest.csv", [test_ds])
    meta = {"config": cfg.to_dict(), "config_digest": cfg.digest(), "noise": cfg.noise_label,
            "clients": clients, "test_subjects": test.subjects, "n_test": len(test_pairs)}
    (out / "prepared.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def _pairs_from(folder: Path) -> list[SamplePair]:
    a = np.load(folder / "A.npy")
    b = np.load(folder / "B.npy")
    rows = read_manifest(folder / "manifest.csv")
    if not len(a) == len(b) == len(rows):
        raise CommandError(f"{folder}: arrays and manifest disagree in length")
    pairs = []
    for i, r in enumerate(rows):
        pa = AffineParams(r["rot_a"], r["tx_a"], r["ty_a"], r["scale_a"])
        pb = AffineParams(r["rot_b"], r["tx_b"], r["ty_b"], r["scale_b"])
        pairs.append(SamplePair(Slice2D(a[i]), Slice2D(b[i]), r["subject_a"], r["subject_b"],
                                r["slice_index"], pa, pb))
    return pairs


def load_prepared(folder: Path) -> tuple[dict, list[ClientDataset], list[SamplePair]]:
    meta_path = folder / "prepared.json"
    if not meta_path.exists():
        raise CommandError(f"{folder}: not a prepared scenario (run 'fedmed-atl prepare' first)")
    meta = json.loads(meta_path.read_text())
    datasets = []
    for c in meta["clients"]:
        spec = ClientSpec(c["id"], c["nominal_proportion"], c["pairing"], c["noise"], c["paired_fraction"])
        datasets.append(ClientDataset(c["id"], c["subjects"], _pairs_from(folder / c["id"]), c["proportion"], spec))
    test_pairs = _pairs_from(folder / "test")
    return meta, datasets, test_pairs


# --- training and evaluation --------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, data_dir: Path, out: Path, corpus: Corpus | None = None) -> tuple[MetricsReport, RunManifest]:
    """Train on a prepared scenario, checkpoint every round, log losses and score the result."""
    train_cfg = cfg.train_config()
    meta, datasets, test_pairs = load_prepared(data_dir)
    if cfg.noise is not None and cfg.noise != meta["noise"]:
        raise ConfigError(f"{data_dir} was prepared with noise {meta['noise']!r}, not {cfg.noise!r}")
    noise = meta["noise"]
    out.mkdir(parents=True, exist_ok=True)
    seeds = {"seed": cfg.seed, "split": [cfg.seed, SPLIT_STREAM], "partition": [cfg.seed, PARTITION_STREAM],
             "gen_ab": cfg.seed * 1000 + 901, "gen_ba": cfg.seed * 1000 + 902}
    manifest = RunManifest(config_digest=cfg.digest(), seeds=seeds, started=_now(),
                           config={**cfg.to_dict(), "prepared": str(data_dir), "noise_resolved": noise})
    ck_meta = {"config_digest": cfg.digest(), "net": asdict(train_cfg.net), "variant": cfg.variant,
               "views": cfg.views_k, "noise": noise, "experiment": cfg.experiment, "seed": cfg.seed}

    def on_round(server, clients):
        path = save_checkpoint(out / "checkpoints" / f"round_{server.round_index:03d}.fmck", server, clients, ck_meta)
        manifest.checkpoints.append(str(path))

    records = []
    try:
        result = run_training(train_cfg, cfg.dp, datasets, on_round=on_round,
                              corpus=corpus if train_cfg.resample_noise else None, records=records)
    except Exception:
        write_training_log(out / "train_log.csv", records)
        manifest.status, manifest.finished = "failed", _now()
        manifest.write(out / "run_manifest.json")
        raise
    write_training_log(out / "train_log.csv", records)
    report = evaluate(result.server.gen_ab, test_pairs)
    manifest.metrics_csv = str(write_metrics_csv(out / "metrics.csv", [(cfg.experiment, cfg.label, noise, report)]))
    manifest.status, manifest.finished = "ok", _now()
    manifest.write(out / "run_manifest.json")
    return report, manifest


def _generator_from(args):
    if args.oracle == "identity":
        return identity_generator, "identity", {}
    if args.oracle == "remap":
        def remap(images):
            return phantom_remap(to_metric_range(np.asarray(images, dtype=np.float64)), args.remap) * 2 - 1
        return remap, f"remap-{args.remap}", {}
    if not args.checkpoint:
        raise ConfigError("pass --checkpoint or --oracle")
    path = Path(args.checkpoint)
    if not path.exists():
        raise CommandError(f"{path}: checkpoint not found")
    try:
        ck_meta, sections = load_checkpoint(path)
    except CheckpointError as exc:
        raise CommandError(str(exc)) from None
    gen = restore_generator(sections, "gen_ab", NetConfig(**ck_meta["net"]))
    return gen, method_label(ck_meta.get("variant", "atl"), ck_meta.get("views", 4)), ck_meta


# --- commands -----------------------------------------------------------------------

def cmd_phantom(args) -> int:
    try:
        spec = PhantomSpec(args.n_volumes, args.slices, args.size, args.seed or 0, args.modality_map)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = output_dir(args, "phantom")
    files = write_corpus(generate_phantom(spec), out)
    manifest = {"spec": asdict(spec), "slices": [0, spec.slices_per_volume - 1],
                "files": {str(p.relative_to(out)): _sha256(p) for p in sorted(files)}}
    (out / "phantom.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(files)} archives to {out}")
    return 0


def cmd_prepare(args) -> int:
    cfg = resolve_config(args)  # proportion errors surface here, before any writes
    corpus = load_corpus(cfg)
    out = output_dir(args, "prepared")
    meta = prepare_data(cfg, corpus, out)
    sizes = ", ".join(f"{c['id']}={c['n_pairs']}" for c in meta["clients"])
    print(f"prepared {out}: {sizes}; test={meta['n_test']}")
    return 0


def _data_dir(args, cfg: ExperimentConfig, out: Path) -> tuple[Path, Corpus | None]:
    if args.data:
        return Path(args.data), (load_corpus(cfg) if cfg.train.resample_noise else None)
    if not cfg.corpus:
        raise ConfigError("pass --data (a prepared scenario) or --corpus")
    corpus = load_corpus(cfg)
    data = out / "prepared"
    prepare_data(cfg, corpus, data)
    return data, corpus


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    variant_weights(cfg.variant)  # placeholder variants fail before any work
    out = output_dir(args, "train")
    data, corpus = _data_dir(args, cfg, out)
    report, manifest = run_experiment(cfg, data, out, corpus)
    print(f"{cfg.label}: MAE {report.mae:.4f}  PSNR {report.psnr:.2f}  SSIM {report.ssim:.4f}  "
          f"({len(manifest.checkpoints)} checkpoints in {out / 'checkpoints'})")
    return 0


def cmd_eval(args) -> int:
    if not args.data:
        raise ConfigError("eval needs --data (a prepared scenario)")
    gen, label, ck_meta = _generator_from(args)
    meta, _, test_pairs = load_prepared(Path(args.data))
    if not test_pairs:
        raise CommandError(f"{args.data}: the test set is empty")
    report = evaluate(gen, test_pairs)
    out = output_dir(args, "eval")
    experiment = ck_meta.get("experiment") or meta["config"].get("experiment", "phantom")
    path = write_metrics_csv(out / "metrics.csv", [(experiment, label, meta["noise"], report)])
    print(f"{label}: MAE {report.mae:.4f}  PSNR {report.psnr:.2f}  SSIM {report.ssim:.4f} -> {path}")
    return 0


def render_montage(rows: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> Image.Image:
    """Stack (input, generated, truth) triples in the training range into one 8-bit grid."""
    tiles = [np.concatenate(row, axis=1) for row in rows]
    grid = to_metric_range(np.clip(np.concatenate(tiles, axis=0), -1.0, 1.0))
    return Image.fromarray(np.round(grid * 255).astype(np.uint8), mode="L")


def cmd_montage(args) -> int:
    if not args.data:
        raise ConfigError("montage needs --data (a prepared scenario)")
    gen, label, _ = _generator_from(args)
    _, _, test_pairs = load_prepared(Path(args.data))
    if not test_pairs:
        raise CommandError(f"{args.data}: the test set is empty")
    n = args.samples
    if n < 1:
        raise ConfigError("--samples must be >= 1")
    if n > len(test_pairs):
        log.warning("requested %d samples but only %d are available; using all", n, len(test_pairs))
        n = len(test_pairs)
    rng = np.random.default_rng([args.seed or 0, MONTAGE_STREAM])
    idx = sorted(rng.choice(len(test_pairs), size=n, replace=False).tolist())
    a = np.stack([test_pairs[i].img_a.pixels for i in idx])
    out_imgs = translate_batch(gen, a)
    rows = [(a[k], out_imgs[k], test_pairs[i].img_b.pixels) for k, i in enumerate(idx)]
    out = Path(args.out) if args.out and args.out.endswith(".png") else output_dir(args, "montage") / "montage.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    render_montage(rows).save(out, format="PNG")
    print(f"{label}: {n}x3 montage -> {out}")
    return 0


def _ablation_cell(job: tuple) -> dict:
    cfg, data, out = job
    row = {"method": cfg.label, "variant": cfg.variant, "views": cfg.views_k, "noise": cfg.noise,
           "mae": "", "psnr": "", "ssim": "", "n_images": "", "status": "ok", "error": ""}
    try:
        report, _ = run_experiment(cfg, Path(data), Path(out))
        row.update(mae=_fmt(report.mae), psnr=_fmt(report.psnr), ssim=_fmt(report.ssim), n_images=report.n_images)
    except Exception as exc:  # a failed cell is recorded and the sweep continues
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = output_dir(args, "ablate")
    corpus = load_corpus(cfg)
    noises = [args.noise] if args.noise else list(NOISE_CHOICES)
    jobs = []
    for noise in noises:
        data = out / f"prepared-{noise}"
        prepare_data(replace(cfg, noise=noise), corpus, data)
        for label, variant, views in ABLATION_ROWS:
            cell = replace(cfg, variant=variant, views_k=views, noise=noise)
            jobs.append((cell, str(data), str(out / "cells" / f"{label}-{noise}")))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_ablation_cell, jobs))
    else:
        rows = []
        for job in jobs:
            log.info("ablation cell %s / %s", job[0].label, job[0].noise)
            rows.append(_ablation_cell(job))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_HEADER)
        w.writeheader()
        w.writerows(rows)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            for metric in ("mae", "psnr", "ssim"):
                w.writerow([cfg.experiment, r["method"], r["noise"], metric, r[metric]])
    with open(out / "ablation_table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [f"{n}_{m}" for n in noises for m in ("mae", "psnr", "ssim")])
        for label, _, _ in ABLATION_ROWS:
            cells = {r["noise"]: r for r in rows if r["method"] == label}
            w.writerow([label] + [cells[n][m] for n in noises for m in ("mae", "psnr", "ssim")])
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"ablation: {len(rows) - len(failed)}/{len(rows)} cells ok -> {out / 'ablation.csv'}")
    for r in failed:
        print(f"  failed {r['method']} / {r['noise']}: {r['error']}", file=sys.stderr)
    return 1 if failed else 0


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario JSON document")
    common.add_argument("--seed", type=int, help="master seed (default: scenario value or 0)")
    common.add_argument("--out", help=f"output location (default: ${ENV_OUT}/<command>)")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--views", type=int, choices=VIEW_CHOICES)
    common.add_argument("--noise", choices=NOISE_CHOICES)
    common.add_argument("--paper-scale", action="store_true",
                        help="256x256 slices 50-80 and the larger networks")
    common.add_argument("--dp", action=argparse.BooleanOptionalAction, default=None,
                        help="clip and noise generator gradients (default off)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--corpus", help="slice-archive directory with A/ and B/ subfolders")
    data.add_argument("--test-volumes", type=int, help="volumes held out for evaluation")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--rounds", type=int)
    training.add_argument("--local-epochs", type=int)
    training.add_argument("--batch-size", type=int)
    training.add_argument("--lr", type=float)

    scoring = argparse.ArgumentParser(add_help=False)
    scoring.add_argument("--data", help="prepared scenario directory")
    scoring.add_argument("--checkpoint", help="checkpoint file (.fmck)")
    scoring.add_argument("--oracle", choices=("identity", "remap"), help="score a pseudo-generator instead")
    scoring.add_argument("--remap", choices=sorted(MODALITY_MAPS), default="square",
                         help="phantom intensity map used by --oracle remap")

    parser = argparse.ArgumentParser(prog="fedmed-atl", description="Federated MR modality synthesis with ATL.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic corpus")
    p.add_argument("--n-volumes", type=int, default=20)
    p.add_argument("--slices", type=int, default=8, help="slices per volume")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--modality-map", choices=sorted(MODALITY_MAPS), default="square")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("prepare", parents=[common, data], help="build client shards and the test set")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common, data, training], help="federated training")
    p.add_argument("--data", help="prepared scenario directory (default: prepare from --corpus)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, scoring], help="metrics CSV for a checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("montage", parents=[common, scoring], help="PNG of input / generated / truth rows")
    p.add_argument("--samples", type=int, default=4)
    p.set_defaults(func=cmd_montage)

    p = sub.add_parser("ablate", parents=[common, data, training], help="variant x views x noise grid")
    p.add_argument("--jobs", type=int, default=1, help="cells to run in parallel (default 1, sequential)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fedmed-atl {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, OSError, ValueError, RuntimeError) as exc:
        print(f"fedmed-atl {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
