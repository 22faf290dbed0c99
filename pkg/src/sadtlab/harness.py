"""Experiment runner: deterministic training loop with CSV/JSON logging.

All randomness is derived from the master seed through fixed spawn keys:
batch order from (1, epoch), CutMix draws from (2, epoch, batch), strategy
noise from (3, epoch, batch). Strategies therefore consume byte-identical
batch streams for a shared seed, and identical configs reproduce identical
logs. Wall-clock timings are kept out of the metric CSV (they are the one
non-reproducible quantity) and go to an optional sidecar instead.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_fingerprint_fields, write_resolved
from .data import Dataset, MixedBatch, cutmix, load_cifar_binary, load_idx, make_batches
from .metrics import estimate_sharpness, evaluate, model_divergence
from .nn import Model, build_simple_cnn, build_tiny_mlp, save_checkpoint
from .optim import AdamState, Schedule, cosine_lr
from .strategies import NonFiniteLossError, Strategy

CSV_HEADER = "step,epoch,phase,task_loss,kl_loss,lr,grad_norm,accuracy,sharpness,divergence,wall_ms"

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
RESOLVED_FILE = "resolved.ini"
HASHES_FILE = "batch_hashes.txt"
CHECKPOINT_FILE = "final.ckpt"
ABORT_CHECKPOINT_FILE = "abort.ckpt"
WALL_TIMES_FILE = "wall_times.csv"


@dataclass
class RunRow:
    step: int
    epoch: int
    phase: str  # step | eval_train | eval_test | probe | final_test
    task_loss: float | None = None
    kl_loss: float | None = None
    lr: float | None = None
    grad_norm: float | None = None
    accuracy: float | None = None
    sharpness: float | None = None
    divergence: float | None = None
    wall_ms: float | None = None  # stays empty in the deterministic CSV

    def csv_line(self) -> str:
        cells = [str(self.step), str(self.epoch), self.phase]
        for value in (
            self.task_loss, self.kl_loss, self.lr, self.grad_norm,
            self.accuracy, self.sharpness, self.divergence, self.wall_ms,
        ):
            cells.append("" if value is None else repr(float(value)))
        return ",".join(cells)


@dataclass
class RunLog:
    config: ExperimentConfig
    rows: list[RunRow] = field(default_factory=list)
    batch_hashes: list[str] = field(default_factory=list)
    wall_times: list[tuple[int, float]] = field(default_factory=list)
    final_accuracy: float | None = None
    final_loss: float | None = None

    def csv_text(self) -> str:
        return "\n".join([CSV_HEADER, *(row.csv_line() for row in self.rows)]) + "\n"


def _load_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.data_format == "idx":
        train = load_idx(cfg.train_images, cfg.train_labels, cfg.num_classes)
        test = load_idx(cfg.test_images, cfg.test_labels, cfg.num_classes)
    else:
        train = load_cifar_binary(cfg.train_files, cfg.num_classes)
        test = load_cifar_binary(cfg.test_files, cfg.num_classes)
    return train.subset(cfg.train_size), test.subset(cfg.test_size)


def _build_model(cfg: ExperimentConfig, train: Dataset) -> Model:
    shape = train.images.shape[1:]
    if cfg.arch == "simple_cnn":
        return build_simple_cnn(shape, cfg.num_classes, cfg.init_seed)
    return build_tiny_mlp(int(np.prod(shape)), cfg.hidden_dims, cfg.num_classes, cfg.init_seed)


def _batch_hash(batch: MixedBatch) -> str:
    digest = hashlib.sha256()
    digest.update(batch.images.tobytes())
    digest.update(batch.label_a.tobytes())
    digest.update(batch.label_b.tobytes())
    digest.update(struct.pack("<d", batch.lam))
    return digest.hexdigest()


def _file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def dataset_fingerprint(cfg: ExperimentConfig) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(config_fingerprint_fields(cfg), sort_keys=True).encode())
    if cfg.data_format == "idx":
        paths = [cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels]
    else:
        paths = [*cfg.train_files, *cfg.test_files]
    for path in paths:
        digest.update(_file_digest(path).encode())
    return digest.hexdigest()


def _spawn(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))


def _probe_batches(train: Dataset, cfg: ExperimentConfig):
    count = min(cfg.probe_batches * cfg.batch_size, train.n)
    images = train.images[:count]
    labels = train.labels[:count]
    labeled = [
        (images[i : i + cfg.batch_size], labels[i : i + cfg.batch_size])
        for i in range(0, count, cfg.batch_size)
    ]
    return labeled, [img for img, _ in labeled]


def run_experiment(cfg: ExperimentConfig) -> RunLog:
    """Train per the config, logging every step, eval, and probe.

    Writes metrics.csv, resolved.ini, summary.json, batch_hashes.txt, and the
    final checkpoint into the output directory. A non-finite loss aborts the
    run after saving the last good checkpoint and flushing the log.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / RESOLVED_FILE)

    train, test = _load_dataset(cfg)
    model = _build_model(cfg, train)
    initial_model = Model(model.arch, model.params.clone(), model.input_shape)
    strategy = Strategy(
        id=cfg.strategy_id,
        rho=cfg.rho,
        sigma_w=cfg.sigma_w,
        sigma_g=cfg.sigma_g,
        ascent_lr=cfg.ascent_lr,
        agc_lambda=cfg.agc_lambda,
        rollback_to_w=cfg.rollback_to_w,
    )
    state = AdamState(model.params)
    batches_per_epoch = (train.n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch
    schedule = Schedule(total_steps, cfg.lr0) if total_steps else None
    sharp_batches, div_batches = _probe_batches(train, cfg)

    log = RunLog(cfg)

    def eval_pair(step: int, epoch: int) -> None:
        for phase, dataset in (("eval_train", train), ("eval_test", test)):
            res = evaluate(model, dataset)
            log.rows.append(
                RunRow(step, epoch, phase, task_loss=res.mean_loss, accuracy=res.accuracy)
            )

    eval_pair(0, 0)
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            for i, idx in enumerate(make_batches(train, cfg.batch_size, _spawn(cfg.seed, 1, epoch))):
                images, labels = train.images[idx], train.labels[idx]
                if cfg.cutmix and len(idx) >= 2:
                    mix_seed = int(_spawn(cfg.seed, 2, epoch, i).generate_state(1)[0])
                    batch = cutmix(images, labels, cfg.cutmix_alpha, mix_seed)
                else:
                    batch = MixedBatch.plain(images, labels)
                log.batch_hashes.append(_batch_hash(batch))
                lr = cosine_lr(schedule, step)
                report = strategy.step(
                    model, batch, state, lr, noise_seed=_spawn(cfg.seed, 3, epoch, i)
                )
                step += 1
                log.rows.append(
                    RunRow(
                        step, epoch, "step",
                        task_loss=report.task_loss, kl_loss=report.kl_loss,
                        lr=report.lr, grad_norm=report.grad_norm,
                    )
                )
                log.wall_times.append((step, report.wall_ms))
            eval_pair(step, epoch)
            if cfg.probe_every and epoch % cfg.probe_every == 0:
                sharp = estimate_sharpness(model, sharp_batches, cfg.probe_rho)
                div = model_divergence(model, initial_model, div_batches)
                log.rows.append(
                    RunRow(step, epoch, "probe", sharpness=sharp.value, divergence=div.value)
                )
    except NonFiniteLossError as exc:
        save_checkpoint(model.params, out / ABORT_CHECKPOINT_FILE)
        _write_outputs(log, out, aborted=str(exc))
        tail = "\n".join(row.csv_line() for row in log.rows[-5:])
        raise RuntimeError(
            f"non-finite loss at step {step + 1}: {exc}\nlast rows:\n{tail}"
        ) from exc

    final = evaluate(model, test)
    log.rows.append(
        RunRow(step, cfg.epochs, "final_test", task_loss=final.mean_loss, accuracy=final.accuracy)
    )
    log.final_accuracy = final.accuracy
    log.final_loss = final.mean_loss
    save_checkpoint(model.params, out / CHECKPOINT_FILE)
    _write_outputs(log, out)
    return log


def _write_outputs(log: RunLog, out: Path, aborted: str | None = None) -> None:
    cfg = log.config
    (out / METRICS_FILE).write_text(log.csv_text())
    (out / HASHES_FILE).write_text("\n".join(log.batch_hashes) + ("\n" if log.batch_hashes else ""))
    hash_digest = hashlib.sha256("".join(log.batch_hashes).encode()).hexdigest()
    summary = {
        "version": __version__,
        "strategy": cfg.strategy_id,
        "arch": cfg.arch,
        "seed": cfg.seed,
        "init_seed": cfg.init_seed,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "steps": sum(1 for r in log.rows if r.phase == "step"),
        "dataset_fingerprint": dataset_fingerprint(cfg),
        "batch_stream_digest": hash_digest,
        "final_test_accuracy": log.final_accuracy,
        "final_test_loss": log.final_loss,
        "aborted": aborted,
    }
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if cfg.wall_times:
        lines = ["step,wall_ms"]
        lines += [f"{s},{ms:.3f}" for s, ms in log.wall_times]
        (out / WALL_TIMES_FILE).write_text("\n".join(lines) + "\n")


def load_run(run_dir) -> dict:
    """Read a completed run directory back for comparison."""
    run_dir = Path(run_dir)
    summary = json.loads((run_dir / SUMMARY_FILE).read_text())
    rows: list[dict] = []
    with open(run_dir / METRICS_FILE, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {"step": int(raw["step"]), "epoch": int(raw["epoch"]), "phase": raw["phase"]}
            for key in ("task_loss", "kl_loss", "lr", "grad_norm", "accuracy",
                        "sharpness", "divergence", "wall_ms"):
                row[key] = float(raw[key]) if raw[key] else None
            rows.append(row)
    return {"dir": str(run_dir), "summary": summary, "rows": rows}
