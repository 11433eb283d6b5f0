"""Deterministic two-phase training loop with resumable checkpoints.

Phase A fits stage 1 on the landmark term alone. Phase B trains every
parameter on the joint loss. Each phase has its own Adam state and early
stopping on validation total loss.

Run directory contents:

    metrics.csv   one row per epoch and split, flushed as it is written
    last.ckpt     full training state after the latest epoch (for resume)
    model.ckpt    best-validation Phase B model (or the final one without validation)
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import kvconfig
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .dataset import load_annotations, parse_label_map, remap_7_to_3, split, stack
from .geometry import normalized_landmark_errors
from .model import (
    MODEL_VERSION,
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    joint_loss,
    landmark_loss,
    stage_param_names,
)
from .numgrad import AdamState, NonFiniteGradientError, adam_step, backward

LOG_HEADER = ["epoch", "phase", "split", "landmark_term", "emotion_term", "total", "acc7", "acc3", "nme"]
MODES = ("joint", "emotion_only", "landmark_only")
EVAL_CHUNK = 100

# Fields that steer a run without changing what it computes; left out of the
# config digest so a resumed run matches an uninterrupted one.
RUN_CONTROL = ("dataset", "out_dir", "stop_after", "resume")


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = ""
    out_dir: str = "run"
    mode: str = "joint"
    seed: int = 0
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 0.4
    beta: float = 0.6
    phase_a_epochs: int = 50
    phase_b_epochs: int = 150
    patience: int = 20
    val_fraction: float = 0.1
    label_map_3: str = "default"
    stop_after: int | None = None   # epochs to run in this invocation
    resume: str | None = None       # path to a last.ckpt

    def __post_init__(self):
        if self.mode not in MODES:
            raise kvconfig.ConfigError(f"mode must be one of {', '.join(MODES)}; got {self.mode!r}")
        if self.batch_size < 1:
            raise kvconfig.ConfigError(f"batch_size must be >= 1; got {self.batch_size}")
        if not self.lr > 0:
            raise kvconfig.ConfigError(f"lr must be > 0; got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise kvconfig.ConfigError("need 0 <= beta1, beta2 < 1 and eps > 0")
        if self.alpha < 0 or self.beta < 0:
            raise kvconfig.ConfigError("alpha and beta must be >= 0")
        if not sum(self.loss_weights()) > 0:
            raise kvconfig.ConfigError(f"mode {self.mode} with alpha={self.alpha}, beta={self.beta} has no loss")
        if self.phase_a_epochs < 0 or self.phase_b_epochs < 0 or self.patience < 1:
            raise kvconfig.ConfigError("epoch counts must be >= 0 and patience >= 1")
        if not 0 <= self.val_fraction < 1:
            raise kvconfig.ConfigError(f"val_fraction must lie in [0, 1); got {self.val_fraction}")
        if self.stop_after is not None and self.stop_after < 1:
            raise kvconfig.ConfigError("stop_after must be >= 1")
        parse_label_map(self.label_map_3)  # validates

    @classmethod
    def load(cls, path=None, **overrides) -> "TrainConfig":
        """Defaults, then the key=value file, then non-None ``overrides``."""
        values = kvconfig.read_kv(path) if path is not None else {}
        cfg = kvconfig.build(cls, values, str(path) if path else "config")
        return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})

    def loss_weights(self) -> tuple[float, float]:
        if self.mode == "emotion_only":
            return 0.0, self.beta
        if self.mode == "landmark_only":
            return self.alpha, 0.0
        return self.alpha, self.beta

    def schedule(self) -> tuple[int, int]:
        """(Phase A, Phase B) epochs. emotion_only moves Phase A's epochs into Phase B."""
        if self.mode == "emotion_only":
            return 0, self.phase_a_epochs + self.phase_b_epochs
        return self.phase_a_epochs, self.phase_b_epochs

    def echo(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in RUN_CONTROL}

    def digest(self) -> str:
        text = "\n".join(f"{k}={v!r}" for k, v in sorted(self.echo().items()))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class RunResult:
    out_dir: Path
    model_path: Path
    last_path: Path
    log_path: Path
    epochs_run: int
    finished: bool


# ---------------------------------------------------------------------------
# checkpoint <-> model


def model_checkpoint(params: ModelParams, header: dict | None = None,
                     extra: dict[str, np.ndarray] | None = None) -> Checkpoint:
    hdr = {"model_version": params.version, "model_config": asdict(params.config)}
    hdr.update(header or {})
    tensors = {f"param/{k}": v for k, v in params.arrays().items()}
    tensors["canonical"] = params.canonical
    tensors.update(extra or {})
    return Checkpoint(hdr, tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    hdr = ckpt.header
    if hdr.get("model_version") != MODEL_VERSION:
        raise CheckpointError(f"checkpoint holds model {hdr.get('model_version')!r}, expected {MODEL_VERSION!r}")
    try:
        config = ModelConfig(**hdr["model_config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint model config unreadable: {exc}") from None
    template = init_params(config, 0, ckpt.tensors["canonical"][None])
    for name, t in template.tensors.items():
        arr = ckpt.tensors.get(f"param/{name}")
        if arr is None:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if arr.shape != t.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, config implies {t.shape}")
        t.values = arr
    template.canonical = ckpt.tensors["canonical"]
    return template


def load_model(path) -> ModelParams:
    return model_from_checkpoint(load_checkpoint(path))


# ---------------------------------------------------------------------------
# metrics


def _batch_stats(out, gt_shapes, labels, label_map) -> dict[str, float]:
    """Summed (not averaged) accuracy and NME counts for one batch."""
    nme = normalized_landmark_errors(out.S.values, gt_shapes)
    stats = {"nme": float(nme.sum())}
    if out.E is not None:
        pred = np.argmax(out.E, axis=1)
        stats["acc7"] = float(np.sum(pred == labels))
        stats["acc3"] = float(np.sum(remap_7_to_3(pred, label_map) == remap_7_to_3(labels, label_map)))
    return stats


class _Meter:
    def __init__(self):
        self.n = 0
        self.sums: dict[str, float] = {}

    def add(self, loss, stats: dict[str, float], n: int) -> None:
        self.n += n
        for k, v in (("landmark_term", loss.landmark_term * n), ("emotion_term", loss.emotion_term * n),
                     ("total", float(loss.total.values) * n)):
            self.sums[k] = self.sums.get(k, 0.0) + v
        for k, v in stats.items():
            self.sums[k] = self.sums.get(k, 0.0) + v

    def row(self) -> dict[str, float]:
        return {k: self.sums.get(k, math.nan) / self.n for k in LOG_HEADER[3:]}


def _loss(phase: str, out, shapes, labels, alpha, beta):
    if phase == "A":
        return landmark_loss(out, shapes, alpha)
    return joint_loss(out, shapes, labels, alpha, beta)


def evaluate_split(params: ModelParams, data, phase: str, alpha: float, beta: float, label_map) -> dict[str, float]:
    images, shapes, labels = data
    meter = _Meter()
    upto = 1 if phase == "A" else None
    for s in range(0, len(labels), EVAL_CHUNK):
        sl = slice(s, s + EVAL_CHUNK)
        out = forward(params, images[sl], upto=upto)
        meter.add(_loss(phase, out, shapes[sl], labels[sl], alpha, beta),
                  _batch_stats(out, shapes[sl], labels[sl], label_map), len(labels[sl]))
    return meter.row()


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


# ---------------------------------------------------------------------------
# state


def _adam_tensors(state: AdamState) -> dict[str, np.ndarray]:
    out = {f"adam.m/{k}": v for k, v in state.m.items()}
    out.update({f"adam.v/{k}": v for k, v in state.v.items()})
    return out


def _adam_from(tensors: dict[str, np.ndarray], t: int) -> AdamState:
    m = {k[len("adam.m/"):]: v for k, v in tensors.items() if k.startswith("adam.m/")}
    v = {k[len("adam.v/"):]: v for k, v in tensors.items() if k.startswith("adam.v/")}
    return AdamState(m, v, t)


def _active_names(params: ModelParams, phase: str) -> list[str]:
    return stage_param_names(1) if phase == "A" else sorted(params.tensors)


def _open_log(path: Path, keep_epochs: int) -> "csv.writer":
    """Open the metric log for appending, dropping rows past ``keep_epochs``."""
    rows = []
    if keep_epochs > 0 and path.exists():
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            if next(reader, None) != LOG_HEADER:
                raise TrainError(f"{path}: not a metric log")
            rows = [r for r in reader if int(r[0]) <= keep_epochs]
    fh = open(path, "w", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    writer.writerows(rows)
    fh.flush()
    return fh, writer


def _prepare_data(cfg: TrainConfig):
    if not cfg.dataset:
        raise kvconfig.ConfigError("no dataset given")
    samples = load_annotations(cfg.dataset)
    if not samples:
        raise kvconfig.ConfigError(f"dataset {cfg.dataset} is empty")
    train_s, val_s, _ = split(samples, (1.0 - cfg.val_fraction, cfg.val_fraction, 0.0), cfg.seed)
    if not train_s:
        raise kvconfig.ConfigError("training split is empty")
    return stack(train_s), (stack(val_s) if val_s else None)


def train(cfg: TrainConfig) -> RunResult:
    """Run (or resume) training as configured; returns where outputs went."""
    label_map = parse_label_map(cfg.label_map_3)
    train_data, val_data = _prepare_data(cfg)
    alpha, beta = cfg.loss_weights()
    epochs_a, epochs_b = cfg.schedule()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path, last_path, model_path = out_dir / "metrics.csv", out_dir / "last.ckpt", out_dir / "model.ckpt"

    model_cfg = ModelConfig(alpha=alpha, beta=beta)
    if cfg.resume:
        ckpt = load_checkpoint(cfg.resume)
        hdr = ckpt.header
        if hdr.get("config_digest") != cfg.digest():
            raise TrainError(f"{cfg.resume}: training config differs from the one that wrote the checkpoint")
        params = model_from_checkpoint(ckpt)
        rng = np.random.default_rng()
        rng.bit_generator.state = hdr["rng_state"]
        epoch, phase, phase_epoch = hdr["epoch"], hdr["phase"], hdr["phase_epoch"]
        best, bad = hdr["best_val"], hdr["bad_epochs"]
        state = _adam_from(ckpt.tensors, hdr["adam_t"])
    else:
        params = init_params(model_cfg, cfg.seed, train_data[1])
        model_path.unlink(missing_ok=True)
        rng = np.random.default_rng(cfg.seed)
        epoch, phase_epoch, best, bad = 0, 0, None, 0
        phase = "A" if epochs_a > 0 else ("B" if epochs_b > 0 else "done")
        state = AdamState.zeros_like({k: params[k].values for k in _active_names(params, phase)})

    fh, writer = _open_log(log_path, epoch)
    n_train = len(train_data[2])
    ran = 0

    def snapshot() -> Checkpoint:
        header = {"config": cfg.echo(), "config_digest": cfg.digest(), "epoch": epoch, "phase": phase,
                  "phase_epoch": phase_epoch, "best_val": best, "bad_epochs": bad, "adam_t": state.t,
                  "rng_state": rng.bit_generator.state}
        return model_checkpoint(params, header, _adam_tensors(state))

    try:
        while phase != "done" and (cfg.stop_after is None or ran < cfg.stop_after):
            names = _active_names(params, phase)
            upto = 1 if phase == "A" else None
            meter = _Meter()
            epoch += 1
            order = rng.permutation(n_train)
            for b, start in enumerate(range(0, n_train, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                images, shapes, labels = (a[idx] for a in train_data)
                params.zero_grad()
                out = forward(params, images, upto=upto)
                loss = _loss(phase, out, shapes, labels, alpha, beta)
                if not np.isfinite(loss.total.values):
                    raise TrainError(f"non-finite loss at epoch {epoch}, batch {b}")
                meter.add(loss, _batch_stats(out, shapes, labels, label_map), len(idx))
                backward(loss.total)
                try:
                    new, state = adam_step({k: params[k].values for k in names},
                                           {k: params[k].grad for k in names}, state,
                                           cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, state.t + 1)
                except NonFiniteGradientError as exc:
                    raise TrainError(f"non-finite gradient for {exc.name} at epoch {epoch}, batch {b}") from exc
                params.assign(new)

            rows = [("train", meter.row())]
            if val_data is not None:
                rows.append(("val", evaluate_split(params, val_data, phase, alpha, beta, label_map)))
            for split_name, row in rows:
                writer.writerow([epoch, phase, split_name] + [_fmt(row[k]) for k in LOG_HEADER[3:]])
            fh.flush()

            phase_epoch += 1
            improved = False
            if val_data is not None:
                total = rows[1][1]["total"]
                if best is None or total < best:
                    best, bad, improved = total, 0, True
                else:
                    bad += 1
            limit = epochs_a if phase == "A" else epochs_b
            phase_over = phase_epoch >= limit or (val_data is not None and bad >= cfg.patience)
            if phase == "B" and (improved or val_data is None):
                save_checkpoint(model_checkpoint(params, {"epoch": epoch, "config_digest": cfg.digest()}),
                                model_path)
            if phase_over:
                phase = "B" if phase == "A" and epochs_b > 0 else "done"
                phase_epoch, best, bad = 0, None, 0
                if phase == "B":
                    state = AdamState.zeros_like({k: params[k].values for k in _active_names(params, "B")})
            save_checkpoint(snapshot(), last_path)
            ran += 1
    finally:
        fh.close()

    if phase == "done" and not model_path.exists():
        # no Phase B ran: the final state is the deliverable
        save_checkpoint(model_checkpoint(params, {"epoch": epoch, "config_digest": cfg.digest()}), model_path)
    return RunResult(out_dir, model_path, last_path, log_path, ran, phase == "done")


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]


def read_log(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

