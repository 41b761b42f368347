"""Deterministic training loop and run artifacts.

Metrics are line-delimited JSON with a fixed field order so identical
(config, seed) runs produce byte-identical files; wall-clock timing is
therefore opt-in (log_wall_time) and recorded as null by default.
Checkpoints are little-endian binary with a name/shape table followed by
raw parameter data; batch-norm running statistics are stored alongside
the parameters so eval-mode inference is self-contained.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nn, optim
from .config import ConfigError, RunConfig
from .data import Dataset, gen_blobs, load_idx
from .tensor import DTYPES, Rng


class TrainAbortError(RuntimeError):
    pass


CKPT_MAGIC = b"SGPH"
CKPT_VERSION = 1


def _pin_mmap_threshold() -> None:
    """Pins glibc's mmap threshold (default behavior raises it adaptively),
    so the multi-megabyte tape buffers churned every step keep going through
    mmap and return to the OS when freed; otherwise a long run ratchets up
    heap it never gives back. No-op off glibc."""
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(1 << 20))  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass


def make_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset_kind == "blobs":
        return gen_blobs(cfg.dataset_n, cfg.dataset_dims, cfg.dataset_classes,
                         cfg.dataset_noise, cfg.dataset_seed)
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        if not getattr(cfg, f"dataset_{key}"):
            raise ConfigError(f"dataset.kind=idx requires dataset.{key}")
    return load_idx(cfg.dataset_train_images, cfg.dataset_train_labels,
                    cfg.dataset_test_images, cfg.dataset_test_labels,
                    cfg.dataset_subset_n)


def build_from_config(cfg: RunConfig, dataset: Dataset) -> nn.Model:
    return nn.build_model(
        cfg.model, Rng(cfg.seed), in_shape=dataset.in_shape,
        n_classes=dataset.n_classes, dtype=DTYPES[cfg.dtype],
        bias_second_order=cfg.bias_second_order,
    )


def opt_config(cfg: RunConfig, tau: float | None = None) -> optim.SgdPhConfig:
    return optim.SgdPhConfig(
        tau=cfg.tau if tau is None else tau, tau_so=cfg.tau_so, alpha=cfg.alpha,
        beta_m=cfg.beta_m, eta=cfg.eta, eps=cfg.eps,
        momentum_convention=cfg.momentum_convention,
    )


def evaluate(model: nn.Model, x: np.ndarray, y: np.ndarray, batch_size: int,
             dtype) -> tuple[float, float]:
    """Eval-mode pass (running statistics, no tape): mean loss and accuracy."""
    total_loss = 0.0
    hits = 0
    for lo in range(0, x.shape[0], batch_size):
        xb = x[lo : lo + batch_size].astype(dtype)
        yb = y[lo : lo + batch_size]
        logits = model.forward_np(xb, training=False).astype(np.float64)
        total_loss += nn.softmax_cross_entropy_np(logits, yb) * xb.shape[0]
        hits += int(np.sum(np.argmax(logits, axis=1) == yb))
    n = x.shape[0]
    return total_loss / n, hits / n


@dataclass
class TrainResult:
    cfg: RunConfig
    model: nn.Model
    dataset: Dataset
    records: list[dict]
    counters: dict[str, int]
    metrics_path: str
    checkpoint_path: str

    @property
    def final_test_accuracy(self) -> float:
        tests = [r for r in self.records if r["split"] == "test"]
        return tests[-1]["accuracy"] if tests else float("nan")


def _record(epoch: int, step: int, split: str, loss, accuracy, lr: float,
            wall_ms, hstats) -> dict:
    rec = {
        "epoch": epoch, "step": step, "split": split, "loss": loss,
        "accuracy": accuracy, "lr": lr, "wall_ms": wall_ms,
    }
    if hstats is not None:
        rec["hessian"] = hstats
    return rec


def _hessian_stats(state: optim.OptState, one_d_names: list[str]) -> list[dict]:
    out = []
    for name in one_d_names:
        m_h = state[name].m_h
        out.append({
            "name": name,
            "min": float(np.min(m_h)),
            "mean": float(np.mean(m_h)),
            "max": float(np.max(m_h)),
        })
    return out


def train(cfg: RunConfig) -> TrainResult:
    _pin_mmap_threshold()
    dataset = make_dataset(cfg)
    model = build_from_config(cfg, dataset)
    dtype = DTYPES[cfg.dtype]
    params = model.parameters()
    one_d = [p.name for p in params if p.kind == ad.CHANNELWISE_1D]
    use_hessian = cfg.optimizer == "sgdph" and bool(one_d)
    state = optim.OptState(params)
    counters = {"steps": 0, "hdiag_calls": 0, "backward_calls": 0}
    records: list[dict] = []

    x_train = dataset.x_train.astype(dtype)
    y_train = dataset.y_train
    n = x_train.shape[0]

    for path in (cfg.out_metrics, cfg.out_checkpoint):
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)

    with open(cfg.out_metrics, "w", encoding="utf-8") as metrics_file:

        def emit(rec: dict) -> None:
            records.append(rec)
            metrics_file.write(json.dumps(rec, separators=(",", ":")) + "\n")

        for epoch in range(cfg.epochs):
            tau_epoch = optim.decayed_tau(cfg.tau, epoch, cfg.decay_every, cfg.lr_decay_factor)
            step_cfg = opt_config(cfg, tau=tau_epoch)
            perm = Rng(cfg.seed ^ epoch).permutation(n)
            n_batches = 0
            for step, lo in enumerate(range(0, n, cfg.batch_size)):
                t0 = time.perf_counter() if cfg.log_wall_time else None
                idx = perm[lo : lo + cfg.batch_size]
                xb, yb = x_train[idx], y_train[idx]

                graph = ad.Graph()
                env = model.bind(graph)
                logits = model.forward_v(graph.constant(xb), env, training=True)
                loss_var = nn.softmax_cross_entropy(logits, yb)
                loss = float(loss_var.value)
                acc = float(np.mean(np.argmax(logits.value, axis=1) == yb))

                hstats_now = _hessian_stats(state, one_d) if use_hessian else None
                if not np.isfinite(loss):
                    emit(_record(epoch, step, "train", None, None, tau_epoch, None, hstats_now))
                    raise TrainAbortError(
                        f"non-finite loss at epoch {epoch} step {step}; aborting"
                    )

                grads_by_id = ad.backward(loss_var, retain_differentiable=use_hessian)
                counters["backward_calls"] += 1
                grads = {name: grads_by_id[var.id] for name, var in env.items()}

                if cfg.optimizer == "sgdph":
                    hdiags = {}
                    for pname in one_d:
                        hdiags[pname] = ad.hessian_diag_1d(loss_var, env[pname])
                        counters["hdiag_calls"] += 1
                    optim.step(model, grads, hdiags, step_cfg, state)
                else:
                    optim.sgdm_step(model, grads, step_cfg, state)
                counters["steps"] += 1
                # a step's tape is large (activations plus the differentiable
                # backward) and cyclic; free it now, not at the next gc pass
                graph.release()
                del env, logits, loss_var, grads_by_id, grads

                wall_ms = (time.perf_counter() - t0) * 1e3 if cfg.log_wall_time else None
                emit(_record(epoch, step, "train", loss, acc, tau_epoch, wall_ms,
                             _hessian_stats(state, one_d) if use_hessian else None))
                n_batches += 1

            test_loss, test_acc = evaluate(model, dataset.x_test, dataset.y_test,
                                           cfg.batch_size, dtype)
            emit(_record(epoch, n_batches, "test", test_loss, test_acc, tau_epoch, None,
                         _hessian_stats(state, one_d) if use_hessian else None))

    save_checkpoint(cfg.out_checkpoint, model, cfg.dtype)
    return TrainResult(cfg, model, dataset, records, counters,
                       cfg.out_metrics, cfg.out_checkpoint)


# ---------------------------------------------------------------------------
# checkpoint format


def _checkpoint_entries(model: nn.Model) -> list[tuple[str, np.ndarray]]:
    entries = [(p.name, p.value) for p in model.parameters()]
    for layer in model.layers:
        if isinstance(layer, nn.BatchNorm):
            entries.append((f"{layer.name}.running_mean", layer.running_mean))
            entries.append((f"{layer.name}.running_var", layer.running_var))
    return entries


def save_checkpoint(path: str, model: nn.Model, dtype: str) -> None:
    width = 4 if dtype == "f32" else 8
    code = "<f4" if dtype == "f32" else "<f8"
    entries = _checkpoint_entries(model)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IBI", CKPT_VERSION, width, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr).astype(code).tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
        version, width, count = struct.unpack("<IBI", f.read(9))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        code = "<f4" if width == 4 else "<f8"
        table = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            table.append((name, shape))
        out = {}
        for name, shape in table:
            n_items = int(np.prod(shape)) if shape else 1
            buf = f.read(n_items * width)
            out[name] = np.frombuffer(buf, dtype=code).reshape(shape).copy()
    return out


# ---------------------------------------------------------------------------
# optimizer comparison


@dataclass
class CompareResult:
    rows: list[tuple[int, float, float]]
    delta: float
    csv_path: str
    result_a: TrainResult
    result_b: TrainResult


def compare(cfg_a: RunConfig, cfg_b: RunConfig, csv_path: str = "compare.csv") -> CompareResult:
    """Runs both configs (which must share dataset and model) and writes an
    aligned per-epoch test-accuracy CSV ending in a delta line."""
    for f in ("model",) + tuple(name for name in vars(cfg_a) if name.startswith("dataset_")):
        if getattr(cfg_a, f) != getattr(cfg_b, f):
            raise ConfigError(f"compare requires matching dataset/model, differs on {f!r}")
    if cfg_a.out_metrics == cfg_b.out_metrics:
        cfg_a = replace(cfg_a, out_metrics=cfg_a.out_metrics + ".a",
                        out_checkpoint=cfg_a.out_checkpoint + ".a")
        cfg_b = replace(cfg_b, out_metrics=cfg_b.out_metrics + ".b",
                        out_checkpoint=cfg_b.out_checkpoint + ".b")
    ra = train(cfg_a)
    rb = train(cfg_b)
    acc_a = {r["epoch"]: r["accuracy"] for r in ra.records if r["split"] == "test"}
    acc_b = {r["epoch"]: r["accuracy"] for r in rb.records if r["split"] == "test"}
    rows = [(e, acc_a[e], acc_b[e]) for e in sorted(acc_a) if e in acc_b]
    delta = rows[-1][1] - rows[-1][2]
    parent = os.path.dirname(csv_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("epoch,acc_a,acc_b\n")
        for epoch, a, b in rows:
            f.write(f"{epoch},{a!r},{b!r}\n")
        f.write(f"delta,{delta!r}\n")
    return CompareResult(rows, delta, csv_path, ra, rb)
