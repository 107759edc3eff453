"""Query sampling, the BCE objective, Adam training loop and checkpoints."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import grad as G
from .data import Item, model_inputs
from .geometry import SceneSpec, occupancy_query
from .grad import AdamState, Tape, Tensor
from .model import ConvOccNet, ModelConfig

CKPT_MAGIC = b"COCK1"
CKPT_VERSION = 1
CKPT_FILE = "checkpoint.cock"
LOG_FILE = "train_log.jsonl"

TASK_DEFAULTS = {
    "object_points": (32, 2048),
    "object_voxels": (64, 1024),
    "scene_points": (32, 2048),
}


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "object_points"
    batch_size: Optional[int] = None
    queries_per_item: Optional[int] = None
    lr: float = 1e-4
    max_steps: int = 1000
    seed: int = 0
    eval_every: int = 100
    val_queries: int = 20_000
    lr_decay_step: Optional[int] = None
    lr_decay_factor: float = 0.1

    def lr_at(self, step: int) -> float:
        """Learning rate for the optimizer step that produces ``step`` (1-based)."""
        if self.lr_decay_step is not None and step > self.lr_decay_step:
            return self.lr * self.lr_decay_factor
        return self.lr

    def resolved(self) -> "TrainConfig":
        if self.task not in TASK_DEFAULTS:
            raise ValueError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASK_DEFAULTS)}")
        b, q = TASK_DEFAULTS[self.task]
        out = TrainConfig(**asdict(self))
        out.batch_size = b if self.batch_size is None else self.batch_size
        out.queries_per_item = q if self.queries_per_item is None else self.queries_per_item
        out.validate()
        return out

    def validate(self) -> None:
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.queries_per_item is not None and self.queries_per_item < 1:
            raise ValueError("queries_per_item must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_step is not None and self.lr_decay_step < 0:
            raise ValueError("lr_decay_step must be >= 0")
        if self.max_steps < 0 or self.eval_every < 1 or self.val_queries < 1:
            raise ValueError("max_steps must be >= 0, eval_every and val_queries >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ValueError(f"unknown train config keys: {sorted(set(d) - known)}")
        return cls(**d)


# ----------------------------------------------------------------------------
# sampling and loss


def sample_queries(scene: SceneSpec, m: int, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """``m`` uniform points in the unit cube with exact occupancy labels."""
    if m < 1:
        raise ValueError("need at least one query point")
    pts = np.random.default_rng(seed).uniform(size=(m, 3))
    return pts, occupancy_query(scene, pts)


def bce_loss(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy, computed from logits."""
    return G.bce_with_logits(logits, labels)


def bce_from_probabilities(pred: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(np.asarray(pred, dtype=np.float64), 1e-7, 1 - 1e-7)
    o = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(o * np.log(p) + (1 - o) * np.log1p(-p))))


@dataclass
class Batch:
    inputs: np.ndarray
    query_points: np.ndarray
    labels: np.ndarray


def sample_batch(items: Sequence[Item], cfg: TrainConfig, input_kind: str,
                 rng: np.random.Generator) -> Batch:
    if cfg.queries_per_item < 1:
        raise ValueError("queries_per_item must be positive")
    pick = rng.choice(len(items), size=cfg.batch_size, replace=len(items) < cfg.batch_size)
    chosen = [items[i] for i in pick]
    qp, ql = [], []
    for it in chosen:
        idx = rng.integers(0, len(it.query_points), size=cfg.queries_per_item)
        qp.append(it.query_points[idx])
        ql.append(it.query_labels[idx])
    return Batch(model_inputs(chosen, input_kind), np.stack(qp), np.stack(ql).astype(np.float64))


def _first_nonfinite(model: ConvOccNet) -> Optional[str]:
    for name, p in model.named_parameters():
        if not np.isfinite(p.data).all():
            return f"parameter {name}"
        if p.grad is not None and not np.isfinite(p.grad).all():
            return f"gradient of {name}"
    return None


def train_step(model: ConvOccNet, batch: Batch, adam: AdamState) -> float:
    """One forward/backward/Adam update; returns the batch loss."""
    if batch.query_points.shape[1] < 1:
        raise ValueError("training batch has zero queries per item")
    params = model.parameters()
    for p in params:
        p.zero_grad()
    try:
        with Tape() as tape:
            loss = bce_loss(model.logits(batch.inputs, batch.query_points), batch.labels)
            if not np.isfinite(loss.data).all():
                raise NumericalError("non-finite loss")
            G.backward(tape, loss)
    except G.GradError as e:
        if "non-finite" in str(e):
            raise NumericalError(str(e)) from e
        raise
    bad = _first_nonfinite(model)
    if bad:
        raise NumericalError(f"non-finite values in {bad}")
    G.adam_step(params, [p.grad for p in params], adam)
    bad = _first_nonfinite(model)
    if bad:
        raise NumericalError(f"non-finite values in {bad} after the update")
    return loss.item()


def validation_iou(model: ConvOccNet, items: Sequence[Item], n_queries: int, chunk: int = 8) -> float:
    """Mean per-item IoU at threshold 0.5 over each item's first ``n_queries`` held-out queries."""
    if not items:
        return float("nan")
    ious = []
    for lo in range(0, len(items), chunk):
        part = items[lo:lo + chunk]
        q = np.stack([it.query_points[:n_queries] for it in part])
        prob = model.predict(model_inputs(part, model.cfg.input_kind), q, chunk=50_000)
        for k, it in enumerate(part):
            pred = prob[k] >= 0.5
            truth = it.query_labels[:n_queries].astype(bool)
            union = np.logical_or(pred, truth).sum()
            ious.append(1.0 if union == 0 else np.logical_and(pred, truth).sum() / union)
    return float(np.mean(ious))


# ----------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    step: int
    params: dict
    adam_t: int
    adam_m: dict
    adam_v: dict
    rng_state: dict

    def build_model(self) -> ConvOccNet:
        model = ConvOccNet(ModelConfig.from_dict(self.model_config))
        values = self.params
        for name, p in model.named_parameters():
            if name not in values:
                raise KeyError(f"checkpoint lacks parameter {name}")
            if values[name].shape != p.shape:
                raise ValueError(f"checkpoint parameter {name}: shape {values[name].shape} != {p.shape}")
            p.data[...] = values[name]
        extra = set(values) - {n for n, _ in model.named_parameters()}
        if extra:
            raise KeyError(f"checkpoint has unexpected parameters {sorted(extra)}")
        return model

    def adam_state(self, model: ConvOccNet, lr: float) -> AdamState:
        names = [n for n, _ in model.named_parameters()]
        st = AdamState(lr=lr)
        st.t = self.adam_t
        if self.adam_m:
            st.m = [self.adam_m[n].astype(model.dtype) for n in names]
            st.v = [self.adam_v[n].astype(model.dtype) for n in names]
        return st


def capture(model: ConvOccNet, train_cfg: TrainConfig, step: int, adam: AdamState,
            rng: np.random.Generator) -> Checkpoint:
    names = [n for n, _ in model.named_parameters()]
    params = {n: p.data.astype(np.float64) for n, p in model.named_parameters()}
    m = {n: a.astype(np.float64) for n, a in zip(names, adam.m or [])}
    v = {n: a.astype(np.float64) for n, a in zip(names, adam.v or [])}
    return Checkpoint(model.cfg.to_dict(), asdict(train_cfg), step, params, adam.t, m, v,
                      _json_safe(rng.bit_generator.state))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def encode_checkpoint(ck: Checkpoint) -> bytes:
    tensors = []
    for group, table in (("param", ck.params), ("adam_m", ck.adam_m), ("adam_v", ck.adam_v)):
        for name in sorted(table):
            tensors.append((f"{group}/{name}", np.ascontiguousarray(table[name], dtype="<f8")))
    directory = []
    offset = 0
    for name, arr in tensors:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "model_config": ck.model_config,
        "train_config": ck.train_config,
        "step": ck.step,
        "adam_t": ck.adam_t,
        "rng_state": ck.rng_state,
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hbytes)), hbytes]
    parts.extend(arr.tobytes() for _, arr in tensors)
    return b"".join(parts)


def decode_checkpoint(buf: bytes, path="<bytes>") -> Checkpoint:
    if buf[:5] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < 13:
        raise ValueError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack_from("<II", buf, 5)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    base = 13 + hlen
    header = json.loads(buf[13:base].decode())
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        if start + 8 * count > len(buf):
            raise ValueError(f"{path}: truncated tensor {entry['name']} at byte offset {start}")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=start).reshape(entry["shape"]).copy()
        group, name = entry["name"].split("/", 1)
        groups[group][name] = arr
    return Checkpoint(header["model_config"], header["train_config"], header["step"], groups["param"],
                      header["adam_t"], groups["adam_m"], groups["adam_v"], header["rng_state"])


def save_checkpoint(path, ck: Checkpoint) -> None:
    path = Path(path)
    try:
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(encode_checkpoint(ck))
        tmp.replace(path)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), path)


# ----------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: ConvOccNet
    checkpoint: Checkpoint
    losses: list
    val_history: list


def _read_log(path: Path, upto: int) -> list[str]:
    if not path.exists():
        return []
    return [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] <= upto]


def train_loop(model_cfg: ModelConfig, train_items: Sequence[Item], val_items: Sequence[Item],
               cfg: TrainConfig, out_dir=None, resume: Optional[Checkpoint] = None,
               on_step: Optional[Callable[[int, float], None]] = None,
               time_budget: Optional[float] = None) -> TrainResult:
    """Train for ``cfg.max_steps`` optimizer steps (or until ``time_budget`` seconds elapse).

    Writes ``checkpoint.cock`` every ``eval_every`` steps and at the end, and
    appends JSON-lines records to ``train_log.jsonl`` when ``out_dir`` is given.
    """
    cfg = cfg.resolved()
    if not train_items:
        raise ValueError("training set is empty")
    if resume is not None:
        model = resume.build_model()
        adam = resume.adam_state(model, cfg.lr)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        step = resume.step
    else:
        model = ConvOccNet(model_cfg)
        adam = AdamState(lr=cfg.lr)
        rng = np.random.default_rng(cfg.seed)
        step = 0
    out = Path(out_dir) if out_dir is not None else None
    log_lines: list[str] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_lines = _read_log(out / LOG_FILE, step) if resume is not None else []
        (out / LOG_FILE).write_text("".join(line + "\n" for line in log_lines))

    def emit(record: dict) -> None:
        if out is not None:
            with open(out / LOG_FILE, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def checkpoint() -> Checkpoint:
        ck = capture(model, cfg, step, adam, rng)
        if out is not None:
            save_checkpoint(out / CKPT_FILE, ck)
        return ck

    losses, vals = [], []
    start = time.perf_counter()
    ck = None
    if step == 0 and resume is None:
        ck = checkpoint()
    while step < cfg.max_steps:
        if time_budget is not None and time.perf_counter() - start > time_budget:
            break
        t0 = time.perf_counter()
        batch = sample_batch(train_items, cfg, model.cfg.input_kind, rng)
        adam.lr = cfg.lr_at(step + 1)
        loss = train_step(model, batch, adam)
        step += 1
        losses.append(loss)
        emit({"step": step, "loss": loss, "lr": adam.lr, "wall_ms": round(1000 * (time.perf_counter() - t0), 3)})
        if on_step is not None:
            on_step(step, loss)
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            if val_items:
                iou = validation_iou(model, val_items, cfg.val_queries)
                vals.append((step, iou))
                emit({"step": step, "val_iou": iou})
            ck = checkpoint()
    if ck is None or ck.step != step:
        ck = checkpoint()
    return TrainResult(model, ck, losses, vals)
