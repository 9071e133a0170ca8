"""Joint training: task sampling, AdamW with skip-unused updates, schedules,
detection augmentation, checkpoints, and the metrics log.

Determinism contract: every stochastic choice of step t flows from one
generator seeded by (seed, stream, t), and batch data is itself a pure
function of (seed, index), so a config+seed pair fixes the whole run.
"""
from __future__ import annotations

import fnmatch
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import data as data_mod
from .autodiff import Tape, Tensor
from .evaluation import evaluate
from .model import MultitaskModel

_INIT_STREAM = 101
_STEP_STREAM = 202

CHECKPOINT_MAGIC = b"PTCKPT01"


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict) -> None:
        super().__init__(f"non-finite loss at iteration {record.get('iteration')}")
        self.record = record


@dataclass
class TrainConfig:
    tasks: List[str] = field(default_factory=lambda: list(data_mod.DEFAULT_TASKS))
    probs: List[float] = field(
        default_factory=lambda: [data_mod.DEFAULT_TASKS[t].prob for t in data_mod.DEFAULT_TASKS]
    )
    iterations: int = 20000
    batch_size: int = 16
    lr: float = 3e-4
    warmup: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    decoder_mode: str = "shared"
    use_task_tokens: bool = True
    cls_only: bool = True
    all_layer_cls_loss: bool = False
    frozen_encoders: bool = False
    seed: int = 0
    dtype: str = "float32"
    augment: bool = True
    resize_min: int = 48
    resize_max: int = 80
    crop_min: int = 38
    crop_max: int = 60
    train_pool: int = 4096
    val_detection: int = 64
    val_classification: int = 256
    eval_interval: int = 1000
    checkpoint_interval: int = 5000

    def __post_init__(self) -> None:
        if len(self.tasks) != len(self.probs):
            raise ValueError("tasks and probs must align")
        total = float(sum(self.probs))
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"sampling probabilities sum to {total}, expected 1")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("warmup must be smaller than total iterations")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")


def sample_task(rng: np.random.Generator, probabilities: Sequence[float]) -> int:
    """One categorical draw; whole batches come from the drawn dataset."""
    p = np.asarray(probabilities, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()}, expected 1 within 1e-9")
    return int(rng.choice(len(p), p=p))


def lr_schedule(t: int, cfg: TrainConfig) -> float:
    """Linear 0 -> lr over warmup steps, then half-cosine decay to 0 at T."""
    if not 0 <= t <= cfg.iterations:
        raise ValueError(f"iteration {t} outside [0, {cfg.iterations}]")
    if t < cfg.warmup:
        return cfg.lr * t / cfg.warmup
    span = cfg.iterations - cfg.warmup
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (t - cfg.warmup) / span))


class AdamW:
    """Decoupled-weight-decay Adam that updates only parameters reached by the
    current loss; unused parameters keep value, moments, and step counter
    bit-identical."""

    def __init__(
        self,
        named_params: Sequence[Tuple[str, Tensor]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ) -> None:
        self.named_params = list(named_params)
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: Dict[str, dict] = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for name, p in self.named_params
        }

    def step(self, used: Set[Tensor], lr: float) -> List[str]:
        """Apply one update; returns the names actually updated."""
        updated = []
        for name, p in self.named_params:
            if p not in used or p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            st = self.state[name]
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)
            updated.append(name)
        return updated


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _allowed_crops(cfg: TrainConfig, stride: int = 8) -> List[int]:
    crops = [c for c in range(cfg.crop_min, cfg.crop_max + 1) if c % stride == 0 and c <= cfg.resize_max]
    if not crops:
        raise ValueError("no crop size compatible with the backbone stride in the configured range")
    return crops


def _crop_boxes(target: dict, scale: int, crop: int, x0: int, y0: int) -> dict:
    """Transform normalized boxes from a (scale x scale) image into the crop
    window; clipped boxes with under 2 visible pixels per side are dropped."""
    boxes = np.asarray(target["boxes"], dtype=np.float64)
    xyxy = np.stack(
        [
            boxes[:, 0] - boxes[:, 2] / 2,
            boxes[:, 1] - boxes[:, 3] / 2,
            boxes[:, 0] + boxes[:, 2] / 2,
            boxes[:, 1] + boxes[:, 3] / 2,
        ],
        axis=1,
    )
    px = xyxy * scale
    px[:, [0, 2]] -= x0
    px[:, [1, 3]] -= y0
    px = np.clip(px, 0.0, crop)
    w = px[:, 2] - px[:, 0]
    h = px[:, 3] - px[:, 1]
    keep = (w >= 2.0) & (h >= 2.0)
    norm = px / crop
    out = {
        "classes": np.asarray(target["classes"])[keep],
        "boxes": np.stack(
            [
                (norm[keep, 0] + norm[keep, 2]) / 2,
                (norm[keep, 1] + norm[keep, 3]) / 2,
                norm[keep, 2] - norm[keep, 0],
                norm[keep, 3] - norm[keep, 1],
            ],
            axis=1,
        )
        if keep.any()
        else np.zeros((0, 4)),
    }
    if "attributes" in target:
        out["attributes"] = np.asarray(target["attributes"])[keep]
    return out


def scale_crop_augment(
    image: np.ndarray,
    target: dict,
    rng: np.random.Generator,
    cfg: TrainConfig,
    crop: Optional[int] = None,
) -> Tuple[np.ndarray, dict]:
    """Random resize (shortest side in [resize_min, resize_max]) then random
    crop. Detection batches share one crop size so images stack; the resize
    scale and crop position stay per-image."""
    if crop is None:
        crops = _allowed_crops(cfg)
        crop = int(crops[int(rng.integers(len(crops)))])
    scale = int(rng.integers(max(cfg.resize_min, crop), cfg.resize_max + 1))
    resized = data_mod.resize_image(image, scale)
    x0 = int(rng.integers(0, scale - crop + 1))
    y0 = int(rng.integers(0, scale - crop + 1))
    cropped = resized[y0 : y0 + crop, x0 : x0 + crop]
    return cropped, _crop_boxes(target, scale, crop, x0, y0)


def augment_detection_batch(batch: dict, rng: np.random.Generator, cfg: TrainConfig) -> dict:
    crops = _allowed_crops(cfg)
    crop = int(crops[int(rng.integers(len(crops)))])
    images, targets = [], []
    for img, tgt in zip(batch["images"], batch["targets"]):
        im, tg = scale_crop_augment(img, tgt, rng, cfg, crop=crop)
        images.append(im)
        targets.append(tg)
    return {"images": np.stack(images), "targets": targets}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: MultitaskModel, optimizer: Optional[AdamW], path, meta: Optional[dict] = None) -> None:
    """Manifest (name -> shape, offset, scalar width) + raw little-endian data."""
    entries = []
    blobs = []
    offset = 0

    def add(name: str, arr: np.ndarray) -> None:
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        le = arr.dtype.newbyteorder("<")
        raw = arr.astype(le, copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": le.str,
                "itemsize": int(arr.dtype.itemsize),
                "offset": offset,
            }
        )
        blobs.append(raw)
        offset += len(raw)

    for name, p in model.named_parameters():
        add(name, p.data)
    if optimizer is not None:
        for name, _ in optimizer.named_params:
            st = optimizer.state[name]
            add(f"optim:{name}:m", st["m"])
            add(f"optim:{name}:v", st["v"])
            add(f"optim:{name}:t", np.array(st["t"], dtype=np.int64))
    manifest = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)


def _read_checkpoint(path) -> Tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    n = struct.unpack("<Q", raw[8:16])[0]
    try:
        manifest = json.loads(raw[16 : 16 + n].decode())
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt checkpoint manifest in {path}") from exc
    return manifest, raw[16 + n :]


def load_checkpoint(
    path,
    model: MultitaskModel,
    filters: Optional[Sequence[str]] = None,
    optimizer: Optional[AdamW] = None,
) -> dict:
    """Copy matching parameters into the model.

    With ``filters`` (fnmatch patterns), only model parameters whose names
    match are loaded and the report lists loaded/skipped names; optimizer
    entries are ignored. Without filters, every model parameter must be
    present, and optimizer state is restored when an optimizer is passed.
    """
    manifest, payload = _read_checkpoint(path)
    arrays = {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"])
    loaded, skipped, plan, mismatched = [], [], [], []
    params = dict(model.named_parameters())
    for name, p in params.items():
        if filters is not None and not any(fnmatch.fnmatch(name, pat) for pat in filters):
            skipped.append(name)
            continue
        if name not in arrays:
            if filters is None:
                raise KeyError(f"checkpoint is missing parameter {name}")
            skipped.append(name)
            continue
        src = arrays[name]
        if tuple(src.shape) != p.shape:
            mismatched.append(f"{name} (checkpoint {tuple(src.shape)}, model {p.shape})")
            continue
        plan.append((name, p, src))
    if mismatched:
        raise ValueError("shape mismatch for: " + ", ".join(mismatched))
    for name, p, src in plan:
        p.data = src.astype(p.dtype, copy=True)
        loaded.append(name)
    if optimizer is not None and filters is None:
        for name, p in optimizer.named_params:
            key = f"optim:{name}:m"
            if key not in arrays:
                continue
            st = optimizer.state[name]
            st["m"] = arrays[key].astype(p.dtype, copy=True)
            st["v"] = arrays[f"optim:{name}:v"].astype(p.dtype, copy=True)
            st["t"] = int(arrays[f"optim:{name}:t"])
    return {"loaded": loaded, "skipped": skipped, "meta": manifest.get("meta", {})}


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


def train_step(
    model: MultitaskModel,
    optimizer: AdamW,
    batch: dict,
    task: str,
    lr: float,
    rng: Optional[np.random.Generator],
    frozen_encoders: bool = False,
) -> Tuple[float, List[str]]:
    """One forward/backward/update; returns (loss value, updated names)."""
    model.zero_grad()
    with Tape() as tape:
        loss = model.task_loss(batch, task, rng=rng)
        reached = tape.backward(loss)
    value = float(loss.data)
    if frozen_encoders:
        for name, p in model.named_parameters():
            if name.startswith(("image_encoder.", "text_encoder.")):
                reached.discard(p)
    updated = optimizer.step(reached, lr)
    return value, updated


class Trainer:
    def __init__(
        self,
        model: MultitaskModel,
        cfg: TrainConfig,
        out_dir=None,
        vocab=None,
    ) -> None:
        self.model = model
        self.cfg = cfg
        self.vocab = vocab or data_mod.build_vocabulary()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.optimizer = AdamW(
            list(model.named_parameters()),
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        self.records: List[dict] = []
        self._log_file = None
        self.train_sets = {
            t: data_mod.SyntheticDataset(t, "train", cfg.seed, cfg.train_pool, self.vocab)
            for t in cfg.tasks
        }
        self.val_sets = {
            t: data_mod.SyntheticDataset(
                t,
                "val",
                cfg.seed,
                cfg.val_detection if model.task_specs[t].head == "detection" else cfg.val_classification,
                self.vocab,
            )
            for t in cfg.tasks
        }
        self.active_tasks = [t for t, p in zip(cfg.tasks, cfg.probs) if p > 0]

    def _emit(self, record: dict) -> None:
        self.records.append(record)
        if self._log_file is not None:
            self._log_file.write(json.dumps(record, sort_keys=True) + "\n")
            self._log_file.flush()

    def _batch_for(self, task: str, rng: np.random.Generator) -> dict:
        ds = self.train_sets[task]
        idx = rng.integers(0, len(ds), size=self.cfg.batch_size)
        samples = [ds[int(i)] for i in idx]
        if self.model.task_specs[task].head == "detection":
            batch = data_mod.collate_detection(samples)
            if self.cfg.augment:
                batch = augment_detection_batch(batch, rng, self.cfg)
            return batch
        return data_mod.collate_classification(samples)

    def evaluate_all(self, iteration: int, lr: float) -> Dict[str, Dict[str, float]]:
        self.model.eval()
        results = {}
        for task in self.active_tasks:
            metrics = evaluate(self.model, task, self.val_sets[task], batch_size=self.cfg.batch_size)
            results[task] = metrics
            for metric_name, value in metrics.items():
                self._emit(
                    {
                        "iteration": iteration,
                        "task": task,
                        "split": "val",
                        "metric_name": metric_name,
                        "value": value,
                        "learning_rate": lr,
                    }
                )
        self.model.train()
        return results

    def run(self) -> List[dict]:
        cfg = self.cfg
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_file = open(self.out_dir / "metrics.jsonl", "w")
        try:
            self.model.train()
            for t in range(cfg.iterations):
                lr = lr_schedule(t, cfg)
                rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _STEP_STREAM, t]))
                task = cfg.tasks[sample_task(rng, cfg.probs)]
                batch = self._batch_for(task, rng)
                try:
                    value, _ = train_step(
                        self.model, self.optimizer, batch, task, lr, rng, frozen_encoders=cfg.frozen_encoders
                    )
                except ValueError as exc:
                    # overflow tripping an op's input guard is still divergence
                    if "non-finite" not in str(exc):
                        raise
                    value = float("nan")
                record = {
                    "iteration": t,
                    "task": task,
                    "split": "train",
                    "metric_name": "loss",
                    "value": value,
                    "learning_rate": lr,
                }
                self._emit(record)
                if not np.isfinite(value):
                    self._emit({**record, "metric_name": "diverged"})
                    raise TrainingDiverged(record)
                step_num = t + 1
                if cfg.eval_interval and (step_num % cfg.eval_interval == 0 or step_num == cfg.iterations):
                    self.evaluate_all(step_num, lr)
                if self.out_dir is not None and cfg.checkpoint_interval and step_num % cfg.checkpoint_interval == 0:
                    save_checkpoint(
                        self.model, self.optimizer, self.out_dir / f"checkpoint_{step_num}.bin",
                        meta={"iteration": step_num},
                    )
            if self.out_dir is not None:
                save_checkpoint(
                    self.model, self.optimizer, self.out_dir / "checkpoint_final.bin",
                    meta={"iteration": cfg.iterations},
                )
            return self.records
        finally:
            if self._log_file is not None:
                self._log_file.close()
                self._log_file = None


def build_model(cfg: TrainConfig, vocab=None, **model_kwargs) -> MultitaskModel:
    """Model matching the config's tasks, dtype, and decoder mode."""
    vocab = vocab or data_mod.build_vocabulary()
    specs = {t: data_mod.DEFAULT_TASKS[t] for t in cfg.tasks}
    model = MultitaskModel(
        specs,
        vocab_size=len(vocab),
        seed=cfg.seed,
        decoder_mode=cfg.decoder_mode,
        use_task_tokens=cfg.use_task_tokens,
        cls_only=cfg.cls_only,
        all_layer_cls_loss=cfg.all_layer_cls_loss,
        **model_kwargs,
    )
    if cfg.dtype == "float32":
        model.to_dtype(np.float32)
    return model
