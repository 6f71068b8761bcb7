"""AdamW training loop, gradient clipping, checkpoints, metrics logging.

Checkpoint wire format: 8-byte magic ``CSTRCKPT``, u32 LE format version,
u64 LE header length, UTF-8 JSON header, then the raw little-endian tensor
blob. The header records the config snapshot, the tensor table
(name/shape/offset/nbytes), optional optimizer state and rng state. Tensor
bytes round-trip losslessly.
"""

import json
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from . import kernels
from .model import TextRecognizer
from .nn import ParamStore

MAGIC = b"CSTRCKPT"
FORMAT_VERSION = 1


class OptimError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class AdamW:
    """Decoupled-weight-decay Adam: p -= lr * (mhat/(sqrt(vhat)+eps) + wd*p)."""

    def __init__(self, store: ParamStore, lr: float = 1e-3,
                 betas: tuple = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros(t.data.size, dtype=t.data.dtype)
                  for name, t in store.items()}
        self.v = {name: np.zeros(t.data.size, dtype=t.data.dtype)
                  for name, t in store.items()}

    def zero_grad(self):
        self.store.zero_grads()

    def step(self, lr: Optional[float] = None):
        """Update every parameter that received a gradient."""
        if lr is None:
            lr = self.lr
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, t in self.store.items():
            g = t.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise OptimError(f"non-finite gradient in parameter {name!r}")
            flat = np.ascontiguousarray(g, dtype=t.data.dtype).reshape(-1)
            kernels.adamw_step(t.data.reshape(-1), flat,
                               self.m[name], self.v[name],
                               lr, self.beta1, self.beta2, self.eps,
                               self.weight_decay, c1, c2)

    def state_arrays(self) -> dict:
        out = {}
        for name in self.m:
            out[f"optim.m:{name}"] = self.m[name]
            out[f"optim.v:{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int):
        for name in self.m:
            self.m[name] = np.ascontiguousarray(
                arrays[f"optim.m:{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.ascontiguousarray(
                arrays[f"optim.v:{name}"], dtype=self.v[name].dtype)
        self.step_count = step_count


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for _, t in store.items():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        s = max_norm / norm
        for _, t in store.items():
            if t.grad is not None:
                t.grad *= s
    return norm


# ---------------------------------------------------------------------------
# checkpoints


def _dtype_tag(dtype) -> str:
    return {"float32": "<f4", "float64": "<f8"}[np.dtype(dtype).name]


def save_checkpoint(path: str, model: TextRecognizer,
                    optimizer: Optional[AdamW] = None,
                    rng_state: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    tensors = dict(model.store.state_dict())
    opt_header = None
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
        opt_header = {
            "step_count": optimizer.step_count,
            "lr": optimizer.lr,
            "betas": [optimizer.beta1, optimizer.beta2],
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
        }
    dtype = _dtype_tag(model.store.dtype)
    table = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config_snapshot(),
        "dtype": dtype,
        "tensors": table,
        "optimizer": opt_header,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for raw in chunks:
            f.write(raw)
    os.replace(tmp, path)


def read_checkpoint(path: str) -> tuple:
    """-> (header dict, {tensor name: ndarray})."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack("<Q", data[12:20])
    if 20 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header ({e})")
    blob = data[20 + hlen :]
    dtype = np.dtype(header["dtype"])
    tensors = {}
    for ent in header["tensors"]:
        shape = tuple(ent["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if ent["nbytes"] != expected:
            raise CheckpointError(
                f"{path}: tensor {ent['name']!r} shape {shape} inconsistent "
                f"with {ent['nbytes']} bytes"
            )
        lo, hi = ent["offset"], ent["offset"] + ent["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"{path}: truncated tensor data for {ent['name']!r}")
        # copy: frombuffer views are read-only and the kernels mutate in place
        arr = np.frombuffer(blob[lo:hi], dtype=dtype).reshape(shape)
        tensors[ent["name"]] = arr.copy()
    return header, tensors


def load_checkpoint(path: str):
    """Rebuild the model from its config snapshot; returns (model, extras)."""
    header, tensors = read_checkpoint(path)
    dtype = np.dtype(header["dtype"])
    model = TextRecognizer.from_snapshot(header["config"], dtype=dtype)
    params = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    model.store.load_state(params)
    extras = {
        "header": header,
        "optimizer": header.get("optimizer"),
        "optim_arrays": {k: v for k, v in tensors.items() if k.startswith("optim.")},
        "rng_state": header.get("rng_state"),
    }
    return model, extras


def load_into(model: TextRecognizer, path: str) -> None:
    """Load parameters into an existing model.

    The parameter table (names and shapes) must match exactly; config fields
    that do not change the parameter set — like the cascade stage grouping —
    are free to differ.
    """
    header, tensors = read_checkpoint(path)
    params = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    want = model.param_signature()
    got = [(e["name"], tuple(e["shape"])) for e in header["tensors"]
           if not e["name"].startswith("optim.")]
    if want != got:
        raise CheckpointError(
            "checkpoint parameter table does not match the model "
            f"({len(got)} vs {len(want)} tensors or shape/name mismatch)"
        )
    model.store.load_state(params)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    n_perms: int = 4
    warmup: int = 0
    log_every: int = 50
    checkpoint_every: int = 0      # 0 = final checkpoint only
    seed: int = 0
    timing: bool = False           # adds wall_ms to metrics rows
    augment_blur: tuple = (0.0, 0.0)
    augment_noise: tuple = (0.0, 0.0)
    augment_scale: tuple = (1.0, 1.0)


@dataclass
class TrainResult:
    checkpoint: Optional[str]
    metrics: list = field(default_factory=list)
    diverged: bool = False
    steps_done: int = 0


def _batch_images(images: np.ndarray, idx: np.ndarray) -> np.ndarray:
    x = images[idx]
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / 255.0
    return x


def train(model: TextRecognizer, images: np.ndarray, labels: list,
          cfg: TrainConfig, out_dir: str) -> TrainResult:
    """Optimize the model on an in-memory dataset.

    images: (n, H, W) uint8 or float32 in [0,1]; labels: list of char-id
    lists. Metrics rows go to out_dir/metrics.jsonl; identical seeds and
    data give byte-identical logs (enable `timing` to add wall_ms, which is
    deliberately not part of the deterministic row).
    """
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    os.makedirs(out_dir, exist_ok=True)

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    perm_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    use_augment = (cfg.augment_blur[1] > 0 or cfg.augment_noise[1] > 0
                   or tuple(cfg.augment_scale) != (1.0, 1.0))

    optimizer = AdamW(model.store, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                      weight_decay=cfg.weight_decay)
    metrics: list = []
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    log_f = open(metrics_path, "w", encoding="utf-8")
    last_checkpoint: Optional[str] = None

    def save(tag: str) -> str:
        p = os.path.join(out_dir, f"checkpoint_{tag}.ckpt")
        save_checkpoint(p, model, optimizer=optimizer,
                        rng_state=perm_rng.bit_generator.state)
        return p

    order = shuffle_rng.permutation(n)
    cursor = 0
    t0 = time.monotonic()
    steps_done = 0
    diverged = False
    try:
        for step in range(1, cfg.steps + 1):
            if cursor + cfg.batch_size > n:
                order = shuffle_rng.permutation(n)
                cursor = 0
            idx = order[cursor : cursor + min(cfg.batch_size, n)]
            cursor += cfg.batch_size

            x = _batch_images(images, idx)
            if use_augment:
                from .data import augment
                x = np.stack([
                    augment(x[i], aug_rng, cfg.augment_blur, cfg.augment_noise,
                            scale=tuple(cfg.augment_scale))
                    for i in range(x.shape[0])
                ])
            batch_labels = [labels[i] for i in idx]

            loss, info = model.loss(x, batch_labels, cfg.n_perms, perm_rng)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                diverged = True
                break

            optimizer.zero_grad()
            ag.backward(loss)
            if cfg.clip_norm > 0:
                clip_grad_norm(model.store, cfg.clip_norm)
            lr = cfg.lr
            if cfg.warmup > 0 and step <= cfg.warmup:
                lr = cfg.lr * step / cfg.warmup
            try:
                optimizer.step(lr=lr)
            except OptimError:
                diverged = True
                break
            steps_done = step

            if step % cfg.log_every == 0 or step == cfg.steps:
                row = {
                    "step": step,
                    "loss": loss_val,
                    "loss_id": info["components"][0],
                    "acc": info["teacher_acc"],
                    "lr": lr,
                }
                if cfg.timing:
                    row["wall_ms"] = (time.monotonic() - t0) * 1000.0
                metrics.append(row)
                log_f.write(json.dumps(row) + "\n")
                log_f.flush()

            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                last_checkpoint = save(f"{step:06d}")

        if not diverged:
            last_checkpoint = save("final")
    finally:
        log_f.close()

    return TrainResult(checkpoint=last_checkpoint, metrics=metrics,
                       diverged=diverged, steps_done=steps_done)
