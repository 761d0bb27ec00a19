"""Momentum-contrastive training engine.

Two encoders share one architecture: the primary one is trained by
backpropagation on the original image, the momentum one sees a
homography-augmented view and is updated only by

    theta_k <- m * theta_k + (1 - m) * theta_q.

Key vectors produced by the momentum encoder are constants for the
gradient (stop-gradient) and are pushed into a FIFO queue of K unit-norm
negatives. Per example the logit vector is

    [ d_q . d_k / tau,  d_q . d_{k_1} / tau, ..., d_q . d_{k_K} / tau ]

scored with the infoNCE loss -log(exp(l_0) / sum_i exp(l_i)), plus a
norm penalty (||d_raw||_2 - 1)^2 on the primary branch's pre-normalization
descriptor.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .errors import (
    BatchExceedsQueue,
    DatasetTooSmall,
    DimensionMismatch,
    IoError,
    MalformedFile,
    MalformedHeader,
    VersionMismatch,
)
from .homography import augment

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

OPT_STATE_MAGIC = b"SARO"
OPT_STATE_VERSION = 1
_OPT_KINDS = ("sgd", "adam")


@dataclass
class TrainConfig:
    """Hyperparameters of the contrastive training loop.

    Defaults follow the reference settings: Adam at lr 5e-3 decayed by 0.1
    after 80% of the epoch budget, batch 32, queue 1024, momentum 0.999,
    temperature 0.5, norm-regularizer weight 0.1. seed is mandatory so every
    run is reproducible. rho=None means input_size / 8 at train time.
    """

    seed: int
    lr: float = 5e-3
    batch_size: int = 32
    queue_size: int = 1024
    momentum: float = 0.999
    tau: float = 0.5
    lambda_reg: float = 0.1
    max_epochs: int = 100
    lr_decay_factor: float = 0.1
    rho: float | None = None
    optimizer: str = "adam"
    early_stop: bool = False
    early_stop_rel_tol: float = 1e-4
    early_stop_patience: int = 10

    def validate(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.batch_size < 1 or self.queue_size < 1:
            raise ValueError("batch_size and queue_size must be positive")
        if self.queue_size % self.batch_size != 0:
            raise ValueError(
                f"queue_size ({self.queue_size}) must be a multiple of "
                f"batch_size ({self.batch_size}) so whole batches enqueue cleanly"
            )
        if self.lr <= 0.0 or self.lambda_reg < 0.0 or self.max_epochs < 0:
            raise ValueError("lr must be > 0, lambda_reg >= 0, max_epochs >= 0")
        if self.optimizer not in _OPT_KINDS:
            raise ValueError(f"optimizer must be one of {_OPT_KINDS}")
        if self.rho is not None and self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")


class QueueMatrix:
    """FIFO ring of exactly K unit-norm key vectors.

    Stored as rows; as_matrix() returns them oldest-first. Whole batches are
    enqueued at once, displacing the same number of oldest keys.
    """

    def __init__(self, keys: np.ndarray) -> None:
        keys = np.array(keys, copy=True)
        if keys.ndim != 2 or keys.shape[0] < 1:
            raise ValueError("queue needs a (K, dim) array of initial keys")
        _check_unit_rows(keys)
        self._buf = keys
        self._head = 0  # index of the oldest key

    @classmethod
    def random_init(cls, dim: int, capacity: int, rng: np.random.Generator,
                    dtype=np.float32) -> "QueueMatrix":
        """K random Gaussian directions, normalized; avoids degenerate early
        logits before real keys have filled the queue."""
        g = rng.standard_normal((capacity, dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return cls(g.astype(dtype))

    @property
    def capacity(self) -> int:
        return self._buf.shape[0]

    @property
    def dim(self) -> int:
        return self._buf.shape[1]

    def enqueue_dequeue(self, new_keys: np.ndarray) -> None:
        """Drop the N oldest keys and append these N new ones, in order."""
        new_keys = np.asarray(new_keys)
        if new_keys.ndim != 2 or new_keys.shape[1] != self.dim:
            raise DimensionMismatch(
                f"new keys must be (N, {self.dim}), got {new_keys.shape}")
        n = new_keys.shape[0]
        if n > self.capacity:
            raise BatchExceedsQueue(f"{n} keys exceed queue capacity {self.capacity}")
        _check_unit_rows(new_keys)
        k = self.capacity
        idx = (self._head + np.arange(n)) % k
        self._buf[idx] = new_keys
        self._head = (self._head + n) % k

    def as_matrix(self) -> np.ndarray:
        """(K, dim) copy, oldest key first."""
        return np.concatenate([self._buf[self._head:], self._buf[:self._head]])


def _check_unit_rows(keys: np.ndarray, tol: float = 1e-5) -> None:
    norms = np.linalg.norm(keys.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        worst = float(np.abs(norms - 1.0).max())
        raise ValueError(f"key vectors must be unit norm (worst deviation {worst:.2e})")


def compute_logits(d_q: np.ndarray, d_k: np.ndarray, queue: QueueMatrix,
                   tau: float) -> np.ndarray:
    """Positive-then-negatives similarity logits, each divided by tau."""
    if tau <= 0.0:
        raise ValueError(f"tau must be > 0, got {tau}")
    d_q = np.asarray(d_q, dtype=np.float64)
    d_k = np.asarray(d_k, dtype=np.float64)
    if d_q.shape != d_k.shape or d_q.ndim != 1 or d_q.shape[0] != queue.dim:
        raise DimensionMismatch(
            f"d_q {d_q.shape}, d_k {d_k.shape}, queue dim {queue.dim}")
    neg = queue.as_matrix().astype(np.float64) @ d_q
    return np.concatenate([[d_q @ d_k], neg]) / tau


def info_nce(logits: np.ndarray) -> float:
    """Softmax cross-entropy against the positive at index 0, in the
    max-subtracted stable form; always >= 0 for finite logits."""
    l = np.asarray(logits, dtype=np.float64)
    m = float(l.max())
    return m + float(np.log(np.sum(np.exp(l - m)))) - float(l[0])


def info_nce_grad(logits: np.ndarray) -> np.ndarray:
    """Gradient of info_nce w.r.t. the logit vector: softmax(l) - e_0."""
    l = np.asarray(logits, dtype=np.float64)
    z = np.exp(l - l.max())
    g = z / z.sum()
    g[0] -= 1.0
    return g


def norm_regularizer(d_raw: np.ndarray) -> float:
    """Penalty (||d_raw||_2 - 1)^2 keeping raw descriptor norms near 1."""
    n = float(np.linalg.norm(np.asarray(d_raw, dtype=np.float64)))
    return (n - 1.0) ** 2


def norm_regularizer_grad(d_raw: np.ndarray) -> np.ndarray:
    d_raw = np.asarray(d_raw, dtype=np.float64)
    n = float(np.linalg.norm(d_raw))
    if n < 1e-12:
        return np.zeros_like(d_raw)
    return 2.0 * (n - 1.0) * d_raw / n


def batch_loss(params_q: enc.ParamSet, params_k: enc.ParamSet,
               originals, augmented, queue: QueueMatrix,
               cfg: TrainConfig):
    """Mean loss over one batch plus gradients w.r.t. the primary encoder.

    originals feed the primary encoder, augmented the momentum encoder; the
    momentum branch and the queue are constants in the gradient. Returns
    (loss, gradients ParamSet, (N, dim) array of new key vectors ready to
    enqueue). Per-example terms are accumulated in batch order.
    """
    if len(originals) == 0 or len(originals) != len(augmented):
        raise ValueError("need equal, non-empty original/augmented batches")
    n = len(originals)

    d_q, cache = enc.forward_batch(params_q, originals)
    d_k, _ = enc.forward_batch(params_k, augmented)

    queue_mat = queue.as_matrix().astype(np.float64)
    if queue_mat.shape[1] != d_q.shape[1]:
        raise DimensionMismatch(
            f"queue dim {queue_mat.shape[1]} != descriptor dim {d_q.shape[1]}")
    dq64 = d_q.astype(np.float64)
    dk64 = d_k.astype(np.float64)
    logits = np.concatenate([np.sum(dq64 * dk64, axis=1, keepdims=True),
                             dq64 @ queue_mat.T], axis=1) / cfg.tau

    m = logits.max(axis=1, keepdims=True)
    z = np.exp(logits - m)
    denom = z.sum(axis=1, keepdims=True)
    nce = m[:, 0] + np.log(denom[:, 0]) - logits[:, 0]

    raw64 = cache.d_raw.astype(np.float64)
    raw_norms = np.linalg.norm(raw64, axis=1)
    total = float(np.mean(nce + cfg.lambda_reg * (raw_norms - 1.0) ** 2))

    softmax = z / denom
    softmax[:, 0] -= 1.0
    grad_d = (softmax[:, :1] * dk64 + softmax[:, 1:] @ queue_mat) / cfg.tau
    safe = np.where(raw_norms < 1e-12, 1.0, raw_norms)
    grad_raw = np.where(raw_norms[:, None] < 1e-12, 0.0,
                        cfg.lambda_reg * 2.0 * (raw_norms - 1.0)[:, None] * raw64 / safe[:, None])

    grads = enc.backward_batch(params_q, cache, grad_d=grad_d, grad_d_raw=grad_raw)
    return total, grads.map_tensors(lambda a: a / n), d_k


def momentum_update(theta_k: enc.ParamSet, theta_q: enc.ParamSet,
                    m: float) -> enc.ParamSet:
    """Elementwise theta_k' = m * theta_k + (1 - m) * theta_q."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    return theta_k.zip_map(theta_q, lambda k, q: m * k + (1.0 - m) * q)


# --- optimizers ---------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    m1: enc.ParamSet | None = None  # Adam first moments
    m2: enc.ParamSet | None = None  # Adam second moments


def init_optimizer(kind: str, params: enc.ParamSet) -> OptimizerState:
    if kind == "sgd":
        return OptimizerState("sgd")
    if kind == "adam":
        zeros = enc.ParamSet.zeros(params.config, dtype=params.dtype)
        return OptimizerState("adam", 0, zeros, zeros.copy())
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(state: OptimizerState, params: enc.ParamSet,
                   grads: enc.ParamSet, lr: float):
    """One update; returns (new params, new state). Zero gradient leaves the
    parameters unchanged for both optimizers."""
    if state.kind == "sgd":
        new = params.zip_map(grads, lambda p, g: p - lr * g)
        return new, OptimizerState("sgd", state.step + 1)

    t = state.step + 1
    m1 = state.m1.zip_map(grads, lambda m, g: ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g)
    m2 = state.m2.zip_map(grads, lambda v, g: ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g)
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    update = m1.zip_map(m2, lambda m, v: (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS))
    new = params.zip_map(update, lambda p, u: p - lr * u)
    return new, OptimizerState("adam", t, m1, m2)


# --- training loop ------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    lr: float


@dataclass
class TrainResult:
    params: enc.ParamSet
    history: list
    opt_state: OptimizerState
    epochs_completed: int


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: multiply by the decay factor after 80% of the epoch
    budget (epoch 80 of 100 in the reference settings)."""
    boundary = round(0.8 * cfg.max_epochs)
    return cfg.lr * (cfg.lr_decay_factor if epoch > boundary else 1.0)


def train(dataset, cfg: TrainConfig, arch: enc.EncoderConfig,
          init_params: enc.ParamSet | None = None,
          init_opt_state: OptimizerState | None = None,
          start_epoch: int = 0,
          progress=None) -> TrainResult:
    """Full training loop over a list of Rasters.

    Per iteration: draw a batch, draw one homography augmentation per image,
    evaluate both encoders, update theta_q with the optimizer, theta_k with
    the momentum rule, then rotate the batch's keys into the queue. The
    whole run is a deterministic function of (dataset, cfg, arch).

    init_params / init_opt_state / start_epoch resume a previous run; epoch
    numbering continues from start_epoch.
    """
    cfg.validate()
    if len(dataset) < cfg.batch_size:
        raise DatasetTooSmall(
            f"dataset has {len(dataset)} items, need >= batch_size {cfg.batch_size}")

    rng = np.random.default_rng(cfg.seed)
    params_q = init_params if init_params is not None else enc.ParamSet.he_init(arch, rng)
    params_k = params_q.copy()
    queue = QueueMatrix.random_init(arch.dim, cfg.queue_size, rng, dtype=params_q.dtype)
    opt = init_opt_state if init_opt_state is not None else init_optimizer(cfg.optimizer, params_q)
    rho = cfg.rho if cfg.rho is not None else arch.input_size / 8.0

    history: list[EpochStats] = []
    epoch = start_epoch
    for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        perm = rng.permutation(len(dataset))
        losses = []
        for b in range(len(dataset) // cfg.batch_size):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            originals = [dataset[i] for i in idx]
            augmented = [augment(x, rng, rho) for x in originals]
            loss, grads, keys = batch_loss(params_q, params_k, originals,
                                           augmented, queue, cfg)
            params_q, opt = optimizer_step(opt, params_q, grads, lr)
            params_k = momentum_update(params_k, params_q, cfg.momentum)
            queue.enqueue_dequeue(keys)
            losses.append(loss)
        stats = EpochStats(epoch, float(np.mean(losses)), lr)
        history.append(stats)
        if progress is not None:
            progress(stats)
        if cfg.early_stop and len(history) > cfg.early_stop_patience:
            past = history[-1 - cfg.early_stop_patience].mean_loss
            improvement = (past - stats.mean_loss) / max(abs(past), 1e-12)
            if improvement < cfg.early_stop_rel_tol:
                break

    return TrainResult(params_q, history, opt, epoch if history else start_epoch)


def history_to_csv(history) -> str:
    lines = ["epoch,mean_loss,lr"]
    lines.extend(f"{h.epoch},{h.mean_loss!r},{h.lr!r}" for h in history)
    return "\n".join(lines) + "\n"


# --- optimizer-state sidecar ---------------------------------------------------

_OPT_HEAD = struct.Struct("<4sIIIQ")  # magic, version, kind, epochs_completed, step


def save_optimizer_state(state: OptimizerState, epochs_completed: int, path) -> None:
    """'SARO' sidecar: header plus (for Adam) both moment buffers as LE f32
    in the same declaration order as the checkpoint."""
    kind_code = _OPT_KINDS.index(state.kind)
    blob = _OPT_HEAD.pack(OPT_STATE_MAGIC, OPT_STATE_VERSION, kind_code,
                          epochs_completed, state.step)
    if state.kind == "adam":
        for _, a in state.m1.tensors():
            blob += a.astype("<f4").tobytes()
        for _, a in state.m2.tensors():
            blob += a.astype("<f4").tobytes()
    try:
        Path(path).write_bytes(blob)
    except OSError as e:
        raise IoError(f"cannot write optimizer state to {path}: {e}") from e


def load_optimizer_state(path, params: enc.ParamSet):
    """Returns (OptimizerState, epochs_completed); params supplies shapes."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read optimizer state from {path}: {e}") from e

    if len(raw) < _OPT_HEAD.size:
        raise MalformedHeader(f"{path}: optimizer sidecar header truncated")
    magic, version, kind_code, epochs_completed, step = _OPT_HEAD.unpack_from(raw)
    if magic != OPT_STATE_MAGIC:
        raise MalformedHeader(f"{path}: bad magic {magic!r}")
    if version != OPT_STATE_VERSION:
        raise VersionMismatch(f"{path}: unsupported sidecar version {version}")
    if kind_code >= len(_OPT_KINDS):
        raise MalformedFile(f"{path}: unknown optimizer kind {kind_code}")
    kind = _OPT_KINDS[kind_code]
    if kind == "sgd":
        if len(raw) != _OPT_HEAD.size:
            raise MalformedFile(f"{path}: trailing bytes in sgd sidecar")
        return OptimizerState("sgd", step), epochs_completed

    pos = _OPT_HEAD.size
    buffers = []
    for _ in range(2):
        arrs = []
        for name, a in params.tensors():
            nbytes = a.size * 4
            if len(raw) < pos + nbytes:
                raise MalformedFile(f"{path}: moment buffer {name} truncated")
            arrs.append(np.frombuffer(raw, dtype="<f4", count=a.size,
                                      offset=pos).reshape(a.shape).copy())
            pos += nbytes
        buffers.append(params._from_list(arrs))
    if pos != len(raw):
        raise MalformedFile(f"{path}: {len(raw) - pos} trailing bytes")
    return OptimizerState("adam", step, buffers[0], buffers[1]), epochs_completed
