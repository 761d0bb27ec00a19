"""Feature-vector encoder: small conv trunk -> GeM pooling -> FC head ->
l2 normalization, with an exact hand-written backward pass.

The trunk is three 3x3 stride-2 convolutions (padding 1), each followed by
ReLU. The ReLU guarantees a non-negative final map, which keeps the
generalized-mean power well defined. Pooling uses

    pooled_c = ( (1 / (H*W)) * sum_{h,w} o_{c,h,w}^p )^(1/p)

and the descriptor is d = normalize(F @ pooled + b_F). All operations are
pure; parameters are replaced, never mutated, so a ForwardCache is tied to
the exact ParamSet object that produced it.

float32 is the default compute mode; float64 is used for gradient
verification (finite_diff_check).
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    IoError,
    MalformedFile,
    MalformedHeader,
    NonPositiveExponent,
    ShapeMismatch,
    StaleCache,
    VersionMismatch,
    ZeroNorm,
)
from .raster import Raster

KERNEL = 3
STRIDE = 2
PADDING = 1

CHECKPOINT_MAGIC = b"SARW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture knobs; defaults are the desk-scale reference encoder."""

    input_size: int = 64
    channels: tuple[int, ...] = (16, 32, 32)
    dim: int = 64
    gem_p: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.input_size < 2 ** len(self.channels):
            raise ValueError(
                f"input_size {self.input_size} too small for {len(self.channels)} stride-2 layers"
            )
        if self.dim < 1 or not self.channels or min(self.channels) < 1:
            raise ValueError("dim and channel counts must be positive")
        if self.gem_p <= 0:
            raise NonPositiveExponent(f"gem_p must be > 0, got {self.gem_p}")

    def map_size(self) -> int:
        """Side length of the final feature map."""
        s = self.input_size
        for _ in self.channels:
            s = (s + 2 * PADDING - KERNEL) // STRIDE + 1
        return s


@dataclass
class ParamSet:
    """All learnable tensors of one encoder plus its architecture config.

    Treated as immutable: updates produce a new ParamSet. The same container
    is reused for gradients (one array per parameter tensor).
    """

    config: EncoderConfig
    conv_w: list  # per layer: (C_out, C_in, 3, 3)
    conv_b: list  # per layer: (C_out,)
    fc_w: np.ndarray  # (dim, C_last)
    fc_b: np.ndarray  # (dim,)

    @classmethod
    def he_init(cls, config: EncoderConfig, rng: np.random.Generator,
                dtype=np.float32) -> "ParamSet":
        """He-uniform weights (limit sqrt(6/fan_in)), zero biases."""
        conv_w, conv_b = [], []
        c_in = 1
        for c_out in config.channels:
            fan_in = c_in * KERNEL * KERNEL
            limit = np.sqrt(6.0 / fan_in)
            conv_w.append(rng.uniform(-limit, limit,
                                      (c_out, c_in, KERNEL, KERNEL)).astype(dtype))
            conv_b.append(np.zeros(c_out, dtype=dtype))
            c_in = c_out
        limit = np.sqrt(6.0 / c_in)
        fc_w = rng.uniform(-limit, limit, (config.dim, c_in)).astype(dtype)
        fc_b = np.zeros(config.dim, dtype=dtype)
        return cls(config, conv_w, conv_b, fc_w, fc_b)

    @classmethod
    def zeros(cls, config: EncoderConfig, dtype=np.float32) -> "ParamSet":
        conv_w, conv_b = [], []
        c_in = 1
        for c_out in config.channels:
            conv_w.append(np.zeros((c_out, c_in, KERNEL, KERNEL), dtype=dtype))
            conv_b.append(np.zeros(c_out, dtype=dtype))
            c_in = c_out
        return cls(config, conv_w, conv_b,
                   np.zeros((config.dim, c_in), dtype=dtype),
                   np.zeros(config.dim, dtype=dtype))

    @property
    def dtype(self):
        return self.fc_w.dtype

    def tensors(self):
        """(name, array) pairs in fixed declaration order."""
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            yield f"conv{i}.w", w
            yield f"conv{i}.b", b
        yield "fc.w", self.fc_w
        yield "fc.b", self.fc_b

    def map_tensors(self, fn) -> "ParamSet":
        arrs = [fn(a) for _, a in self.tensors()]
        return self._from_list(arrs)

    def zip_map(self, other: "ParamSet", fn) -> "ParamSet":
        out = []
        for (name, a), (_, b) in zip(self.tensors(), other.tensors()):
            if a.shape != b.shape:
                raise ShapeMismatch(f"{name}: {a.shape} vs {b.shape}")
            out.append(fn(a, b))
        return self._from_list(out)

    def _from_list(self, arrs) -> "ParamSet":
        n = len(self.conv_w)
        return ParamSet(self.config,
                        [arrs[2 * i] for i in range(n)],
                        [arrs[2 * i + 1] for i in range(n)],
                        arrs[2 * n], arrs[2 * n + 1])

    def copy(self) -> "ParamSet":
        return self.map_tensors(np.copy)

    def astype(self, dtype) -> "ParamSet":
        return self.map_tensors(lambda a: a.astype(dtype))

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.tensors()])

    def with_flat(self, vec: np.ndarray) -> "ParamSet":
        """New ParamSet with values taken from a flat vector (same layout
        as flatten())."""
        arrs, pos = [], 0
        for _, a in self.tensors():
            arrs.append(np.asarray(vec[pos:pos + a.size],
                                   dtype=a.dtype).reshape(a.shape))
            pos += a.size
        if pos != vec.size:
            raise ShapeMismatch(f"flat vector has {vec.size} entries, expected {pos}")
        return self._from_list(arrs)

    def n_params(self) -> int:
        return sum(a.size for _, a in self.tensors())


@dataclass
class ForwardCache:
    """Intermediates of one forward pass, sufficient for an exact backward."""

    params: ParamSet
    inputs: list        # per layer input (C_in, H, W)
    patches: list       # per layer im2col matrix (H_out*W_out, C_in*9)
    pre: list           # per layer pre-activation (C_out, H_out, W_out)
    fmap: np.ndarray    # final ReLU map (C, Hc, Wc)
    pooled: np.ndarray  # GeM output (C,)
    d_raw: np.ndarray   # pre-normalization descriptor (dim,)
    d: np.ndarray       # unit descriptor (dim,)
    raw_norm: float


def gem_pool(fmap: np.ndarray, p: float) -> np.ndarray:
    """Generalized-mean pooling over the spatial axes of a (C, H, W) map."""
    if p <= 0:
        raise NonPositiveExponent(f"pooling exponent must be > 0, got {p}")
    fmap = np.asarray(fmap)
    return np.mean(fmap ** p, axis=(1, 2)) ** (1.0 / p)


def _gem_backward(dpooled, fmap, pooled, p):
    hw = fmap.shape[1] * fmap.shape[2]
    # d pooled_c / d o_{c,h,w} = pooled_c^(1-p) * o^(p-1) / (H*W);
    # all-zero channels pool to 0 and get zero gradient.
    safe = np.where(pooled > 0.0, pooled, 1.0)
    scale = np.where(pooled > 0.0, safe ** (1.0 - p), 0.0)
    return (dpooled * scale)[:, None, None] * fmap ** (p - 1.0) / hw


def _conv_forward(x, w, b):
    c_out = w.shape[0]
    c_in, h, wd = x.shape
    h_out = (h + 2 * PADDING - KERNEL) // STRIDE + 1
    w_out = (wd + 2 * PADDING - KERNEL) // STRIDE + 1
    xp = np.pad(x, ((0, 0), (PADDING, PADDING), (PADDING, PADDING)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))
    win = win[:, ::STRIDE, ::STRIDE]
    patches = win.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * KERNEL * KERNEL)
    pre = patches @ w.reshape(c_out, -1).T + b
    return pre.T.reshape(c_out, h_out, w_out).copy(), patches


def _conv_backward(dpre, patches, w, x_shape):
    c_out, h_out, w_out = dpre.shape
    dmat = dpre.reshape(c_out, -1).T  # (H_out*W_out, C_out)
    dw = (patches.T @ dmat).T.reshape(w.shape)
    db = dmat.sum(axis=0)
    dpatches = dmat @ w.reshape(c_out, -1)

    c_in, h, wd = x_shape
    dxp = np.zeros((c_in, h + 2 * PADDING, wd + 2 * PADDING), dtype=dpre.dtype)
    dpat = dpatches.reshape(h_out, w_out, c_in, KERNEL, KERNEL).transpose(2, 0, 1, 3, 4)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            dxp[:, ki:ki + STRIDE * h_out:STRIDE,
                kj:kj + STRIDE * w_out:STRIDE] += dpat[:, :, :, ki, kj]
    return dw, db, dxp[:, PADDING:PADDING + h, PADDING:PADDING + wd]


def _conv_forward_batch(x, w, b):
    """Batched conv: x (N, C_in, H, W) -> pre (N, C_out, H_out, W_out)."""
    c_out = w.shape[0]
    n, c_in, h, wd = x.shape
    h_out = (h + 2 * PADDING - KERNEL) // STRIDE + 1
    w_out = (wd + 2 * PADDING - KERNEL) // STRIDE + 1
    xp = np.pad(x, ((0, 0), (0, 0), (PADDING, PADDING), (PADDING, PADDING)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (KERNEL, KERNEL), axis=(2, 3))
    win = win[:, :, ::STRIDE, ::STRIDE]
    patches = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out,
                                                      c_in * KERNEL * KERNEL)
    pre = patches @ w.reshape(c_out, -1).T + b
    return pre.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2).copy(), patches


def _conv_backward_batch(dpre, patches, w, x_shape):
    """Batched conv gradients; dw/db are summed over the batch."""
    n, c_out, h_out, w_out = dpre.shape
    dmat = dpre.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, c_out)
    dw = (patches.T @ dmat).T.reshape(w.shape)
    db = dmat.sum(axis=0)
    dpatches = dmat @ w.reshape(c_out, -1)

    _, c_in, h, wd = x_shape
    dxp = np.zeros((n, c_in, h + 2 * PADDING, wd + 2 * PADDING), dtype=dpre.dtype)
    dpat = dpatches.reshape(n, h_out, w_out, c_in, KERNEL, KERNEL).transpose(0, 3, 1, 2, 4, 5)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            dxp[:, :, ki:ki + STRIDE * h_out:STRIDE,
                kj:kj + STRIDE * w_out:STRIDE] += dpat[:, :, :, :, ki, kj]
    return dw, db, dxp[:, :, PADDING:PADDING + h, PADDING:PADDING + wd]


@dataclass
class BatchForwardCache:
    """Intermediates of one batched forward, mirroring ForwardCache."""

    params: ParamSet
    inputs: list
    patches: list
    pre: list
    fmap: np.ndarray     # (N, C, Hc, Wc)
    pooled: np.ndarray   # (N, C)
    d_raw: np.ndarray    # (N, dim)
    d: np.ndarray        # (N, dim)
    raw_norm: np.ndarray  # (N,)


def forward_batch(params: ParamSet, imgs) -> tuple[np.ndarray, BatchForwardCache]:
    """Encoder over a batch of images in one pass; numerically equivalent to
    per-image forward() up to gemm summation order."""
    size = params.config.input_size
    arrs = []
    for img in imgs:
        a = img.pixels if isinstance(img, Raster) else np.asarray(img)
        if a.shape != (size, size):
            raise ShapeMismatch(f"expected {size}x{size} input, got {a.shape}")
        arrs.append(a)
    x = np.stack(arrs).astype(params.dtype)[:, None]

    inputs, patches, pres = [], [], []
    for w, b in zip(params.conv_w, params.conv_b):
        inputs.append(x)
        pre, pat = _conv_forward_batch(x, w, b)
        patches.append(pat)
        pres.append(pre)
        x = np.maximum(pre, 0.0)

    p = params.config.gem_p
    pooled = np.mean(x ** p, axis=(2, 3)) ** (1.0 / p)
    d_raw = pooled @ params.fc_w.T + params.fc_b
    raw_norm = np.linalg.norm(d_raw, axis=1)
    if np.any(raw_norm < 1e-12):
        raise ZeroNorm("descriptor norm vanished; cannot l2-normalize")
    d = d_raw / raw_norm[:, None]
    return d, BatchForwardCache(params, inputs, patches, pres, x, pooled,
                                d_raw, d, raw_norm)


def backward_batch(params: ParamSet, cache: BatchForwardCache,
                   grad_d: np.ndarray | None = None,
                   grad_d_raw: np.ndarray | None = None) -> ParamSet:
    """Batch-summed gradients; cotangents are (N, dim) arrays."""
    if cache.params is not params:
        raise StaleCache("cache was produced by a different ParamSet")
    n, dim = cache.d.shape
    g_raw = np.zeros((n, dim), dtype=params.dtype)
    if grad_d_raw is not None:
        g_raw = g_raw + np.asarray(grad_d_raw, dtype=params.dtype)
    if grad_d is not None:
        gd = np.asarray(grad_d, dtype=params.dtype)
        proj = np.sum(cache.d * gd, axis=1, keepdims=True)
        g_raw = g_raw + (gd - cache.d * proj) / cache.raw_norm[:, None]

    dfc_w = g_raw.T @ cache.pooled
    dfc_b = g_raw.sum(axis=0)
    dpooled = g_raw @ params.fc_w

    p = params.config.gem_p
    hw = cache.fmap.shape[2] * cache.fmap.shape[3]
    safe = np.where(cache.pooled > 0.0, cache.pooled, 1.0)
    scale = np.where(cache.pooled > 0.0, safe ** (1.0 - p), 0.0)
    dx = (dpooled * scale)[:, :, None, None] * cache.fmap ** (p - 1.0) / hw

    dconv_w, dconv_b = [None] * len(params.conv_w), [None] * len(params.conv_b)
    for i in reversed(range(len(params.conv_w))):
        dpre = dx * (cache.pre[i] > 0.0)
        dw, db, dx = _conv_backward_batch(dpre, cache.patches[i], params.conv_w[i],
                                          cache.inputs[i].shape)
        dconv_w[i], dconv_b[i] = dw, db
    return ParamSet(params.config, dconv_w, dconv_b, dfc_w, dfc_b)


def forward(params: ParamSet, img) -> tuple[np.ndarray, ForwardCache]:
    """Run the encoder on one image.

    Returns the unit-norm descriptor d and a cache for backward(). img may
    be a Raster or a (H, W) array matching the configured input size.
    """
    arr = img.pixels if isinstance(img, Raster) else np.asarray(img)
    size = params.config.input_size
    if arr.shape != (size, size):
        raise ShapeMismatch(f"expected {size}x{size} input, got {arr.shape}")

    x = arr.astype(params.dtype)[None]
    inputs, patches, pres = [], [], []
    for w, b in zip(params.conv_w, params.conv_b):
        inputs.append(x)
        pre, pat = _conv_forward(x, w, b)
        patches.append(pat)
        pres.append(pre)
        x = np.maximum(pre, 0.0)

    pooled = gem_pool(x, params.config.gem_p)
    d_raw = params.fc_w @ pooled + params.fc_b
    raw_norm = float(np.linalg.norm(d_raw))
    if raw_norm < 1e-12:
        raise ZeroNorm("descriptor norm vanished; cannot l2-normalize")
    d = d_raw / raw_norm
    cache = ForwardCache(params, inputs, patches, pres, x, pooled, d_raw, d, raw_norm)
    return d, cache


def backward(params: ParamSet, cache: ForwardCache,
             grad_d: np.ndarray | None = None,
             grad_d_raw: np.ndarray | None = None) -> ParamSet:
    """Exact gradients of a scalar loss w.r.t. every parameter tensor.

    Cotangents may be supplied on the normalized descriptor d, on the raw
    descriptor, or both; the normalization Jacobian (I - d d^T) / ||d_raw||
    is applied to grad_d internally. Returns a ParamSet-shaped container of
    gradients.
    """
    if cache.params is not params:
        raise StaleCache("cache was produced by a different ParamSet")
    if grad_d is None and grad_d_raw is None:
        raise ValueError("at least one of grad_d / grad_d_raw is required")

    dim = params.config.dim
    g_raw = np.zeros(dim, dtype=params.dtype)
    if grad_d_raw is not None:
        if np.shape(grad_d_raw) != (dim,):
            raise ShapeMismatch(f"grad_d_raw must have shape ({dim},)")
        g_raw = g_raw + np.asarray(grad_d_raw, dtype=params.dtype)
    if grad_d is not None:
        if np.shape(grad_d) != (dim,):
            raise ShapeMismatch(f"grad_d must have shape ({dim},)")
        gd = np.asarray(grad_d, dtype=params.dtype)
        g_raw = g_raw + (gd - cache.d * float(cache.d @ gd)) / cache.raw_norm

    dfc_w = np.outer(g_raw, cache.pooled)
    dfc_b = g_raw.copy()
    dpooled = params.fc_w.T @ g_raw

    dx = _gem_backward(dpooled, cache.fmap, cache.pooled, params.config.gem_p)
    dconv_w, dconv_b = [None] * len(params.conv_w), [None] * len(params.conv_b)
    for i in reversed(range(len(params.conv_w))):
        dpre = dx * (cache.pre[i] > 0.0)
        dw, db, dx = _conv_backward(dpre, cache.patches[i], params.conv_w[i],
                                    cache.inputs[i].shape)
        dconv_w[i], dconv_b[i] = dw, db

    return ParamSet(params.config, dconv_w, dconv_b, dfc_w, dfc_b)


# --- gradient verification ---------------------------------------------------


@dataclass
class FiniteDiffReport:
    passed: bool
    max_rel_err: float
    tol: float
    step: float
    n_params: int
    worst: list = field(default_factory=list)  # (name, index, analytic, numeric, rel)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"finite-diff check: {status} "
                 f"(max rel err {self.max_rel_err:.3e}, tol {self.tol:.1e}, "
                 f"{self.n_params} params, step {self.step:.1e})"]
        for name, idx, a, n, r in self.worst:
            lines.append(f"  {name}[{idx}]: analytic={a: .9e} numeric={n: .9e} rel={r:.3e}")
        return "\n".join(lines)


def finite_diff_check(params: ParamSet, value_and_grad,
                      step: float = 1e-5, tol: float = 1e-5) -> FiniteDiffReport:
    """Compare analytic gradients against central finite differences.

    value_and_grad(params) must return (scalar loss, ParamSet gradients) and
    be deterministic. Relative error uses |a - n| / max(1, |a|, |n|) so that
    near-zero gradients are judged on an absolute scale. A failing check is
    reported, not raised.
    """
    _, grads = value_and_grad(params)
    analytic = grads.flatten().astype(np.float64)
    flat = params.flatten().astype(np.float64)

    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = value_and_grad(params.with_flat(flat))[0]
        flat[i] = orig - step
        lm = value_and_grad(params.with_flat(flat))[0]
        flat[i] = orig
        numeric[i] = (lp - lm) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    order = np.argsort(rel)[::-1][:5]

    names = []
    for name, a in params.tensors():
        names.extend((name, j) for j in range(a.size))
    worst = [(names[i][0], names[i][1], float(analytic[i]), float(numeric[i]),
              float(rel[i])) for i in order]
    max_rel = float(rel.max()) if rel.size else 0.0
    return FiniteDiffReport(max_rel <= tol, max_rel, tol, step,
                            int(flat.size), worst)


# --- checkpoint format -------------------------------------------------------

_CKPT_HEAD = struct.Struct("<4sII")  # magic, version, dim


def save_checkpoint(params: ParamSet, path) -> None:
    """Serialize to the 'SARW' container: header, architecture block, then
    every tensor as little-endian f32 in declaration order."""
    cfg = params.config
    blob = _CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.dim)
    blob += struct.pack("<II", cfg.input_size, len(cfg.channels))
    blob += struct.pack(f"<{len(cfg.channels)}I", *cfg.channels)
    blob += struct.pack("<f", cfg.gem_p)
    for _, a in params.tensors():
        blob += a.astype("<f4").tobytes()
    try:
        Path(path).write_bytes(blob)
    except OSError as e:
        raise IoError(f"cannot write checkpoint to {path}: {e}") from e


def load_checkpoint(path) -> ParamSet:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read checkpoint from {path}: {e}") from e

    if len(raw) < _CKPT_HEAD.size + 8:
        raise MalformedHeader(f"{path}: checkpoint header truncated")
    magic, version, dim = _CKPT_HEAD.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise MalformedHeader(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: unsupported checkpoint version {version}")

    pos = _CKPT_HEAD.size
    input_size, n_layers = struct.unpack_from("<II", raw, pos)
    pos += 8
    if n_layers == 0 or len(raw) < pos + 4 * n_layers + 4:
        raise MalformedFile(f"{path}: architecture block truncated")
    channels = struct.unpack_from(f"<{n_layers}I", raw, pos)
    pos += 4 * n_layers
    (gem_p,) = struct.unpack_from("<f", raw, pos)
    pos += 4

    config = EncoderConfig(input_size=input_size, channels=channels,
                           dim=dim, gem_p=float(gem_p))
    params = ParamSet.zeros(config, dtype=np.float32)
    arrs = []
    for name, a in params.tensors():
        nbytes = a.size * 4
        if len(raw) < pos + nbytes:
            raise MalformedFile(f"{path}: tensor {name} truncated")
        arrs.append(np.frombuffer(raw, dtype="<f4", count=a.size,
                                  offset=pos).reshape(a.shape).copy())
        pos += nbytes
    if pos != len(raw):
        raise MalformedFile(f"{path}: {len(raw) - pos} trailing bytes")
    return params._from_list(arrs)
