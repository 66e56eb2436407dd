"""Small convolutional regressor with hand-written forward and backward passes.

Pipeline (input B x 1 x 200 x 200, output B x 8 in meters)::

    conv 5x5 (8) -> relu -> batchnorm -> maxpool 2
    -> conv 5x5 (16) -> maxpool 2 -> flatten (35344)
    -> dense (hidden) -> relu -> dense (8)
"""
from __future__ import annotations

import queue
import threading
from collections.abc import Iterable, Iterator
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

N_OUT = 8
KERNEL = 5
CONV1_CHANNELS = 8
CONV2_CHANNELS = 16
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
# images per im2col chunk; bounds the temporary column matrix
_CHUNK_PIXELS = 2_000_000


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 100
    epochs: int = 20
    hidden: int = 128
    seed: int = 0
    dtype: str = "float32"
    conv2_relu_bn: bool = False   # ablation: relu + batchnorm after conv2 too
    prefetch: int = 2

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.hidden < 1:
            raise ValueError("batch_size, hidden must be >= 1 and epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_json(self) -> dict:
        return asdict(self)


def shape_chain(size: int) -> list[int]:
    """Spatial sizes input -> conv1 -> pool -> conv2 -> pool."""
    c1 = size - (KERNEL - 1)
    p1 = c1 // 2
    c2 = p1 - (KERNEL - 1)
    p2 = c2 // 2
    chain = [size, c1, p1, c2, p2]
    if min(chain[1:]) < 1:
        raise ShapeError(f"input size {size} is too small for the network: {chain}")
    return chain


def flatten_width(size: int) -> int:
    return CONV2_CHANNELS * shape_chain(size)[-1] ** 2


def _check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {where}")
    return x


# ---------------------------------------------------------------- primitives

def _chunks(batch: int, per_item: int) -> Iterator[slice]:
    step = max(1, _CHUNK_PIXELS // max(per_item, 1))
    for s in range(0, batch, step):
        yield slice(s, min(batch, s + step))


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, c, _, _ = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))   # b, c, ho, wo, kh, kw
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid cross-correlation, stride 1."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: input {x.shape}, kernels {w.shape}, bias {b.shape}")
    bsz, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    if h < kh or wd < kw:
        raise ShapeError(f"conv2d: input {h}x{wd} smaller than kernel {kh}x{kw}")
    ho, wo = h - kh + 1, wd - kw + 1
    wm = w.reshape(k, -1)
    out = np.empty((bsz, k, ho, wo), dtype=np.result_type(x, w))
    for sl in _chunks(bsz, ho * wo * c * kh * kw):
        cols = _im2col(x[sl], kh, kw)
        y = cols @ wm.T
        out[sl] = y.reshape(-1, ho, wo, k).transpose(0, 3, 1, 2)
    out += b[None, :, None, None]
    return out


def conv2d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray, need_dx: bool = True):
    bsz, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    wm = w.reshape(k, -1)
    dw = np.zeros_like(wm)
    dx = np.zeros_like(x) if need_dx else None
    for sl in _chunks(bsz, ho * wo * c * kh * kw):
        dym = dy[sl].transpose(0, 2, 3, 1).reshape(-1, k)
        dw += dym.T @ _im2col(x[sl], kh, kw)
        if need_dx:
            dcols = (dym @ wm).reshape(-1, ho, wo, c, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    dx[sl, :, i:i + ho, j:j + wo] += dcols[..., i, j].transpose(0, 3, 1, 2)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw.reshape(w.shape), db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling, stride 2; a trailing odd row/column is dropped.

    Returns the pooled tensor and the winning index (0..3) in each window;
    ties go to the first element in row-major window order.
    """
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2: input {h}x{w} too small")
    win = x[:, :, : 2 * h2, : 2 * w2].reshape(b, c, h2, 2, w2, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def maxpool2_backward(dy: np.ndarray, idx: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    b, c, h, w = in_shape
    h2, w2 = dy.shape[2], dy.shape[3]
    win = np.zeros((b, c, h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(win, idx[..., None], dy[..., None], axis=-1)
    full = np.zeros(in_shape, dtype=dy.dtype)
    full[:, :, : 2 * h2, : 2 * w2] = (
        win.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    )
    return full


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.updates = 0

    def copy(self) -> BatchNormState:
        s = BatchNormState(len(self.mean), self.mean.dtype)
        s.mean, s.var, s.updates = self.mean.copy(), self.var.copy(), self.updates
        return s


def batchnorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, state: BatchNormState,
              mode: str = "train", update: bool = True):
    """Per-channel normalization; returns (output, cache for backward).

    Train mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate (momentum 0.1).
    """
    if mode == "train":
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ShapeError("batchnorm in train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update:
            state.mean = ((1 - BN_MOMENTUM) * state.mean + BN_MOMENTUM * mean).astype(state.mean.dtype)
            state.var = ((1 - BN_MOMENTUM) * state.var
                         + BN_MOMENTUM * var * (n / (n - 1))).astype(state.var.dtype)
            state.updates += 1
    elif mode == "eval":
        if state.updates == 0:
            raise RuntimeError("batchnorm running statistics are uninitialized; "
                               "run at least one training batch before eval")
        mean, var = state.mean, state.var
    else:
        raise ValueError("mode must be 'train' or 'eval'")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, mode)


def batchnorm_backward(dy: np.ndarray, gamma: np.ndarray, cache):
    xhat, inv_std, mode = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if mode == "eval":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff, dtype=np.float64)), (2.0 / diff.size) * diff


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      velocity: dict[str, np.ndarray], lr: float, momentum: float):
    """``v <- momentum * v + g``; ``p <- p - lr * v`` (in place; velocity starts at zero)."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        p -= lr * v
    return params, velocity


# ------------------------------------------------------------------- network

class Network:
    def __init__(self, input_size: int = 200, hidden: int = 128, dtype: str = "float32",
                 conv2_relu_bn: bool = False):
        chain = shape_chain(input_size)
        if input_size == 200 and (chain != [200, 196, 98, 94, 47] or flatten_width(200) != 35344):
            raise ShapeError(f"unexpected shape chain {chain}")
        self.input_size = input_size
        self.hidden = hidden
        self.dtype = np.dtype(dtype)
        self.conv2_relu_bn = conv2_relu_bn
        self.chain = chain
        self.flat = flatten_width(input_size)
        self.params: dict[str, np.ndarray] = {}
        self.bn = {"bn1": BatchNormState(CONV1_CHANNELS, self.dtype)}
        if conv2_relu_bn:
            self.bn["bn2"] = BatchNormState(CONV2_CHANNELS, self.dtype)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {
            "conv1.w": (CONV1_CHANNELS, 1, KERNEL, KERNEL),
            "conv1.b": (CONV1_CHANNELS,),
            "bn1.gamma": (CONV1_CHANNELS,),
            "bn1.beta": (CONV1_CHANNELS,),
            "conv2.w": (CONV2_CHANNELS, CONV1_CHANNELS, KERNEL, KERNEL),
            "conv2.b": (CONV2_CHANNELS,),
        }
        if self.conv2_relu_bn:
            shapes["bn2.gamma"] = (CONV2_CHANNELS,)
            shapes["bn2.beta"] = (CONV2_CHANNELS,)
        shapes.update({
            "fc1.w": (self.hidden, self.flat),
            "fc1.b": (self.hidden,),
            "fc2.w": (N_OUT, self.hidden),
            "fc2.b": (N_OUT,),
        })
        return shapes

    @classmethod
    def initialized(cls, seed: int, input_size: int = 200, hidden: int = 128,
                    dtype: str = "float32", conv2_relu_bn: bool = False,
                    output_bias: np.ndarray | None = None) -> Network:
        """Weights and biases uniform in +-1/sqrt(fan_in); batch-norm scale 1, shift 0.

        ``output_bias`` (typically the training-target mean) overrides the
        final bias. Without it the first steps at lr 0.01 / momentum 0.9
        chase a ~1 m error through a 35344-wide layer and diverge.
        """
        net = cls(input_size, hidden, dtype, conv2_relu_bn)
        rng = np.random.default_rng(seed)
        fan_in = {"conv1": KERNEL * KERNEL, "conv2": CONV1_CHANNELS * KERNEL * KERNEL,
                  "fc1": net.flat, "fc2": hidden}
        for name, shape in net.param_shapes().items():
            layer, kind = name.split(".")
            if kind == "gamma":
                val = np.ones(shape)
            elif kind == "beta":
                val = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(fan_in[layer])
                val = rng.uniform(-bound, bound, size=shape)
            net.params[name] = val.astype(net.dtype)
        if output_bias is not None:
            ob = np.asarray(output_bias, dtype=net.dtype)
            if ob.shape != (N_OUT,):
                raise ShapeError(f"output_bias must have shape ({N_OUT},)")
            net.params["fc2.b"] = ob.copy()
        return net

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        shapes = self.param_shapes()
        if set(params) != set(shapes):
            raise ShapeError(f"parameter names differ: {sorted(set(params) ^ set(shapes))}")
        for k, v in params.items():
            if tuple(v.shape) != shapes[k]:
                raise ShapeError(f"{k}: shape {v.shape} != {shapes[k]}")
            self.params[k] = np.ascontiguousarray(v, dtype=self.dtype)

    def forward(self, images: np.ndarray, mode: str = "eval", update_stats: bool = True):
        """Return (B x 8 predictions, cache). ``images`` are B x 1 x H x W floats."""
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != (1, self.input_size, self.input_size):
            raise ShapeError(f"expected B x 1 x {self.input_size} x {self.input_size}, got {x.shape}")
        p = self.params
        cache: dict = {"x": x}
        z1 = conv2d(x, p["conv1.w"], p["conv1.b"])
        a1 = relu(z1)
        n1, cache["bn1"] = batchnorm(a1, p["bn1.gamma"], p["bn1.beta"], self.bn["bn1"], mode, update_stats)
        p1, cache["pool1"] = maxpool2(n1)
        z2 = conv2d(p1, p["conv2.w"], p["conv2.b"])
        h2 = z2
        if self.conv2_relu_bn:
            a2 = relu(z2)
            h2, cache["bn2"] = batchnorm(a2, p["bn2.gamma"], p["bn2.beta"], self.bn["bn2"], mode,
                                         update_stats)
            cache["a2"] = a2
        p2, cache["pool2"] = maxpool2(h2)
        flat = p2.reshape(len(x), -1)
        h = flat @ p["fc1.w"].T + p["fc1.b"]
        a = relu(h)
        out = a @ p["fc2.w"].T + p["fc2.b"]
        cache.update(z1=z1, n1=n1, p1=p1, z2=z2, h2=h2, flat=flat, h=h, a=a)
        return _check_finite(out, "network output"), cache

    def backward(self, cache: dict, dout: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        g: dict[str, np.ndarray] = {}
        dout = np.asarray(dout, dtype=self.dtype)
        g["fc2.w"] = dout.T @ cache["a"]
        g["fc2.b"] = dout.sum(axis=0)
        da = dout @ p["fc2.w"]
        dh = relu_backward(da, cache["h"])
        g["fc1.w"] = dh.T @ cache["flat"]
        g["fc1.b"] = dh.sum(axis=0)
        dflat = dh @ p["fc1.w"]
        dp2 = dflat.reshape(cache["pool2"].shape[:4])
        dh2 = maxpool2_backward(dp2, cache["pool2"], cache["h2"].shape)
        dz2 = dh2
        if self.conv2_relu_bn:
            da2, g["bn2.gamma"], g["bn2.beta"] = batchnorm_backward(dh2, p["bn2.gamma"], cache["bn2"])
            dz2 = relu_backward(da2, cache["a2"])
        dp1, g["conv2.w"], g["conv2.b"] = conv2d_backward(dz2, cache["p1"], p["conv2.w"])
        dn1 = maxpool2_backward(dp1, cache["pool1"], cache["n1"].shape)
        da1, g["bn1.gamma"], g["bn1.beta"] = batchnorm_backward(dn1, p["bn1.gamma"], cache["bn1"])
        dz1 = relu_backward(da1, cache["z1"])
        _, g["conv1.w"], g["conv1.b"] = conv2d_backward(dz1, cache["x"], p["conv1.w"], need_dx=False)
        for k, v in g.items():
            _check_finite(v, f"gradient of {k}")
        return {k: g[k].astype(self.dtype, copy=False) for k in self.params}

    def predict(self, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
        outs = [self.forward(images[s:s + batch_size], "eval")[0]
                for s in range(0, len(images), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, N_OUT), self.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus batch-norm running statistics, for checkpoints."""
        out = dict(self.params)
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
            out[f"{name}.updates"] = np.array([st.updates], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.load_params({k: v for k, v in arrays.items() if k in self.param_shapes()})
        for name, st in self.bn.items():
            st.mean = np.asarray(arrays[f"{name}.running_mean"], dtype=self.dtype).copy()
            st.var = np.asarray(arrays[f"{name}.running_var"], dtype=self.dtype).copy()
            st.updates = int(arrays[f"{name}.updates"][0])


def to_input(images_u8: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 images (B x H x W) -> network input B x 1 x H x W scaled to [0, 1]."""
    x = np.asarray(images_u8, dtype=dtype) / dtype(255.0)
    return x[:, None, :, :]


# ------------------------------------------------------------------- training

def prefetch(items: Iterable, depth: int) -> Iterator:
    """Produce ``items`` from a background thread, at most ``depth`` ahead, in order."""
    if depth <= 0:
        yield from items
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def worker():
        try:
            for it in items:
                while not stop.is_set():
                    try:
                        q.put(("item", it), timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced in the consumer
            q.put(("error", exc))
            return
        q.put(("done", done))

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        while True:
            kind, val = q.get()
            if kind == "done":
                break
            if kind == "error":
                raise val
            yield val
    finally:
        stop.set()
        t.join(timeout=5)


def train_epoch(net: Network, images_u8: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
                velocity: dict[str, np.ndarray], rng: np.random.Generator) -> float:
    """One pass over the data in shuffled mini-batches; returns the mean batch loss."""
    order = rng.permutation(len(images_u8))
    batches = [order[s:s + cfg.batch_size] for s in range(0, len(order), cfg.batch_size)]
    dt = net.dtype.type

    def assemble():
        for idx in batches:
            yield to_input(images_u8[idx], dt), targets[idx].astype(net.dtype)

    losses, weights = [], []
    for x, y in prefetch(assemble(), cfg.prefetch):
        if len(x) < 2:
            continue  # batch-norm statistics need more than one image
        pred, cache = net.forward(x, "train")
        loss, dpred = mse_loss(pred, y)
        grads = net.backward(cache, dpred)
        sgd_momentum_step(net.params, grads, velocity, cfg.lr, cfg.momentum)
        losses.append(loss)
        weights.append(len(x))
    return float(np.average(losses, weights=weights)) if losses else float("nan")
