"""The residual 1-D CNN: parameters, forward/backward passes, prediction and checkpoints.

Parameters live in a plain ``dict`` mapping names to numpy arrays, in a fixed
order (see :meth:`Architecture.param_shapes`). Batch-norm running statistics are
stored alongside the trainable arrays but are not trainable.

Network (default sizes)::

    [B,3,200] -conv1(24,s2)-> [B,128,89] -bn,relu-> -maxpool(3,3)-> [B,128,29]
        left:  conv2(3,p1) bn relu conv3(3,p1) bn relu   -> [B,32,29]
        right: conv_sc(1) bn                              -> [B,32,29]
    add -> relu -> global average pool [B,32] -> linear [B,5]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import ndcore as nd
from .exceptions import FormatError, ShapeError, UsageError

BN_LAYERS = ("bn1", "bn2", "bn3", "bn_sc")
BN_FIELDS = ("gamma", "beta", "running_mean", "running_var")
CONV_LAYERS = ("conv1_w", "conv2_w", "conv3_w", "conv_sc_w")
# arrays that receive L2 weight decay
DECAYED = frozenset(CONV_LAYERS + ("fc_w",))
RUNNING_STATS = frozenset(f"{bn}.{f}" for bn in BN_LAYERS for f in ("running_mean", "running_var"))


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 3
    length: int = 200
    conv1_filters: int = 128
    conv1_kernel: int = 24
    conv1_stride: int = 2
    pool_size: int = 3
    pool_stride: int = 3
    res_filters: int = 32
    res_kernel: int = 3
    n_classes: int = 5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    @classmethod
    def tiny(cls):
        """Shrunken variant for full-model finite-difference checks."""
        return cls(length=20, conv1_filters=8, conv1_kernel=4, res_filters=4)

    @property
    def res_padding(self):
        # "same" padding so the residual branch matches the 1x1 shortcut length
        return (self.res_kernel - 1) // 2

    def shape_chain(self):
        l1 = nd.conv_output_length(self.length, self.conv1_kernel, self.conv1_stride, 0)
        l2 = nd.pool_output_length(l1, self.pool_size, self.pool_stride)
        l3 = nd.conv_output_length(l2, self.res_kernel, 1, self.res_padding)
        return {
            "conv1": (self.conv1_filters, l1),
            "maxpool": (self.conv1_filters, l2),
            "residual": (self.res_filters, l3),
            "gap": (self.res_filters,),
            "logits": (self.n_classes,),
        }

    def param_shapes(self):
        f1, f2 = self.conv1_filters, self.res_filters
        shapes = {"conv1_w": (f1, self.in_channels, self.conv1_kernel)}
        shapes.update({f"bn1.{f}": (f1,) for f in BN_FIELDS})
        shapes["conv2_w"] = (f2, f1, self.res_kernel)
        shapes.update({f"bn2.{f}": (f2,) for f in BN_FIELDS})
        shapes["conv3_w"] = (f2, f2, self.res_kernel)
        shapes.update({f"bn3.{f}": (f2,) for f in BN_FIELDS})
        shapes["conv_sc_w"] = (f2, f1, 1)
        shapes.update({f"bn_sc.{f}": (f2,) for f in BN_FIELDS})
        shapes["fc_w"] = (self.n_classes, f2)
        shapes["fc_b"] = (self.n_classes,)
        return shapes

    @classmethod
    def from_params(cls, params, length=None):
        """Recover the architecture from parameter shapes."""
        f1, cin, k1 = params["conv1_w"].shape
        f2, _, k2 = params["conv2_w"].shape
        arch = cls(in_channels=cin, conv1_filters=f1, conv1_kernel=k1, res_filters=f2,
                   res_kernel=k2, n_classes=params["fc_w"].shape[0])
        return replace(arch, length=length) if length is not None else arch


DEFAULT_ARCH = Architecture()


def init_params(seed=0, arch=DEFAULT_ARCH, dtype=np.float32):
    """He-normal weights, unit/zero batch-norm affine, zero fc bias."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name in DECAYED:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif name.endswith(("gamma", "running_var")):
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    return params


def trainable_names(params):
    return [name for name in params if name not in RUNNING_STATS]


def parameter_count(params):
    """Number of trainable scalars (running statistics excluded)."""
    return int(sum(params[name].size for name in trainable_names(params)))


def copy_params(params):
    return {name: arr.copy() for name, arr in params.items()}


def _bn_state(params, layer, arch):
    return nd.BatchNormState(
        params[f"{layer}.gamma"],
        params[f"{layer}.beta"],
        params[f"{layer}.running_mean"],
        params[f"{layer}.running_var"],
        eps=arch.bn_eps,
        momentum=arch.bn_momentum,
    )


def _check_batch(x, arch):
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1:] != (arch.in_channels, arch.length):
        raise ShapeError(
            f"expected frames of shape [N, {arch.in_channels}, {arch.length}], got {x.shape}"
        )
    if x.shape[0] < 1:
        raise ShapeError("batch is empty")
    return x


def forward(params, x, train=False, arch=None):
    """Run the network.

    Returns ``(logits, cache)``. In the train phase batch-norm uses batch
    statistics, updates the running statistics held in ``params`` and a cache
    for :func:`loss_and_grads` is returned; in eval phase ``cache`` is None and
    ``params`` is not touched.
    """
    arch = arch or Architecture.from_params(params)
    x = _check_batch(x, arch)
    dtype = params["conv1_w"].dtype
    x = x.astype(dtype, copy=False)
    caches = {}

    h, caches["conv1"] = nd.conv1d_forward(x, params["conv1_w"], arch.conv1_stride, 0)
    h, caches["bn1"] = nd.batchnorm1d_forward(h, _bn_state(params, "bn1", arch), train)
    h, caches["relu1"] = nd.relu_forward(h)
    trunk, caches["pool"] = nd.maxpool1d_forward(h, arch.pool_size, arch.pool_stride)

    pad = arch.res_padding
    left, caches["conv2"] = nd.conv1d_forward(trunk, params["conv2_w"], 1, pad)
    left, caches["bn2"] = nd.batchnorm1d_forward(left, _bn_state(params, "bn2", arch), train)
    left, caches["relu2"] = nd.relu_forward(left)
    left, caches["conv3"] = nd.conv1d_forward(left, params["conv3_w"], 1, pad)
    left, caches["bn3"] = nd.batchnorm1d_forward(left, _bn_state(params, "bn3", arch), train)
    left, caches["relu3"] = nd.relu_forward(left)

    right, caches["conv_sc"] = nd.conv1d_forward(trunk, params["conv_sc_w"], 1, 0)
    right, caches["bn_sc"] = nd.batchnorm1d_forward(right, _bn_state(params, "bn_sc", arch), train)

    h, caches["relu_out"] = nd.relu_forward(left + right)
    h, caches["gap"] = nd.global_avg_pool_forward(h)
    logits, caches["fc"] = nd.linear_forward(h, params["fc_w"], params["fc_b"])

    if not train:
        return logits, None
    caches["logits"] = logits
    caches["used"] = False
    return logits, caches


def loss_and_grads(params, cache, logits, labels):
    """Mean cross-entropy loss and gradients for every trainable array.

    ``cache`` must come from a train-phase :func:`forward` that produced
    ``logits``; it can be consumed once.
    """
    if cache is None:
        raise UsageError("loss_and_grads needs the cache of a train-phase forward pass")
    if cache["used"]:
        raise UsageError("forward cache has already been consumed")
    if cache["logits"] is not logits:
        raise UsageError("logits do not belong to this forward cache")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise UsageError(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {logits.shape[0]}")
    cache["used"] = True

    loss, _, dlogits = nd.softmax_xent(logits, labels)
    dlogits = dlogits.astype(logits.dtype, copy=False)
    grads = {}

    dh, grads["fc_w"], grads["fc_b"] = nd.linear_backward(dlogits, cache["fc"])
    dh = nd.global_avg_pool_backward(dh, cache["gap"])
    dsum = nd.relu_backward(dh, cache["relu_out"])

    dr, grads["bn_sc.gamma"], grads["bn_sc.beta"] = nd.batchnorm1d_backward(dsum, cache["bn_sc"])
    dtrunk, grads["conv_sc_w"] = nd.conv1d_backward(dr, cache["conv_sc"])

    dl = nd.relu_backward(dsum, cache["relu3"])
    dl, grads["bn3.gamma"], grads["bn3.beta"] = nd.batchnorm1d_backward(dl, cache["bn3"])
    dl, grads["conv3_w"] = nd.conv1d_backward(dl, cache["conv3"])
    dl = nd.relu_backward(dl, cache["relu2"])
    dl, grads["bn2.gamma"], grads["bn2.beta"] = nd.batchnorm1d_backward(dl, cache["bn2"])
    dl, grads["conv2_w"] = nd.conv1d_backward(dl, cache["conv2"])
    dtrunk = dtrunk + dl

    dh = nd.maxpool1d_backward(dtrunk, cache["pool"])
    dh = nd.relu_backward(dh, cache["relu1"])
    dh, grads["bn1.gamma"], grads["bn1.beta"] = nd.batchnorm1d_backward(dh, cache["bn1"])
    _, grads["conv1_w"] = nd.conv1d_backward(dh, cache["conv1"])

    ordered = {name: grads[name] for name in trainable_names(params)}
    return float(loss), ordered


def predict_proba(params, frames, batch_size=256, arch=None):
    """Class probabilities in eval phase, computed in chunks of ``batch_size``."""
    frames = np.asarray(frames)
    arch = arch or Architecture.from_params(params)
    _check_batch(frames, arch)
    out = []
    for start in range(0, len(frames), batch_size):
        logits, _ = forward(params, frames[start : start + batch_size], train=False, arch=arch)
        out.append(nd.softmax(logits.astype(np.float64)))
    return np.concatenate(out)


def predict(params, frames, batch_size=256, arch=None):
    """Return ``(labels, probs)``; argmax ties go to the lowest class index."""
    probs = predict_proba(params, frames, batch_size, arch)
    return probs.argmax(axis=1), probs


def grad_check_model(seed=0, arch=None, batch=2, h=1e-5):
    """Finite-difference check of :func:`loss_and_grads` on a float64 model.

    Uses the tiny architecture by default, with randomised batch-norm affine
    parameters so no gradient is trivially zero. The step is smaller than the
    kernel default because the composed network has many ReLU/max-pool kinks.
    """
    arch = arch or Architecture.tiny()
    rng = np.random.default_rng(seed)
    params = init_params(seed, arch, np.float64)
    for name in params:
        if name.endswith("gamma"):
            params[name][:] = rng.uniform(0.5, 1.5, params[name].shape)
        elif name.endswith("beta") or name == "fc_b":
            params[name][:] = rng.normal(0.0, 0.5, params[name].shape)
    x = rng.standard_normal((batch, arch.in_channels, arch.length))
    y = rng.integers(0, arch.n_classes, batch)

    logits, cache = forward(params, x, train=True, arch=arch)
    _, grads = loss_and_grads(params, cache, logits, y)
    f = lambda: nd.softmax_xent(forward(params, x, train=True, arch=arch)[0], y)[0]
    return nd.check_gradients(f, grads, {n: params[n] for n in grads}, h)


# --------------------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"VCK1"
CKPT_VERSION = 1


def save_checkpoint(path, params, optimizer_state=None):
    """Write params (and optionally Adam moments) in the VCK1 format.

    ``optimizer_state`` is a dict with keys ``m``, ``v`` (name -> array) and
    ``t`` (int step count).
    """
    tensors = list(params.items())
    if optimizer_state is not None:
        tensors += [(f"adam.m.{k}", v) for k, v in optimizer_state["m"].items()]
        tensors += [(f"adam.v.{k}", v) for k, v in optimizer_state["v"].items()]
        tensors.append(("adam.t", np.array([optimizer_state["t"]], dtype=np.float32)))

    chunks = [CKPT_MAGIC, struct.pack("<HH", CKPT_VERSION, len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Read a VCK1 file. Returns ``(params, optimizer_state_or_None)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_checkpoint(buf)


def parse_checkpoint(buf):
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic, expected b'VCK1'", 0)
    version, count = struct.unpack("<HH", take(4, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)

    params, m, v, t = {}, {}, {}, None
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name_at = pos
        try:
            name = take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8", name_at) from exc
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n, f"data of {name!r}"), dtype="<f4").reshape(dims)
        arr = arr.astype(np.float32)
        if name == "adam.t":
            t = int(arr.reshape(-1)[0])
        elif name.startswith("adam.m."):
            m[name[7:]] = arr
        elif name.startswith("adam.v."):
            v[name[7:]] = arr
        else:
            params[name] = arr
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos)

    opt = None
    if m or v or t is not None:
        opt = {"m": m, "v": v, "t": t or 0}
    return params, opt
