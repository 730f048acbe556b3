"""Small rotation-equivariant polar CNN with manual backpropagation.

Layout of activations is ``(batch, channel, angle, slice, radius)``. Every
convolution wraps around the angle axis, zero-pads the radius axis and runs
"valid" along the slice axis until a single (centre) slice is left. A head
shared by all angles then maps each ray to (radius, width):

``softargmax`` (default)
    two linear maps of the features give per-radius logits for the lumen and
    the outer edge; a softmax along the ray turns each into an expected
    position ``sum_k p_k (k + 1)``. Radius is the lumen position, width is
    softplus(outer - lumen).
``meanpool``
    features averaged over slice and radius, then a linear map to
    (radius, width), both passed through softplus.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .. import kernels
from ..errors import ConfigError, FormatError, ShapeMismatch, UntrainedModel
from ..polar import GRID, ContourPair

WEIGHTS_MAGIC = b"PQW1"
HEADS = ("softargmax", "meanpool")


@dataclass
class PredictorConfig:
    kind: str = "cnn"
    n_layers: int = 8
    channels: int = 8
    kernel: tuple = (3, 5, 3)  # angle, radius, slice
    dropout: float = 0.2
    nonlinearity: str = "relu"
    output: str = "softplus"
    head: str = "softargmax"
    radial_fov: int = 40
    radial_coordinate: bool = True
    init: str = "he_uniform"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.kernel = tuple(int(k) for k in self.kernel)
        if self.kind not in ("cnn", "oracle"):
            raise ConfigError(f"predictor kind must be 'cnn' or 'oracle', got {self.kind!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        if self.n_layers < 1 or self.channels < 1:
            raise ConfigError("need at least one layer and one channel")
        if len(self.kernel) != 3 or any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigError("kernel extents must be three odd positive integers")
        if self.nonlinearity not in ("relu", "identity"):
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.output not in ("softplus", "identity"):
            raise ConfigError(f"unknown output activation {self.output!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.init not in ("he_uniform", "fan_in_uniform"):
            raise ConfigError(f"unknown init {self.init!r}")
        if not 1 <= self.radial_fov <= GRID.n_radii:
            raise ConfigError(f"radial_fov must lie in [1, {GRID.n_radii}]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown predictor key: {unknown[0]}")
        return cls(**obj)

    def to_dict(self):
        d = asdict(self)
        d["kernel"] = list(self.kernel)
        return d

    @property
    def in_channels(self):
        return 2 if self.radial_coordinate else 1

    def layer_shapes(self):
        """Weight shapes ``(out, in, ka, ks, kr)`` for each convolution."""
        ka, kr, ks_full = self.kernel
        shapes = []
        n_sl, c_in = GRID.n_slices, self.in_channels
        for _ in range(self.n_layers):
            ks = ks_full if n_sl >= ks_full and n_sl > 1 else 1
            shapes.append((self.channels, c_in, ka, ks, kr))
            n_sl = n_sl - ks + 1
            c_in = self.channels
        return shapes


def softplus(z):
    return np.logaddexp(0.0, z)


def softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def init_params(cfg: PredictorConfig, seed=None):
    """Conv weights/biases followed by the head weight ``(2, C)`` and bias ``(2,)``."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = np.dtype(cfg.dtype)
    params = []
    for shape in cfg.layer_shapes():
        fan_in = int(np.prod(shape[1:]))
        if cfg.init == "he_uniform":
            bound = np.sqrt(6.0 / fan_in)
            bias = np.zeros(shape[0])
        else:
            bound = 1.0 / np.sqrt(fan_in)
            bias = rng.uniform(-bound, bound, shape[0])
        w = rng.uniform(-bound, bound, shape)
        params += [w.astype(dt), bias.astype(dt)]
    bound = 1.0 / np.sqrt(cfg.channels)
    params.append(rng.uniform(-bound, bound, (2, cfg.channels)).astype(dt))
    params.append(np.zeros(2, dtype=dt))
    return params


def patches_to_input(samples, cfg: PredictorConfig):
    """``(B, 31, 127, 7)`` polar samples -> network input ``(B, C, 31, 7, fov)``."""
    s = np.asarray(samples)
    if s.ndim == 3:
        s = s[None]
    if s.shape[1:] != GRID.shape:
        raise ShapeMismatch(f"expected patches of shape {GRID.shape}, got {s.shape[1:]}")
    dt = np.dtype(cfg.dtype)
    fov = cfg.radial_fov
    x = np.empty((s.shape[0], cfg.in_channels, GRID.n_angles, GRID.n_slices, fov), dtype=dt)
    x[:, 0] = s[:, :, :fov, :].transpose(0, 1, 3, 2)
    if cfg.radial_coordinate:
        x[:, 1] = (np.arange(1, fov + 1, dtype=np.float64) / fov).astype(dt)
    return x


def dropout_masks(shape, p, rng, dtype):
    keep = rng.random(shape) < (1.0 - p)
    return (keep / (1.0 - p)).astype(dtype)


class PolarCNN:
    """Parameters plus forward/backward passes. Inference goes through :class:`CNNPredictor`."""

    def __init__(self, cfg: PredictorConfig, params=None):
        self.cfg = cfg
        self.params = params
        if params is not None:
            self._check_params(params)

    def _check_params(self, params):
        expected = []
        for shape in self.cfg.layer_shapes():
            expected += [shape, (shape[0],)]
        expected += [(2, self.cfg.channels), (2,)]
        got = [tuple(p.shape) for p in params]
        if got != expected:
            raise ShapeMismatch(f"parameter shapes {got} do not match config {expected}")

    @property
    def n_conv(self):
        return self.cfg.n_layers

    def _act(self, z):
        return np.maximum(z, 0) if self.cfg.nonlinearity == "relu" else z

    def forward(self, x, mask_source=None, keep_cache=False):
        """Run the network on ``x`` of shape ``(B, C, A, S, R)``.

        ``mask_source`` is ``None`` (no dropout), a ``Generator`` (one stream
        for the whole batch) or a list of generators, one per sample.
        Returns ``(B, A, 2)`` outputs and, if requested, the backward cache.
        """
        if self.params is None:
            raise UntrainedModel("network has no weights")
        cfg = self.cfg
        p = cfg.dropout
        pad_a, pad_r = cfg.kernel[0] // 2, cfg.kernel[1] // 2
        cache = {"xp": [], "z": [], "mask": []}
        h = x
        for layer in range(self.n_conv):
            w, b = self.params[2 * layer], self.params[2 * layer + 1]
            xp = kernels.pad_activation(h, pad_a, pad_r)
            z = kernels.conv_forward(xp, w, b)
            h = self._act(z)
            mask = None
            if mask_source is not None and p > 0 and layer < self.n_conv - 1:
                if isinstance(mask_source, np.random.Generator):
                    mask = dropout_masks(h.shape, p, mask_source, h.dtype)
                else:
                    mask = np.stack([dropout_masks(h.shape[1:], p, g, h.dtype) for g in mask_source])
                h = h * mask
            if keep_cache:
                cache["xp"].append(xp)
                cache["z"].append(z)
                cache["mask"].append(mask)
        if cfg.head == "meanpool":
            out, head_cache = self._meanpool_head(h)
        else:
            out, head_cache = self._softargmax_head(h)
        if keep_cache:
            cache.update(head_cache, h_shape=h.shape)
            return out, cache
        return out

    def _meanpool_head(self, h):
        pooled = h.mean(axis=(3, 4))  # (B, C, A)
        wh, bh = self.params[-2], self.params[-1]
        zo = np.einsum("oc,bca->bao", wh, pooled) + bh
        out = softplus(zo) if self.cfg.output == "softplus" else zo
        return out, {"pooled": pooled, "zo": zo}

    def _softargmax_head(self, h):
        feat = h.mean(axis=3)  # (B, C, A, R); a single slice is left after the valid convolutions
        wh, bh = self.params[-2], self.params[-1]
        logits = np.einsum("oc,bcar->baor", wh, feat) + bh[None, None, :, None]
        prob = softmax(logits, axis=-1)
        pos = np.arange(1, feat.shape[-1] + 1, dtype=feat.dtype)
        e = prob @ pos  # (B, A, 2) expected lumen and outer positions
        gap = e[..., 1] - e[..., 0]
        width = softplus(gap) if self.cfg.output == "softplus" else gap
        out = np.stack([e[..., 0], width], axis=-1)
        return out, {"feat": feat, "prob": prob, "pos": pos, "e": e, "gap": gap}

    def backward(self, cache, gout):
        """Gradients of a scalar loss w.r.t. all parameters, given ``dL/d out``."""
        cfg = self.cfg
        pad_a, pad_r = cfg.kernel[0] // 2, cfg.kernel[1] // 2
        grads = [None] * len(self.params)
        wh = self.params[-2]
        nb, nc, na, ns, nr = cache["h_shape"]
        if cfg.head == "meanpool":
            gz = gout * sigmoid(cache["zo"]) if cfg.output == "softplus" else gout
            grads[-2] = np.einsum("bao,bca->oc", gz, cache["pooled"]).astype(wh.dtype)
            grads[-1] = gz.sum(axis=(0, 1)).astype(wh.dtype)
            gpool = np.einsum("bao,oc->bca", gz, wh)
            gh = np.broadcast_to((gpool / (ns * nr))[:, :, :, None, None], cache["h_shape"]).astype(wh.dtype)
        else:
            gwidth = gout[..., 1] * sigmoid(cache["gap"]) if cfg.output == "softplus" else gout[..., 1]
            ge = np.stack([gout[..., 0] - gwidth, gwidth], axis=-1)  # (B, A, 2)
            prob, pos, e = cache["prob"], cache["pos"], cache["e"]
            # d E / d logit_k = p_k (x_k - E)
            glog = ge[..., None] * prob * (pos - e[..., None])  # (B, A, 2, R)
            grads[-2] = np.einsum("baor,bcar->oc", glog, cache["feat"]).astype(wh.dtype)
            grads[-1] = glog.sum(axis=(0, 1, 3)).astype(wh.dtype)
            gfeat = np.einsum("baor,oc->bcar", glog, wh) / ns
            gh = np.broadcast_to(gfeat[:, :, :, None, :], cache["h_shape"]).astype(wh.dtype)
        for layer in range(self.n_conv - 1, -1, -1):
            w = self.params[2 * layer]
            mask = cache["mask"][layer]
            if mask is not None:
                gh = gh * mask
            z = cache["z"][layer]
            gz_l = gh * (z > 0) if cfg.nonlinearity == "relu" else gh
            gz_l = np.ascontiguousarray(gz_l, dtype=w.dtype)
            xp = cache["xp"][layer]
            grads[2 * layer] = kernels.conv_grad_weight(xp, gz_l, w.shape[2:])
            grads[2 * layer + 1] = gz_l.sum(axis=(0, 2, 3, 4))
            if layer:
                gxp = kernels.conv_grad_input(gz_l, w, xp.shape)
                gh = kernels.fold_padded_grad(gxp, na, pad_a, pad_r)
        return grads


class CNNPredictor:
    kind = "cnn"
    supports_dropout = True

    def __init__(self, cfg: PredictorConfig, params=None):
        self.cfg = cfg
        self.net = PolarCNN(cfg, params)

    @property
    def trained(self):
        return self.net.params is not None

    def _run(self, samples, seeds):
        if not self.trained:
            raise UntrainedModel("CNN predictor has no weights; train or load them first")
        x = patches_to_input(samples, self.cfg)
        source = None
        if seeds is not None:
            source = [np.random.default_rng(int(s)) for s in seeds]
        return np.asarray(self.net.forward(x, source), dtype=np.float64)

    def predict(self, patch, seed=None) -> ContourPair:
        """Deterministic prediction, or a Monte Carlo dropout sample when ``seed`` is given."""
        out = self._run(patch.samples[None], None if seed is None else [seed])[0]
        return ContourPair(patch.center, out[:, 0], out[:, 1])

    def predict_batch(self, patches, seeds=None):
        if not patches:
            return []
        if seeds is not None and len(seeds) != len(patches):
            raise ValueError("need one seed per patch")
        out = self._run(np.stack([p.samples for p in patches]), seeds)
        return [ContourPair(p.center, o[:, 0], o[:, 1]) for p, o in zip(patches, out)]

    def predict_dropout(self, patch, seeds):
        """One dropout sample per seed on the same patch (batched)."""
        out = self._run(np.repeat(patch.samples[None], len(seeds), axis=0), list(seeds))
        return [ContourPair(patch.center, o[:, 0], o[:, 1]) for o in out]


def predict(patch, model, mode="deterministic", seed=None) -> ContourPair:
    """Predict a ContourPair with ``model`` in ``deterministic`` or ``dropout`` mode."""
    if patch.samples.shape != GRID.shape:
        raise ShapeMismatch(f"expected patch shape {GRID.shape}, got {patch.samples.shape}")
    if mode == "deterministic":
        return model.predict(patch)
    if mode == "dropout":
        if seed is None:
            raise ValueError("dropout mode needs a seed")
        return model.predict(patch, seed=seed)
    raise ValueError(f"unknown prediction mode {mode!r}")


def write_weights(params, path):
    chunks = [WEIGHTS_MAGIC, struct.pack("<I", len(params))]
    for p in params:
        arr = np.asarray(p, dtype="<f4")
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_weights(path, dtype="float32"):
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    try:
        (count,), pos = struct.unpack_from("<I", raw, 4), 8
        params = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 4 * n > len(raw):
                raise FormatError(f"{path}: truncated tensor payload")
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape)
            params.append(arr.astype(dtype))
            pos += 4 * n
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return params
