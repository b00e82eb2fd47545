"""Layer forward/backward implementations.

Conventions: map-shaped activations are (batch, time, freq, chan); vector
activations are (batch, time, dim). All layers preserve the batch and time
axes; temporal context (convolution taps, time-delay offsets) uses edge
replication so T never shrinks. Backward passes are exact, including the
fold-back of gradients through the replicated edges, so finite-difference
checks hold to float precision.
"""

import numpy as np

from ..errors import DegenerateInputError, InvalidArgumentError

LENGTHNORM_EPS = 1e-12


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def _pad_time_replicate(x, left, right):
    parts = []
    if left:
        parts.append(np.repeat(x[:, :1], left, axis=1))
    parts.append(x)
    if right:
        parts.append(np.repeat(x[:, -1:], right, axis=1))
    return np.concatenate(parts, axis=1) if len(parts) > 1 else x


def _fold_time_padding(dxp, left, right):
    """Collapse gradient of a replicate-padded tensor back onto the source."""
    t = dxp.shape[1] - left - right
    dx = dxp[:, left : left + t].copy()
    if left:
        dx[:, 0] += dxp[:, :left].sum(axis=1)
    if right:
        dx[:, -1] += dxp[:, left + t :].sum(axis=1)
    return dx


class Layer:
    """Base: subclasses define hyperparams, params, shapes, forward/backward."""

    kind = None
    has_params = False

    def __init__(self, hyper, name):
        self.hyper = dict(hyper)
        self.name = name
        self.params = {}

    def build(self, in_shape, rng, dtype):
        """Validate/record shapes and initialize parameters. Returns out_shape."""
        raise NotImplementedError

    def time_span(self):
        return (0, 0)

    def forward(self, x, cache):
        raise NotImplementedError

    def backward(self, dy, cache):
        """Returns (dx, grads dict aligned with self.params)."""
        raise NotImplementedError

    def astype(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}

    def _bad(self, msg):
        return InvalidArgumentError(f"layer {self.name} ({self.kind}): {msg}")


class Affine(Layer):
    """y = x W + b on the last axis; map inputs are flattened to (B,T,F*C)."""

    kind = "affine"
    has_params = True

    def build(self, in_shape, rng, dtype):
        if in_shape[0] == "map":
            d_in = in_shape[1] * in_shape[2]
        else:
            d_in = in_shape[1]
        d_out = self.hyper["dim"]
        if d_out < 1:
            raise self._bad("output dim must be >= 1")
        self.d_in = d_in
        self.params = {
            "W": _glorot(rng, d_in, d_out, (d_in, d_out)).astype(dtype),
            "b": np.zeros(d_out, dtype=dtype),
        }
        return ("vec", d_out)

    def forward(self, x, cache):
        cache["in_shape"] = x.shape
        if x.ndim == 4:
            x = x.reshape(x.shape[0], x.shape[1], -1)
        if x.shape[-1] != self.d_in:
            raise self._bad(f"expected input dim {self.d_in}, got {x.shape[-1]}")
        cache["x"] = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy, cache):
        x = cache["x"]
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        grads = {"W": x2.T @ dy2, "b": dy2.sum(axis=0)}
        return (dy @ self.params["W"].T).reshape(cache["in_shape"]), grads


class Conv2D(Layer):
    """2-D convolution along (time, freq): time is replicate-padded to keep T.

    ``t_lo`` gives the first time-tap offset, so output frame t reads input
    frames t+t_lo .. t+t_lo+kt-1. The frequency axis is valid (no padding)
    with an optional stride.
    """

    kind = "conv2d"
    has_params = True

    def build(self, in_shape, rng, dtype):
        if in_shape[0] != "map":
            raise self._bad("conv2d needs a (freq, chan) map input")
        kt, kf = self.hyper["kernel_t"], self.hyper["kernel_f"]
        c_out = self.hyper["channels"]
        t_lo = self.hyper.get("t_lo", -((kt - 1) // 2))
        sf = self.hyper.get("stride_f", 1)
        if kt < 1 or kf < 1 or c_out < 1 or sf < 1:
            raise self._bad("kernel sizes, channels, and stride must be >= 1")
        if not -(kt - 1) <= t_lo <= 0:
            raise self._bad(f"time taps {t_lo}..{t_lo + kt - 1} must cover offset 0")
        f_in, c_in = in_shape[1], in_shape[2]
        if kf > f_in:
            raise self._bad(f"freq kernel {kf} exceeds input freq {f_in}")
        self.kt, self.kf, self.c_in, self.c_out, self.t_lo = kt, kf, c_in, c_out, t_lo
        self.sf = sf
        self.f_in = f_in
        self.f_out = (f_in - kf) // sf + 1
        self.pad = (-t_lo, kt - 1 + t_lo)
        fan = kt * kf
        self.params = {
            "W": _glorot(rng, fan * c_in, fan * c_out, (kt * kf * c_in, c_out)).astype(dtype),
            "b": np.zeros(c_out, dtype=dtype),
        }
        return ("map", self.f_out, c_out)

    def time_span(self):
        return (self.t_lo, self.t_lo + self.kt - 1)

    def _patches(self, xp, t_out):
        b = xp.shape[0]
        sb, st, sf, sc = xp.strides
        view = np.lib.stride_tricks.as_strided(
            xp,
            shape=(b, t_out, self.f_out, self.kt, self.kf, self.c_in),
            strides=(sb, st, self.sf * sf, st, sf, sc),
            writeable=False,
        )
        return np.ascontiguousarray(view).reshape(b, t_out, self.f_out, -1)

    def forward(self, x, cache):
        if x.ndim != 4 or x.shape[2] != self.f_in or x.shape[3] != self.c_in:
            raise self._bad(f"expected (B,T,{self.f_in},{self.c_in}), got {x.shape}")
        xp = np.ascontiguousarray(_pad_time_replicate(x, *self.pad))
        patches = self._patches(xp, x.shape[1])
        cache["patches"] = patches
        cache["t"] = x.shape[1]
        return patches @ self.params["W"] + self.params["b"]

    def backward(self, dy, cache):
        patches, t = cache["patches"], cache["t"]
        b = dy.shape[0]
        p2 = patches.reshape(-1, patches.shape[-1])
        dy2 = dy.reshape(-1, self.c_out)
        grads = {"W": p2.T @ dy2, "b": dy2.sum(axis=0)}
        dpatch = (dy2 @ self.params["W"].T).reshape(
            b, t, self.f_out, self.kt, self.kf, self.c_in
        )
        dxp = np.zeros((b, t + self.kt - 1, self.f_in, self.c_in), dtype=dy.dtype)
        span = self.sf * self.f_out
        for i in range(self.kt):
            for j in range(self.kf):
                dxp[:, i : i + t, j : j + span : self.sf] += dpatch[:, :, :, i, j]
        return _fold_time_padding(dxp, *self.pad), grads


class MaxPool(Layer):
    """Max pooling over (time, freq) windows; trailing remainder is dropped."""

    kind = "maxpool"

    def build(self, in_shape, rng, dtype):
        if in_shape[0] != "map":
            raise self._bad("maxpool needs a (freq, chan) map input")
        self.wt = self.hyper.get("window_t", 1)
        self.wf = self.hyper.get("window_f", 2)
        self.st = self.hyper.get("stride_t", self.wt)
        self.sf = self.hyper.get("stride_f", self.wf)
        if min(self.wt, self.wf, self.st, self.sf) < 1:
            raise self._bad("window and stride must be >= 1")
        f_in = in_shape[1]
        if self.wf > f_in:
            raise self._bad(f"freq window {self.wf} exceeds input freq {f_in}")
        self.f_out = (f_in - self.wf) // self.sf + 1
        self.f_in, self.c = f_in, in_shape[2]
        return ("map", self.f_out, self.c)

    def time_span(self):
        return (0, self.wt - 1)

    def _freq_only(self):
        return self.wt == 1 and self.st == 1 and self.wf == self.sf

    def forward(self, x, cache):
        b, t = x.shape[:2]
        t_out = (t - self.wt) // self.st + 1
        if t_out < 1:
            raise self._bad(f"input has {t} frames, window needs {self.wt}")
        cache["in_shape"] = x.shape
        cache["t_out"] = t_out
        if self._freq_only():
            # fast path: non-overlapping frequency windows via reshape
            xr = x[:, :, : self.f_out * self.wf].reshape(
                b, t, self.f_out, self.wf, x.shape[3]
            )
            arg = xr.argmax(axis=3)
            cache["arg"] = arg
            return np.take_along_axis(xr, arg[:, :, :, None], axis=3)[:, :, :, 0]
        best = None
        arg = None
        for i in range(self.wt):
            for j in range(self.wf):
                cand = x[:, i : i + self.st * t_out : self.st,
                         j : j + self.sf * self.f_out : self.sf]
                code = i * self.wf + j
                if best is None:
                    best = cand.copy()
                    arg = np.zeros(best.shape, dtype=np.int8)
                else:
                    mask = cand > best
                    best = np.where(mask, cand, best)
                    arg = np.where(mask, np.int8(code), arg)
        cache["arg"] = arg
        return best

    def backward(self, dy, cache):
        arg, in_shape, t_out = cache["arg"], cache["in_shape"], cache["t_out"]
        dx = np.zeros(in_shape, dtype=dy.dtype)
        if self._freq_only():
            b, t = in_shape[:2]
            dxr = np.zeros((b, t, self.f_out, self.wf, in_shape[3]), dtype=dy.dtype)
            np.put_along_axis(dxr, arg[:, :, :, None], dy[:, :, :, None], axis=3)
            dx[:, :, : self.f_out * self.wf] = dxr.reshape(
                b, t, self.f_out * self.wf, in_shape[3]
            )
            return dx, {}
        for i in range(self.wt):
            for j in range(self.wf):
                mask = arg == (i * self.wf + j)
                target = dx[:, i : i + self.st * t_out : self.st,
                            j : j + self.sf * self.f_out : self.sf]
                target += np.where(mask, dy, 0.0)
        return dx, {}


class TimeDelay(Layer):
    """Concat frames at t+offset for each offset (edge replication), then affine."""

    kind = "timedelay"
    has_params = True

    def build(self, in_shape, rng, dtype):
        if in_shape[0] != "vec":
            raise self._bad("timedelay needs a vector input")
        offsets = sorted(self.hyper["offsets"])
        if not offsets:
            raise self._bad("offsets must be non-empty")
        d_in = in_shape[1]
        d_out = self.hyper["dim"]
        self.offsets = offsets
        self.d_in = d_in
        self.d_cat = d_in * len(offsets)
        self.params = {
            "W": _glorot(rng, self.d_cat, d_out, (self.d_cat, d_out)).astype(dtype),
            "b": np.zeros(d_out, dtype=dtype),
        }
        return ("vec", d_out)

    def time_span(self):
        return (self.offsets[0], self.offsets[-1])

    def forward(self, x, cache):
        if x.shape[-1] != self.d_in:
            raise self._bad(f"expected input dim {self.d_in}, got {x.shape[-1]}")
        t = x.shape[1]
        idx = np.arange(t)
        gathered = np.concatenate(
            [x[:, np.clip(idx + o, 0, t - 1)] for o in self.offsets], axis=2
        )
        cache["g"] = gathered
        cache["t"] = t
        return gathered @ self.params["W"] + self.params["b"]

    def backward(self, dy, cache):
        g, t = cache["g"], cache["t"]
        g2 = g.reshape(-1, self.d_cat)
        dy2 = dy.reshape(-1, dy.shape[-1])
        grads = {"W": g2.T @ dy2, "b": dy2.sum(axis=0)}
        dg = dy @ self.params["W"].T
        left = max(0, -self.offsets[0])
        right = max(0, self.offsets[-1])
        ext = np.zeros((dy.shape[0], t + left + right, self.d_in), dtype=dy.dtype)
        for k, o in enumerate(self.offsets):
            ext[:, o + left : o + left + t] += dg[:, :, k * self.d_in : (k + 1) * self.d_in]
        return _fold_time_padding(ext, left, right), grads


class PNorm(Layer):
    """y_j = (sum over group |x_i|^p)^(1/p); dim must divide by the group size."""

    kind = "pnorm"

    def build(self, in_shape, rng, dtype):
        if in_shape[0] != "vec":
            raise self._bad("pnorm needs a vector input")
        self.group = self.hyper.get("group", 2)
        self.p = float(self.hyper.get("p", 2.0))
        if self.p < 1:
            raise self._bad("p must be >= 1")
        d_in = in_shape[1]
        if d_in % self.group != 0:
            raise self._bad(f"input dim {d_in} not divisible by group size {self.group}")
        self.d_in = d_in
        self.d_out = d_in // self.group
        return ("vec", self.d_out)

    def forward(self, x, cache):
        if x.shape[-1] != self.d_in:
            raise self._bad(f"expected input dim {self.d_in}, got {x.shape[-1]}")
        xg = x.reshape(*x.shape[:-1], self.d_out, self.group)
        if self.p == 2.0:
            y = np.sqrt((xg * xg).sum(axis=-1))
        else:
            y = (np.abs(xg) ** self.p).sum(axis=-1) ** (1.0 / self.p)
        cache["xg"] = xg
        cache["y"] = y
        return y

    def backward(self, dy, cache):
        xg, y = cache["xg"], cache["y"]
        safe = np.where(y > 0, y, 1.0)
        if self.p == 2.0:
            dxg = (dy / safe)[..., None] * xg
        else:
            dxg = (dy / safe ** (self.p - 1.0))[..., None] * (
                np.sign(xg) * np.abs(xg) ** (self.p - 1.0)
            )
        dxg = np.where(y[..., None] > 0, dxg, 0.0)
        return dxg.reshape(*dy.shape[:-1], self.d_in), {}


class LengthNorm(Layer):
    """Scale each frame vector to unit L2 norm; exact Jacobian backward."""

    kind = "lengthnorm"

    def build(self, in_shape, rng, dtype):
        if in_shape[0] != "vec":
            raise self._bad("lengthnorm needs a vector input")
        self.d = in_shape[1]
        return in_shape

    def forward(self, x, cache):
        norms = np.linalg.norm(x, axis=-1, keepdims=True)
        if np.any(norms <= LENGTHNORM_EPS):
            raise DegenerateInputError(
                f"layer {self.name}: input vector norm below {LENGTHNORM_EPS}"
            )
        y = x / norms
        cache["y"] = y
        cache["norms"] = norms
        return y

    def backward(self, dy, cache):
        y, norms = cache["y"], cache["norms"]
        return (dy - y * (y * dy).sum(axis=-1, keepdims=True)) / norms, {}


class SoftmaxXent(Layer):
    """Marker head layer: forward is identity on logits, loss applied outside."""

    kind = "softmax-xent"

    def build(self, in_shape, rng, dtype):
        if in_shape[0] != "vec":
            raise self._bad("softmax head needs a vector input")
        return in_shape

    def forward(self, x, cache):
        return x

    def backward(self, dy, cache):
        return dy, {}


LAYER_CLASSES = {
    cls.kind: cls
    for cls in (Affine, Conv2D, MaxPool, TimeDelay, PNorm, LengthNorm, SoftmaxXent)
}
