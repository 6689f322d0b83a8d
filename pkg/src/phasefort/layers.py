"""Network layers: the phase-equivariant set plus ordinary real layers.

The certified set {conv_nobias, delta, complex_norm, mag_maxpool, avgpool,
complex_dropout, skip} commutes with global phase rotation:
layer(exp(i*t) f) == exp(i*t) layer(f). Only these kinds may appear in the
server-side processing stack; `certify_equivariance` audits the property
numerically and `Skip` enforces it structurally for nested blocks.

Real layers (real_conv, real_relu, real_bn, real_fc, softmax) are permitted
only in the client-side encryption and decryption stacks. RealReLU accepts a
complex input (applied per plane) purely so the audit can demonstrate a
failing layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .autodiff import ComplexVar, Parameter, Var
from .rng import Rng

CERTIFIED_KINDS = frozenset({
    "conv_nobias", "delta", "complex_norm", "mag_maxpool", "avgpool",
    "complex_dropout", "skip",
})

# guard under the magnitude square root; keeps the gradient defined at exact
# zeros (e.g. dropout output) without perturbing finite-difference checks
_MAG_GUARD = 1e-24


@dataclass
class Context:
    """Per-forward flags: training mode, mask RNG, debug finiteness sweep."""

    train: bool = False
    rng: Rng | None = None
    debug_finite: bool = False


EVAL = Context()


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return self.kind in CERTIFIED_KINDS


class Layer:
    kind = "layer"

    def params(self) -> list[Parameter]:
        return []

    def named_params(self) -> list[tuple[str, Parameter]]:
        """(local name, parameter) pairs; composites prefix their members."""
        return [(p.name, p) for p in self.params()]

    def state(self) -> dict[str, np.ndarray]:
        """Non-trainable buffers (running statistics)."""
        return {}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        pass

    @property
    def certified(self) -> bool:
        return self.kind in CERTIFIED_KINDS

    def spec(self) -> LayerSpec:
        return LayerSpec(self.kind)

    def __call__(self, x, ctx: Context = EVAL):
        raise NotImplementedError


def forward_layers(layers: list[Layer], x, ctx: Context = EVAL):
    for layer in layers:
        x = layer(x, ctx)
        if ctx.debug_finite:
            _check_finite(x, layer.kind)
    return x


def _check_finite(x, where: str):
    planes = (x.re.data, x.im.data) if isinstance(x, ComplexVar) else (x.data,)
    for p in planes:
        if not np.all(np.isfinite(p)):
            raise T.NonFiniteError(f"non-finite activation after {where}")


def _kaiming(rng: Rng, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.gaussian(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# certified complex layers
# ---------------------------------------------------------------------------

class ConvNoBias(Layer):
    """Convolution with a real kernel and no bias term; linear, hence
    phase-equivariant. A kernel spanning the full spatial extent doubles as a
    bias-free fully-connected layer inside the processing stack."""

    kind = "conv_nobias"

    def __init__(self, in_ch: int, out_ch: int, ksize: int, stride: int = 1,
                 padding: int = 0, rng: Rng | None = None, dtype=T.DEFAULT_DTYPE):
        self.stride, self.padding = stride, padding
        fan_in = in_ch * ksize * ksize
        w = _kaiming(rng, (out_ch, in_ch, ksize, ksize), fan_in, dtype) if rng is not None \
            else np.zeros((out_ch, in_ch, ksize, ksize), dtype=dtype)
        self.w = Parameter(w, "w")

    def params(self):
        return [self.w]

    def spec(self):
        f, c, k, _ = self.w.data.shape
        return LayerSpec(self.kind, {"in": c, "out": f, "ksize": k,
                                     "stride": self.stride, "padding": self.padding})

    def __call__(self, x, ctx: Context = EVAL):
        if isinstance(x, ComplexVar):
            return ComplexVar(ad.conv2d(x.re, self.w, self.stride, self.padding),
                              ad.conv2d(x.im, self.w, self.stride, self.padding))
        return ad.conv2d(x, self.w, self.stride, self.padding)


class Delta(Layer):
    """Magnitude-gated nonlinearity replacing ReLU:

        out = f * |f| / max(|f|, c)

    Elements with |f| >= c pass unchanged; smaller ones are damped by |f|/c.
    The phase of every element is untouched. `c` is either a fixed positive
    scalar or a per-channel batch statistic (mean magnitude over batch and
    space) with an exponential running average used at inference.
    """

    kind = "delta"

    def __init__(self, mode: str = "fixed", c: float = 1.0, channels: int | None = None,
                 decay: float = 0.9, dtype=T.DEFAULT_DTYPE):
        if mode not in ("fixed", "channelwise"):
            raise ValueError(f"unknown delta mode {mode!r}")
        if mode == "fixed" and c <= 0:
            raise ValueError("delta constant c must be positive")
        if mode == "channelwise" and channels is None:
            raise ValueError("channelwise delta needs a channel count")
        self.mode, self.c, self.decay = mode, float(c), decay
        self.running_c = np.ones((1, channels, 1, 1), dtype=dtype) if mode == "channelwise" else None

    def state(self):
        return {} if self.running_c is None else {"running_c": self.running_c}

    def load_state(self, state):
        if self.running_c is not None:
            self.running_c[...] = state["running_c"]

    def spec(self):
        return LayerSpec(self.kind, {"mode": self.mode, "c": self.c})

    def __call__(self, f: ComplexVar, ctx: Context = EVAL) -> ComplexVar:
        mag = f.magnitude(guard=_MAG_GUARD)
        if self.mode == "fixed":
            cval = self.c
        elif ctx.train:
            cval = mag.mean(axis=(0, 2, 3), keepdims=True)
            self.running_c *= self.decay
            self.running_c += (1.0 - self.decay) * cval.data.astype(self.running_c.dtype)
        else:
            cval = self.running_c
        scale = mag / ad.maximum(mag, cval)
        return ComplexVar(f.re * scale, f.im * scale)


class ComplexNorm(Layer):
    """Per-channel normalization by the root mean squared magnitude over the
    batch and spatial dims; after it the mean squared magnitude is 1."""

    kind = "complex_norm"

    def __init__(self, channels: int, eps: float = 1e-8, decay: float = 0.9,
                 dtype=T.DEFAULT_DTYPE):
        self.eps, self.decay = eps, decay
        self.running_ms = np.ones((1, channels, 1, 1), dtype=dtype)

    def state(self):
        return {"running_ms": self.running_ms}

    def load_state(self, state):
        self.running_ms[...] = state["running_ms"]

    def spec(self):
        return LayerSpec(self.kind, {"channels": self.running_ms.shape[1]})

    def __call__(self, f: ComplexVar, ctx: Context = EVAL) -> ComplexVar:
        if ctx.train:
            ms = f.magnitude_sq().mean(axis=(0, 2, 3), keepdims=True)
            self.running_ms *= self.decay
            self.running_ms += (1.0 - self.decay) * ms.data.astype(self.running_ms.dtype)
        else:
            ms = ad.as_var(self.running_ms)
        denom = ad.sqrt(ms + self.eps)
        return ComplexVar(f.re / denom, f.im / denom)


class MagnitudeMaxPool(Layer):
    """Max pooling that copies the complex element of largest magnitude in
    each window verbatim (both planes), preserving its phase. Ties select the
    lowest row-major index; the gradient follows the selected branch.

    On a real input it selects by absolute value, which coincides with
    ordinary max pooling whenever the input is non-negative (post-ReLU), so
    the real baselines reuse it."""

    kind = "mag_maxpool"

    def __init__(self, window: int, stride: int | None = None):
        self.window = window
        self.stride = window if stride is None else stride

    def spec(self):
        return LayerSpec(self.kind, {"window": self.window, "stride": self.stride})

    def _onehot(self, mag: np.ndarray, dtype) -> np.ndarray:
        win = T.pool_windows(mag, self.window, self.stride)
        sel = win.argmax(axis=-1)
        return (np.arange(win.shape[-1]) == sel[..., None]).astype(dtype)

    def __call__(self, f, ctx: Context = EVAL):
        if isinstance(f, ComplexVar):
            mag = np.sqrt(f.re.data ** 2 + f.im.data ** 2)
            onehot = self._onehot(mag, f.re.data.dtype)
            return ComplexVar(ad.pool_select(f.re, onehot, self.window, self.stride),
                              ad.pool_select(f.im, onehot, self.window, self.stride))
        onehot = self._onehot(np.abs(f.data), f.data.dtype)
        return ad.pool_select(f, onehot, self.window, self.stride)


class AvgPool(Layer):
    kind = "avgpool"

    def __init__(self, window: int, stride: int | None = None):
        self.window = window
        self.stride = window if stride is None else stride

    def spec(self):
        return LayerSpec(self.kind, {"window": self.window, "stride": self.stride})

    def __call__(self, f, ctx: Context = EVAL):
        w2 = self.window * self.window
        weights = np.full((1, 1, 1, 1, w2), 1.0 / w2)

        def pool(plane):
            return ad.pool_select(plane, weights.astype(plane.data.dtype),
                                  self.window, self.stride)

        if isinstance(f, ComplexVar):
            return ComplexVar(pool(f.re), pool(f.im))
        return pool(f)


class ComplexDropout(Layer):
    """Inverted dropout at the granularity of whole complex values: one
    Bernoulli(1-p) mask zeroes or keeps both planes together, survivors are
    scaled by 1/(1-p). Identity in eval mode."""

    kind = "complex_dropout"

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def spec(self):
        return LayerSpec(self.kind, {"p": self.p})

    def __call__(self, f: ComplexVar, ctx: Context = EVAL) -> ComplexVar:
        if not ctx.train or self.p == 0.0:
            return f
        if ctx.rng is None:
            raise ValueError("dropout in training mode needs a Context rng")
        keep = (~ctx.rng.bernoulli(self.p, f.shape)).astype(f.re.data.dtype)
        mask = keep / (1.0 - self.p)
        return ComplexVar(f.re * mask, f.im * mask)


class Skip(Layer):
    """Residual connection out = proj(f) + inner(f). The inner stack (and
    projection, if any) must itself be certified-equivariant; construction
    rejects anything else so an uncertified kind can never hide in a block."""

    kind = "skip"

    def __init__(self, inner: list[Layer], proj: ConvNoBias | None = None):
        for layer in inner + ([proj] if proj is not None else []):
            if not layer.certified:
                raise ValueError(f"skip block requires certified layers, got {layer.kind!r}")
        self.inner = inner
        self.proj = proj

    def params(self):
        return [p for _, p in self.named_params()]

    def named_params(self):
        out = [(f"inner.{i}.{n}", p) for i, layer in enumerate(self.inner)
               for n, p in layer.named_params()]
        if self.proj is not None:
            out += [(f"proj.{n}", p) for n, p in self.proj.named_params()]
        return out

    def state(self):
        out = {}
        for i, layer in enumerate(self.inner):
            for k, v in layer.state().items():
                out[f"inner.{i}.{k}"] = v
        return out

    def load_state(self, state):
        for i, layer in enumerate(self.inner):
            sub = {k.split(".", 2)[2]: v for k, v in state.items()
                   if k.startswith(f"inner.{i}.")}
            layer.load_state(sub)

    def spec(self):
        return LayerSpec(self.kind, {"inner": [l.spec() for l in self.inner],
                                     "proj": self.proj.spec() if self.proj else None})

    def __call__(self, f: ComplexVar, ctx: Context = EVAL) -> ComplexVar:
        base = self.proj(f, ctx) if self.proj is not None else f
        return base + forward_layers(self.inner, f, ctx)


# ---------------------------------------------------------------------------
# real layers (encryption / decryption stacks only)
# ---------------------------------------------------------------------------

class RealConv(Layer):
    kind = "real_conv"

    def __init__(self, in_ch: int, out_ch: int, ksize: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, rng: Rng | None = None,
                 dtype=T.DEFAULT_DTYPE):
        self.stride, self.padding = stride, padding
        fan_in = in_ch * ksize * ksize
        w = _kaiming(rng, (out_ch, in_ch, ksize, ksize), fan_in, dtype) if rng is not None \
            else np.zeros((out_ch, in_ch, ksize, ksize), dtype=dtype)
        self.w = Parameter(w, "w")
        self.b = Parameter(np.zeros((1, out_ch, 1, 1), dtype=dtype), "b") if bias else None

    def params(self):
        return [self.w] + ([self.b] if self.b is not None else [])

    def spec(self):
        f, c, k, _ = self.w.data.shape
        return LayerSpec(self.kind, {"in": c, "out": f, "ksize": k, "stride": self.stride,
                                     "padding": self.padding, "bias": self.b is not None})

    def __call__(self, x: Var, ctx: Context = EVAL) -> Var:
        out = ad.conv2d(x, self.w, self.stride, self.padding)
        return out + self.b if self.b is not None else out


class RealReLU(Layer):
    kind = "real_relu"

    def __call__(self, x, ctx: Context = EVAL):
        if isinstance(x, ComplexVar):  # audit fixture: breaks equivariance
            return ComplexVar(ad.relu(x.re), ad.relu(x.im))
        return ad.relu(x)


class RealBN(Layer):
    kind = "real_bn"

    def __init__(self, channels: int, eps: float = 1e-5, decay: float = 0.9,
                 dtype=T.DEFAULT_DTYPE):
        self.eps, self.decay = eps, decay
        self.gamma = Parameter(np.ones((1, channels, 1, 1), dtype=dtype), "gamma")
        self.beta = Parameter(np.zeros((1, channels, 1, 1), dtype=dtype), "beta")
        self.running_mean = np.zeros((1, channels, 1, 1), dtype=dtype)
        self.running_var = np.ones((1, channels, 1, 1), dtype=dtype)

    def params(self):
        return [self.gamma, self.beta]

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_state(self, state):
        self.running_mean[...] = state["running_mean"]
        self.running_var[...] = state["running_var"]

    def spec(self):
        return LayerSpec(self.kind, {"channels": self.gamma.data.shape[1]})

    def __call__(self, x: Var, ctx: Context = EVAL) -> Var:
        if ctx.train:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = ad.square(x - mu).mean(axis=(0, 2, 3), keepdims=True)
            self.running_mean *= self.decay
            self.running_mean += (1.0 - self.decay) * mu.data.astype(self.running_mean.dtype)
            self.running_var *= self.decay
            self.running_var += (1.0 - self.decay) * var.data.astype(self.running_var.dtype)
            xhat = (x - mu) / ad.sqrt(var + self.eps)
        else:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return self.gamma * xhat + self.beta


class RealFC(Layer):
    kind = "real_fc"

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: Rng | None = None, dtype=T.DEFAULT_DTYPE):
        w = _kaiming(rng, (in_features, out_features), in_features, dtype) if rng is not None \
            else np.zeros((in_features, out_features), dtype=dtype)
        self.w = Parameter(w, "w")
        self.b = Parameter(np.zeros(out_features, dtype=dtype), "b") if bias else None

    def params(self):
        return [self.w] + ([self.b] if self.b is not None else [])

    def spec(self):
        return LayerSpec(self.kind, {"in": self.w.data.shape[0], "out": self.w.data.shape[1],
                                     "bias": self.b is not None})

    def __call__(self, x: Var, ctx: Context = EVAL) -> Var:
        flat = x.reshape((x.data.shape[0], -1))
        out = flat @ self.w
        return out + self.b if self.b is not None else out


class Softmax(Layer):
    """Prediction head: probabilities over classes. Training losses consume
    the logits feeding this layer instead (fused stable log-softmax)."""

    kind = "softmax"

    def __call__(self, x: Var, ctx: Context = EVAL) -> Var:
        logits = x.reshape((x.data.shape[0], -1))
        return ad.exp(ad.log_softmax(logits))


# ---------------------------------------------------------------------------
# equivariance audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CertReport:
    max_residual: float
    tol: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_residual < self.tol


def _sup(c: ComplexVar) -> float:
    return max(np.abs(c.re.data).max(), np.abs(c.im.data).max())


def certify_equivariance(layer_or_stack, input_shape, trials: int = 100,
                         tol: float = 1e-10, rng: Rng | None = None,
                         dtype=np.float64, train: bool = False) -> CertReport:
    """Numerically audit layer(exp(i*t) f) == exp(i*t) layer(f).

    Draws `trials` random (f, t) pairs and reports the worst relative
    residual sup|layer(e^it f) - e^it layer(f)| / max(sup|layer(f)|, 1e-8).
    Stochastic layers must be audited with a pinned mask: both forwards of a
    trial run with an identically seeded Context rng.
    """
    rng = rng or Rng(0)
    stack = layer_or_stack if isinstance(layer_or_stack, list) else [layer_or_stack]
    worst = 0.0
    for t in range(trials):
        trial = rng.child(t)
        f = ComplexVar(Var(trial.gaussian((1,) + tuple(input_shape), dtype)),
                       Var(trial.gaussian((1,) + tuple(input_shape), dtype)))
        theta = float(trial.uniform(0.0, 2.0 * np.pi))
        mask_seed = int(trial.integers(0, 2 ** 63))
        out_plain = forward_layers(stack, f, Context(train=train, rng=Rng(mask_seed)))
        out_rot = forward_layers(stack, f.rotate(theta), Context(train=train, rng=Rng(mask_seed)))
        expect = out_plain.rotate(theta)
        resid = max(np.abs(out_rot.re.data - expect.re.data).max(),
                    np.abs(out_rot.im.data - expect.im.data).max())
        worst = max(worst, resid / max(_sup(out_plain), 1e-8))
    return CertReport(worst, tol, trials)
