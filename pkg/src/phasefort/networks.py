"""Concrete architectures and their division into encryption g / processing
phi / decryption d, plus the adversarial generator and critic heads and the
baseline variants used for comparison runs.

Supported complex pipelines: "lenet" and "resnetN-alpha" / "resnetN-beta"
for N in {20, 32, 44, 56, 110} (CIFAR-style residual nets: three stages of
32x32, 16x16 and 8x8 feature maps). The division rules are:

  lenet     g = first conv (+relu) + generator head; d = softmax only;
            everything between runs on the server as the complex stack.
  resnet-a  g = stem + stage 1 + generator head (the last 32x32 feature
            feeds the head); phi = stage 2 plus the first 8x8 block;
            d = the remaining 8x8 blocks, global pooling, fc, softmax.
  resnet-b  identical g and phi; d keeps only the last 8x8 block before
            pooling (a shallower client-side tail).

Baselines ("original", "additional_layers", "noisy") are real-valued end to
end; their phi list is empty and the g/d boundary marks the feature-release
point the attacks observe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .autodiff import ComplexVar, Parameter, Var
from .layers import (EVAL, AvgPool, ComplexNorm, Context, ConvNoBias, Delta, Layer,
                     LayerSpec, MagnitudeMaxPool, RealBN, RealConv, RealFC, RealReLU,
                     Skip, Softmax, certify_equivariance, forward_layers)
from .rng import Rng

RESNET_DEPTHS = (20, 32, 44, 56, 110)


class BuildError(ValueError):
    pass


class RealBlock(Layer):
    """Standard real residual block (conv-bn-relu-conv-bn + shortcut, relu)."""

    kind = "real_block"

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1,
                 rng: Rng | None = None, dtype=T.DEFAULT_DTYPE):
        self.conv1 = RealConv(in_ch, out_ch, 3, stride, 1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = RealBN(out_ch, dtype=dtype)
        self.conv2 = RealConv(out_ch, out_ch, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = RealBN(out_ch, dtype=dtype)
        self.proj = None
        if stride != 1 or in_ch != out_ch:
            self.proj = RealConv(in_ch, out_ch, 1, stride, 0, bias=False, rng=rng, dtype=dtype)

    def _members(self):
        out = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.proj is not None:
            out.append(("proj", self.proj))
        return out

    def named_params(self):
        return [(f"{m}.{n}", p) for m, sub in self._members() for n, p in sub.named_params()]

    def params(self):
        return [p for _, p in self.named_params()]

    def state(self):
        return {f"{m}.{k}": v for m, sub in self._members() for k, v in sub.state().items()}

    def load_state(self, state):
        for m, sub in self._members():
            sub.load_state({k.split(".", 1)[1]: v for k, v in state.items()
                            if k.startswith(m + ".")})

    def spec(self):
        return LayerSpec(self.kind, {"members": [s.spec() for _, s in self._members()]})

    def __call__(self, x: Var, ctx: Context = EVAL) -> Var:
        y = self.bn2(self.conv2(ad.relu(self.bn1(self.conv1(x, ctx), ctx)), ctx), ctx)
        shortcut = self.proj(x, ctx) if self.proj is not None else x
        return ad.relu(y + shortcut)


class Discriminator:
    """W-GAN critic: one conv layer and one fully-connected layer producing a
    scalar score. Weights are clamped into [-c_clip, c_clip] after every
    critic update."""

    def __init__(self, feature_shape, c_clip: float = 0.01, width: int = 16,
                 rng: Rng | None = None, dtype=T.DEFAULT_DTYPE):
        c, h, w = feature_shape
        oh, ow = T.conv_out_hw(h, w, 3, 3, 2, 1)
        self.conv = RealConv(c, width, 3, stride=2, padding=1, rng=rng, dtype=dtype)
        self.fc = RealFC(width * oh * ow, 1, rng=rng, dtype=dtype)
        self.c_clip = c_clip
        self.feature_shape = tuple(feature_shape)
        for name, p in self.named_params():
            p.name = name

    def named_params(self):
        return [(f"conv.{n}", p) for n, p in self.conv.named_params()] + \
               [(f"fc.{n}", p) for n, p in self.fc.named_params()]

    def params(self):
        return [p for _, p in self.named_params()]

    def __call__(self, a: Var, ctx: Context = EVAL) -> Var:
        h = ad.leaky_relu(self.conv(a, ctx))
        return self.fc(h, ctx).reshape((-1,))


@dataclass
class NetworkDivision:
    """Ordered layer stacks for one pipeline, immutable once built."""

    arch: str
    variant: str              # "complex" | "original" | "additional_layers" | "noisy"
    classes: int
    input_shape: tuple
    g_layers: list[Layer]
    phi_layers: list[Layer]
    d_layers: list[Layer]
    release_shape: tuple = ()
    noise_gamma: float = 0.0
    dtype: object = T.DEFAULT_DTYPE
    _names_bound: bool = field(default=False, repr=False)

    @property
    def is_complex(self) -> bool:
        return self.variant == "complex"

    def sections(self):
        return (("g", self.g_layers), ("phi", self.phi_layers), ("d", self.d_layers))

    def bind_names(self):
        if self._names_bound:
            return
        for sec, stack in self.sections():
            for i, layer in enumerate(stack):
                for local, p in layer.named_params():
                    p.name = f"{sec}.{i}.{local}"
        self._names_bound = True

    def params(self) -> list[Parameter]:
        self.bind_names()
        return [p for _, stack in self.sections() for l in stack for p in l.params()]

    def named_state(self) -> dict[str, np.ndarray]:
        out = {}
        for sec, stack in self.sections():
            for i, layer in enumerate(stack):
                for k, v in layer.state().items():
                    out[f"{sec}.{i}.{k}"] = v
        return out

    def load_named_state(self, state: dict[str, np.ndarray]):
        for sec, stack in self.sections():
            for i, layer in enumerate(stack):
                prefix = f"{sec}.{i}."
                sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
                if sub:
                    layer.load_state(sub)

    def layer_specs(self) -> dict[str, list[LayerSpec]]:
        return {sec: [l.spec() for l in stack] for sec, stack in self.sections()}

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params())

    # -- forward paths ------------------------------------------------------
    def forward_g(self, images: Var, ctx: Context = EVAL) -> Var:
        return forward_layers(self.g_layers, images, ctx)

    def forward_phi(self, x: ComplexVar, ctx: Context = EVAL) -> ComplexVar:
        return forward_layers(self.phi_layers, x, ctx)

    def forward_d(self, feat: Var, ctx: Context = EVAL, logits: bool = True) -> Var:
        stack = self.d_layers
        if logits and stack and isinstance(stack[-1], Softmax):
            stack = stack[:-1]
            out = forward_layers(stack, feat, ctx)
            return out.reshape((out.data.shape[0], -1))
        return forward_layers(stack, feat, ctx)


def forward_plain(division: NetworkDivision, images, ctx: Context = EVAL,
                  rng: Rng | None = None, logits: bool = True) -> Var:
    """Baseline real-valued path: g (plus optional noise injection) then d."""
    if division.is_complex:
        raise BuildError("forward_plain is the baseline path; use the secure protocol "
                         "for complex pipelines")
    x = images if isinstance(images, Var) else Var(np.asarray(images, dtype=division.dtype))
    if x.data.shape[1:] != tuple(division.input_shape):
        raise BuildError(f"input shape {x.data.shape[1:]} != expected {division.input_shape}")
    a = division.forward_g(x, ctx)
    if division.variant == "noisy" and division.noise_gamma > 0:
        from .secure import noisy_feature
        if rng is None:
            raise BuildError("noisy baseline forward needs an rng")
        a = noisy_feature(a, division.noise_gamma, rng)
    return division.forward_d(a, ctx, logits=logits)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _generator_head(channels: int, rng: Rng, dtype) -> RealConv:
    # 3x3xK head transforming the stem feature into the released feature
    return RealConv(channels, channels, 3, stride=1, padding=1, bias=True,
                    rng=rng, dtype=dtype)


def _lenet_stem(rng: Rng, dtype, in_ch: int) -> list[Layer]:
    return [RealConv(in_ch, 6, 5, rng=rng, dtype=dtype), RealReLU()]


def _lenet_complex(classes, input_shape, rng, dtype):
    in_ch, h, _ = input_shape
    g = _lenet_stem(rng, dtype, in_ch) + [_generator_head(6, rng, dtype)]
    fc_spatial = (h - 4) // 2  # after first 2x2 pool
    fc_spatial = (fc_spatial - 4) // 2  # after conv5 and second pool
    phi = [
        MagnitudeMaxPool(2),
        ConvNoBias(6, 16, 5, rng=rng, dtype=dtype),
        Delta("channelwise", channels=16, dtype=dtype),
        MagnitudeMaxPool(2),
        ConvNoBias(16, 120, fc_spatial, rng=rng, dtype=dtype),
        Delta("channelwise", channels=120, dtype=dtype),
        ConvNoBias(120, 84, 1, rng=rng, dtype=dtype),
        Delta("channelwise", channels=84, dtype=dtype),
        ConvNoBias(84, classes, 1, rng=rng, dtype=dtype),
    ]
    d = [Softmax()]
    return g, phi, d


def _lenet_real_tail(classes, input_shape, rng, dtype):
    h = input_shape[1]
    s = ((h - 4) // 2 - 4) // 2
    return [
        MagnitudeMaxPool(2),
        RealConv(6, 16, 5, rng=rng, dtype=dtype), RealReLU(),
        MagnitudeMaxPool(2),
        RealFC(16 * s * s, 120, rng=rng, dtype=dtype), RealReLU(),
        RealFC(120, 84, rng=rng, dtype=dtype), RealReLU(),
        RealFC(84, classes, rng=rng, dtype=dtype),
        Softmax(),
    ]


def _complex_block(in_ch, out_ch, stride, rng, dtype) -> list[Layer]:
    inner = [
        ConvNoBias(in_ch, out_ch, 3, stride, 1, rng=rng, dtype=dtype),
        ComplexNorm(out_ch, dtype=dtype),
        Delta("fixed", c=1.0, dtype=dtype),
        ConvNoBias(out_ch, out_ch, 3, 1, 1, rng=rng, dtype=dtype),
        ComplexNorm(out_ch, dtype=dtype),
    ]
    proj = None
    if stride != 1 or in_ch != out_ch:
        proj = ConvNoBias(in_ch, out_ch, 1, stride, 0, rng=rng, dtype=dtype)
    return [Skip(inner, proj), Delta("fixed", c=1.0, dtype=dtype)]


def _resnet_parts(depth, classes, input_shape, rng, dtype):
    if (depth - 2) % 6:
        raise BuildError(f"resnet depth {depth} is not of the form 6n+2")
    n = (depth - 2) // 6
    in_ch = input_shape[0]
    g: list[Layer] = [RealConv(in_ch, 16, 3, 1, 1, bias=False, rng=rng, dtype=dtype),
                      RealBN(16, dtype=dtype), RealReLU()]
    for _ in range(n):  # stage 1 stays client-side (32x32 maps)
        g.append(RealBlock(16, 16, 1, rng=rng, dtype=dtype))
    g.append(_generator_head(16, rng, dtype))

    phi: list[Layer] = []
    phi += _complex_block(16, 32, 2, rng, dtype)       # first 16x16 block
    for _ in range(n - 1):
        phi += _complex_block(32, 32, 1, rng, dtype)
    phi += _complex_block(32, 64, 2, rng, dtype)       # first 8x8 block

    def tail_blocks(count):
        return [RealBlock(64, 64, 1, rng=rng, dtype=dtype) for _ in range(count)]

    pool_size = input_shape[1] // 4
    tail = [AvgPool(pool_size), RealFC(64, classes, rng=rng, dtype=dtype), Softmax()]
    return g, phi, tail_blocks, tail, n


def _parse_arch(arch: str):
    if arch == "lenet":
        return "lenet", None, None
    if arch.startswith("resnet"):
        body = arch[len("resnet"):]
        if "-" in body:
            depth_s, flavor = body.split("-", 1)
        else:
            depth_s, flavor = body, "alpha"
        if flavor not in ("alpha", "beta") or not depth_s.isdigit():
            raise BuildError(f"unsupported architecture {arch!r}")
        depth = int(depth_s)
        if depth not in RESNET_DEPTHS:
            raise BuildError(f"unsupported resnet depth {depth}; choose from {RESNET_DEPTHS}")
        return "resnet", depth, flavor
    raise BuildError(f"unsupported architecture {arch!r}")


def _release_shape(division: NetworkDivision) -> tuple:
    probe = Var(np.zeros((1,) + tuple(division.input_shape), dtype=division.dtype))
    return tuple(division.forward_g(probe, EVAL).data.shape[1:])


def _certify_phi(division: NetworkDivision, trials: int):
    for layer in division.phi_layers:
        if not layer.certified:
            raise BuildError(f"layer kind {layer.kind!r} is not certified for the "
                             f"processing stack")
    if not division.phi_layers or trials <= 0:
        return
    probe = Var(np.zeros((1,) + tuple(division.input_shape), dtype=division.dtype))
    feat_shape = division.forward_g(probe, EVAL).data.shape[1:]
    report = certify_equivariance(division.phi_layers, feat_shape, trials=trials,
                                  tol=1e-9, rng=Rng(7), dtype=np.float64)
    if not report.passed:
        raise BuildError(f"processing stack failed the equivariance audit "
                         f"(residual {report.max_residual:.3e})")


def build(arch: str, classes: int = 10, input_shape=(3, 32, 32), seed: int = 0,
          dtype=T.DEFAULT_DTYPE, certify_trials: int = 3) -> NetworkDivision:
    """Build a complex pipeline divided into g / phi / d."""
    if classes < 2:
        raise BuildError("need at least 2 output classes")
    kind, depth, flavor = _parse_arch(arch)
    rng = Rng(seed).child(0xA11C)
    if kind == "lenet":
        g, phi, d = _lenet_complex(classes, input_shape, rng, dtype)
    else:
        g, phi, tail_blocks, tail, n = _resnet_parts(depth, classes, input_shape, rng, dtype)
        d = tail_blocks(n - 1 if flavor == "alpha" else 1) + tail
    division = NetworkDivision(arch, "complex", classes, tuple(input_shape), g, phi, d)
    division.dtype = dtype
    _certify_phi(division, certify_trials)
    division.release_shape = _release_shape(division)
    division.bind_names()
    return division


def build_baseline(arch: str, variant: str, classes: int = 10, input_shape=(3, 32, 32),
                   seed: int = 0, gamma: float = 0.0,
                   dtype=T.DEFAULT_DTYPE) -> NetworkDivision:
    """Real-valued comparison networks sharing the complex pipeline's division
    boundary: `original`, `additional_layers` (generator-head-shaped extra
    layers, no adversarial loss), and `noisy` (release a + gamma * eps)."""
    if variant not in ("original", "additional_layers", "noisy"):
        raise BuildError(f"unsupported baseline variant {variant!r}")
    kind, depth, flavor = _parse_arch(arch)
    rng = Rng(seed).child(0xBA5E)
    if kind == "lenet":
        g = _lenet_stem(rng, dtype, input_shape[0])
        if variant == "additional_layers":
            g.append(_generator_head(6, rng, dtype))
        d = _lenet_real_tail(classes, input_shape, rng, dtype)
    else:
        n = (depth - 2) // 6
        g = [RealConv(input_shape[0], 16, 3, 1, 1, bias=False, rng=rng, dtype=dtype),
             RealBN(16, dtype=dtype), RealReLU()]
        g += [RealBlock(16, 16, 1, rng=rng, dtype=dtype) for _ in range(n)]
        if variant == "additional_layers":
            g.append(_generator_head(16, rng, dtype))
        d = [RealBlock(16 if i == 0 else 32, 32, 2 if i == 0 else 1, rng=rng, dtype=dtype)
             for i in range(n)]
        d += [RealBlock(32 if i == 0 else 64, 64, 2 if i == 0 else 1, rng=rng, dtype=dtype)
              for i in range(n)]
        d += [AvgPool(input_shape[1] // 4), RealFC(64, classes, rng=rng, dtype=dtype), Softmax()]
    division = NetworkDivision(arch, variant, classes, tuple(input_shape), g, [], d,
                               noise_gamma=float(gamma) if variant == "noisy" else 0.0)
    division.dtype = dtype
    division.release_shape = _release_shape(division)
    division.bind_names()
    return division


def build_discriminator(feature_shape, c_clip: float = 0.01, seed: int = 0,
                        dtype=T.DEFAULT_DTYPE) -> Discriminator:
    return Discriminator(feature_shape, c_clip=c_clip, rng=Rng(seed).child(0xD15C), dtype=dtype)
