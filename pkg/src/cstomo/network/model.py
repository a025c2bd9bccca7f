"""Two-branch feature extractor and coupled concentration/temperature decoders."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..heatmaps import build_heatmaps, heatmaps_backward, least_prime_factor
from .layers import BatchNorm, Conv2D, Dense, Layer, PReLU, Tanh, conv_output_size


@dataclass(frozen=True)
class Architecture:
    num_views: int = 4
    beams_per_view: int = 8
    n_pixels: int = 1336
    conv_filters: tuple[int, ...] = (64, 128, 256)
    conv_padding: tuple[int, ...] = (1, 1, 0)
    conv_kernel: int = 3
    smooth_filters: int = 64
    decoder_widths: tuple[int, ...] = (8192, 4096, 2048)
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    prelu_init: float = 0.25

    def __post_init__(self):
        if len(self.conv_filters) != len(self.conv_padding):
            raise ValueError("conv_filters and conv_padding differ in length")
        # a 2x2 kernel with stride (1, 2) stays inside one view only when F == 2
        if least_prime_factor(self.beams_per_view) != 2:
            raise ValueError("beams_per_view must be even for the smoothness branch")

    @property
    def centro_shapes(self) -> list[tuple[int, int, int]]:
        """Output shape of every centrosymmetry block."""
        h, w = 2 * self.num_views, self.beams_per_view
        shapes = []
        for f, p in zip(self.conv_filters, self.conv_padding):
            h = conv_output_size(h, self.conv_kernel, 1, p)
            w = conv_output_size(w, self.conv_kernel, 1, p)
            shapes.append((h, w, f))
        return shapes

    @property
    def smooth_input_shape(self) -> tuple[int, int, int]:
        F = least_prime_factor(self.beams_per_view)
        return (self.beams_per_view // F, self.num_views * F, 2)

    @property
    def smooth_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.smooth_input_shape
        return (conv_output_size(h, 2, 1, 0), conv_output_size(w, 2, 2, 0), self.smooth_filters)

    @property
    def latent_size(self) -> int:
        return int(np.prod(self.centro_shapes[-1])) + int(np.prod(self.smooth_shape))

    @property
    def decoder_dims(self) -> list[int]:
        return [self.latent_size, *self.decoder_widths, self.n_pixels]

    def parameter_count(self) -> int:
        """Closed-form trainable parameter count."""
        k = self.conv_kernel
        total, cin = 0, 1
        for f in self.conv_filters:
            total += k * k * cin * f + 3 * f       # kernel, gamma, beta, slope
            cin = f
        total += 2 * 2 * 2 * self.smooth_filters + 3 * self.smooth_filters
        dims = self.decoder_dims
        for g, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            per_branch = n_in * n_out + 3 * n_out  # W, gamma, beta, crosstalk vector
            if g < len(dims) - 2:
                per_branch += n_out                # PReLU slopes; Tanh on the output stage
            total += 2 * per_branch
        return total

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBlock:
    def __init__(self, conv: Conv2D, channels: int, arch: Architecture):
        self.conv = conv
        self.bn = BatchNorm(channels, arch.bn_momentum, arch.bn_eps)
        self.act = PReLU(channels, arch.prelu_init)
        self.layers = {"conv": self.conv, "bn": self.bn, "act": self.act}

    def forward(self, x, train=True):
        return self.act.forward(self.bn.forward(self.conv.forward(x, train), train), train)

    def backward(self, d):
        return self.conv.backward(self.bn.backward(self.act.backward(d)))


class Extractor:
    """Centrosymmetry branch (stacked 3x3 blocks) and smoothness branch (one 2x2, stride (1, 2) block)."""

    def __init__(self, arch: Architecture, rng: np.random.Generator):
        self.arch = arch
        self.centro = []
        cin = 1
        for f, p in zip(arch.conv_filters, arch.conv_padding):
            k = arch.conv_kernel
            self.centro.append(ConvBlock(Conv2D(k, k, cin, f, (1, 1), (p, p), rng), f, arch))
            cin = f
        self.smooth = ConvBlock(Conv2D(2, 2, 2, arch.smooth_filters, (1, 2), (0, 0), rng),
                                arch.smooth_filters, arch)

    def named_layers(self):
        for i, block in enumerate(self.centro):
            for name, layer in block.layers.items():
                yield f"centro.{i}.{name}", layer
        for name, layer in self.smooth.layers.items():
            yield f"smooth.{name}", layer

    def forward(self, S, P, train=True):
        """Returns (latent, centro_map, smooth_map)."""
        a = S
        for block in self.centro:
            a = block.forward(a, train)
        b = self.smooth.forward(P, train)
        self._shapes = (a.shape, b.shape)
        B = a.shape[0]
        return np.concatenate([a.reshape(B, -1), b.reshape(B, -1)], axis=1), a, b

    def backward(self, dlatent):
        sa, sb = self._shapes
        na = int(np.prod(sa[1:]))
        da = dlatent[:, :na].reshape(sa)
        db = dlatent[:, na:].reshape(sb)
        for block in reversed(self.centro):
            da = block.backward(da)
        return da, self.smooth.backward(db)


class CrosstalkWeights(Layer):
    """Elementwise coupling vectors of one decoder stage, initialised to zero."""

    def __init__(self, n):
        super().__init__()
        self.params["to_x"] = np.zeros(n)   # scales the temperature pre-activation in the concentration branch
        self.params["to_t"] = np.zeros(n)   # scales the concentration pre-activation in the temperature branch
        self.zero_grad()


class CrosstalkStage:
    """x = act(h_x + c_x * h_t), t = act(h_t + c_t * h_x) with h = BN(W v)."""

    def __init__(self, n_in, n_out, arch: Architecture, rng, output: bool):
        self.fc_x, self.fc_t = Dense(n_in, n_out, rng), Dense(n_in, n_out, rng)
        self.bn_x = BatchNorm(n_out, arch.bn_momentum, arch.bn_eps)
        self.bn_t = BatchNorm(n_out, arch.bn_momentum, arch.bn_eps)
        self.cross = CrosstalkWeights(n_out)
        if output:
            self.act_x, self.act_t = Tanh(), Tanh()
        else:
            self.act_x, self.act_t = PReLU(n_out, arch.prelu_init), PReLU(n_out, arch.prelu_init)
        self.layers = {"x.fc": self.fc_x, "x.bn": self.bn_x, "x.act": self.act_x,
                       "t.fc": self.fc_t, "t.bn": self.bn_t, "t.act": self.act_t, "cross": self.cross}

    def forward(self, x_prev, t_prev, train=True):
        hx = self.bn_x.forward(self.fc_x.forward(x_prev, train), train)
        ht = self.bn_t.forward(self.fc_t.forward(t_prev, train), train)
        self._h = (hx, ht)
        cx, ct = self.cross.params["to_x"], self.cross.params["to_t"]
        return self.act_x.forward(hx + cx * ht, train), self.act_t.forward(ht + ct * hx, train)

    def backward(self, dx, dt):
        hx, ht = self._h
        cx, ct = self.cross.params["to_x"], self.cross.params["to_t"]
        zx = self.act_x.backward(dx)
        zt = self.act_t.backward(dt)
        self.cross.grads["to_x"] += (zx * ht).sum(axis=0)
        self.cross.grads["to_t"] += (zt * hx).sum(axis=0)
        dhx = zx + ct * zt
        dht = zt + cx * zx
        return (self.fc_x.backward(self.bn_x.backward(dhx)),
                self.fc_t.backward(self.bn_t.backward(dht)))


def crosstalk_stage_forward(stage: CrosstalkStage, x_prev, t_prev, train=True):
    return stage.forward(x_prev, t_prev, train)


class CrosstalkNet:
    """Projections (A1, A2) -> (X, T) in the network's (-1, 1) output space.

    Inputs are standardized projections of shape (B, M); the heatmap
    rearrangement is the first layer, so gradients flow back to them.
    """

    def __init__(self, arch: Architecture, seed: int = 0):
        self.arch = arch
        rng = np.random.default_rng(seed)
        self.extractor = Extractor(arch, rng)
        dims = arch.decoder_dims
        self.stages = [CrosstalkStage(n_in, n_out, arch, rng, output=(g == len(dims) - 2))
                       for g, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:]))]

    def named_layers(self):
        yield from self.extractor.named_layers()
        for g, stage in enumerate(self.stages):
            for name, layer in stage.layers.items():
                yield f"decoder.{g}.{name}", layer

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": p for ln, layer in self.named_layers() for pn, p in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": layer.grads[pn] for ln, layer in self.named_layers() for pn in layer.params}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{bn}": b for ln, layer in self.named_layers() for bn, b in layer.buffers.items()}

    def load_state(self, params: dict, buffers: dict) -> None:
        for ln, layer in self.named_layers():
            for pn in layer.params:
                layer.params[pn][...] = params[f"{ln}.{pn}"]
            for bn in layer.buffers:
                layer.buffers[bn] = np.array(buffers[f"{ln}.{bn}"], dtype=float)

    @staticmethod
    def decays(name: str) -> bool:
        """Whether L2 decay applies: kernels, FC matrices and crosstalk vectors."""
        return name.endswith(".W") or ".cross." in name

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def forward(self, A1, A2, train=True):
        hm = build_heatmaps(A1, A2, self.arch.num_views, self.arch.beams_per_view)
        latent, _, _ = self.extractor.forward(hm.S, hm.P, train)
        x = t = latent
        for stage in self.stages:
            x, t = stage.forward(x, t, train)
        return x, t

    def backward(self, dx, dt):
        """Accumulates parameter gradients; returns gradients w.r.t. (A1, A2)."""
        for stage in reversed(self.stages):
            dx, dt = stage.backward(dx, dt)
        dS, dP = self.extractor.backward(dx + dt)
        return heatmaps_backward(dS, dP, self.arch.num_views, self.arch.beams_per_view)
