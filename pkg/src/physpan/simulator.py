"""Learned frame rollout: strided-conv encoder, stacked ConvLSTM, deconv decoder.

The network watches the observed input frames to warm up its recurrent state,
then emits future frames one step at a time. During training each step's
input is the ground-truth frame with probability `tf_rate` (an independent
per-step coin), otherwise its own previous output; at inference it is always
autoregressive. Trained with a negated-PSNR reconstruction loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .rng import SplitMix64


@dataclass
class SimulatorConfig:
    resolution: int = 32
    in_channels: int = 3
    enc_widths: tuple = (12, 16, 24, 32)   # conv widths; strided steps at positions 1 and 3
    latent_channels: int = 32
    lstm_hidden: int = 16
    lstm_cells: int = 3
    leak: float = 0.2

    @property
    def latent_hw(self) -> int:
        return self.resolution // 4


def _conv_param(rng: SplitMix64, co: int, ci: int, k: int, name: str) -> tuple[Tensor, Tensor]:
    fan_in = ci * k * k
    fan_out = co * k * k
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = np.array(rng.uniform_values(co * ci * k * k, -limit, limit)).reshape(co, ci, k, k)
    return (Tensor(w, requires_grad=True, name=f"{name}.w"),
            Tensor(np.zeros(co), requires_grad=True, name=f"{name}.b"))


def _deconv_param(rng: SplitMix64, ci: int, co: int, k: int, name: str) -> tuple[Tensor, Tensor]:
    """Transposed-conv parameters: kernel (ci, co, k, k), bias over the co outputs."""
    limit = np.sqrt(6.0 / ((ci + co) * k * k))
    w = np.array(rng.uniform_values(ci * co * k * k, -limit, limit)).reshape(ci, co, k, k)
    return (Tensor(w, requires_grad=True, name=f"{name}.w"),
            Tensor(np.zeros(co), requires_grad=True, name=f"{name}.b"))


class ConvLSTMCell:
    """One convolutional LSTM cell with a fused 4-gate kernel.

    Gates use sigmoid, the candidate uses tanh, and the forget-gate bias
    starts at +1 so early training does not flush state.
    """

    def __init__(self, in_channels: int, hidden: int, rng: SplitMix64, name: str, kernel: int = 3):
        self.in_channels = in_channels
        self.hidden = hidden
        self.kernel = kernel
        self.w, self.b = _conv_param(rng, 4 * hidden, in_channels + hidden, kernel, name)
        self.b.data[hidden:2 * hidden] = 1.0

    def parameters(self) -> dict[str, Tensor]:
        return {self.w.name: self.w, self.b.name: self.b}

    def init_state(self, hw: int) -> tuple[Tensor, Tensor]:
        zeros = np.zeros((self.hidden, hw, hw))
        return Tensor(zeros), Tensor(zeros.copy())

    def step(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h, c = state
        gates = ad.conv2d(ad.concat([x, h], axis=0), self.w, stride=1,
                          padding=self.kernel // 2, bias=self.b)
        n = self.hidden
        i = ad.sigmoid(ad.narrow(gates, 0, 0, n))
        f = ad.sigmoid(ad.narrow(gates, 0, n, n))
        o = ad.sigmoid(ad.narrow(gates, 0, 2 * n, n))
        g = ad.tanh(ad.narrow(gates, 0, 3 * n, n))
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new


class SimulatorNet:
    """Frame predictor: 6 convs down, stacked ConvLSTM cells, 6 transposed convs up."""

    def __init__(self, config: SimulatorConfig | None = None, rng: SplitMix64 | None = None):
        cfg = config or SimulatorConfig()
        rng = rng or SplitMix64(0)
        if cfg.resolution % 4 != 0:
            raise ConfigError(f"resolution must be divisible by 4, got {cfg.resolution}")
        self.config = cfg
        w0, w1, w2, latent = *cfg.enc_widths[:3], cfg.latent_channels

        # (ci, co, kernel, stride) per layer; stride-2 layers use 4x4 kernels
        self._enc_plan = [
            (cfg.in_channels, w0, 3, 1), (w0, w1, 4, 2), (w1, w2, 3, 1),
            (w2, latent, 4, 2), (latent, latent, 3, 1), (latent, latent, 3, 1),
        ]
        self.enc = [_conv_param(rng, co, ci, k, f"enc{i}")
                    for i, (ci, co, k, _) in enumerate(self._enc_plan)]

        self.cells = []
        in_ch = latent
        for i in range(cfg.lstm_cells):
            self.cells.append(ConvLSTMCell(in_ch, cfg.lstm_hidden, rng, f"cell{i}"))
            in_ch = cfg.lstm_hidden

        # 1x1 projection from the last cell's hidden state back to latent width,
        # so the decoder consumes the same geometry the encoder produces
        self.proj = _conv_param(rng, latent, cfg.lstm_hidden, 1, "proj")

        # transposed-conv stack mirrors the encoder; kernels are stored in
        # conv2d layout (co, ci, k, k) where the transpose maps co -> ci
        self._dec_plan = [
            (latent, latent, 3, 1), (latent, latent, 3, 1), (latent, w2, 4, 2),
            (w2, w1, 3, 1), (w1, w0, 4, 2), (w0, cfg.in_channels, 3, 1),
        ]
        self.dec = [_deconv_param(rng, ci, co, k, f"dec{i}")
                    for i, (ci, co, k, _) in enumerate(self._dec_plan)]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for w, b in self.enc + [self.proj] + self.dec:
            out[w.name] = w
            out[b.name] = b
        for cell in self.cells:
            out.update(cell.parameters())
        return out

    def encode_frame(self, frame: Tensor) -> Tensor:
        cfg = self.config
        if frame.shape != (cfg.in_channels, cfg.resolution, cfg.resolution):
            raise ShapeError(f"expected frame shape {(cfg.in_channels, cfg.resolution, cfg.resolution)}, "
                             f"got {frame.shape}")
        x = frame
        for (w, b), (_, _, k, s) in zip(self.enc, self._enc_plan):
            x = ad.leaky_relu(ad.conv2d(x, w, stride=s, padding=k // 2 if s == 1 else 1, bias=b),
                              cfg.leak)
        return x

    def decode_latent(self, latent: Tensor) -> Tensor:
        cfg = self.config
        x = latent
        for idx, ((w, b), (_, _, k, s)) in enumerate(zip(self.dec, self._dec_plan)):
            pad = k // 2 if s == 1 else 1
            hw = x.shape[1] * s
            x = ad.conv_transpose2d(x, w, stride=s, padding=pad, output_hw=(hw, hw), bias=b)
            if idx < len(self.dec) - 1:
                x = ad.leaky_relu(x, cfg.leak)
        return ad.sigmoid(x)

    def init_state(self) -> list[tuple[Tensor, Tensor]]:
        return [cell.init_state(self.config.latent_hw) for cell in self.cells]

    def _advance(self, frame: Tensor, state: list) -> tuple[Tensor, list]:
        x = self.encode_frame(frame)
        new_state = []
        for cell, cell_state in zip(self.cells, state):
            h, c = cell.step(x, cell_state)
            new_state.append((h, c))
            x = h
        latent = ad.leaky_relu(ad.conv2d(x, self.proj[0], bias=self.proj[1]), self.config.leak)
        return self.decode_latent(latent), new_state

    def rollout(self, input_frames: list[Tensor], horizon: int,
                ground_truth: list[Tensor] | None = None,
                tf_rate: float = 0.0, rng: SplitMix64 | None = None,
                training: bool = False) -> list[Tensor]:
        """Warm up on the observed frames, then emit `horizon` future frames.

        Training with tf_rate > 0 needs ground truth of length `horizon` and
        an rng for the per-step coins; inference ignores teacher forcing.
        """
        if not training:
            tf_rate = 0.0
        if training and tf_rate > 0:
            if ground_truth is None:
                raise ConfigError("teacher forcing needs ground-truth frames in training mode")
            if rng is None:
                raise ConfigError("teacher forcing needs an rng for its per-step coins")
        if training and tf_rate > 0 and len(ground_truth) < horizon:
            raise ConfigError(f"need {horizon} ground-truth frames, got {len(ground_truth)}")

        state = self.init_state()
        out = None
        for frame in input_frames:
            out, state = self._advance(frame, state)
        generated = []
        last = input_frames[-1]
        for t in range(horizon):
            out, state = self._advance(last, state)
            generated.append(out)
            if training and tf_rate > 0 and rng.random() < tf_rate:
                last = ground_truth[t]
            else:
                last = out
        return generated


def sim_loss(generated: list[Tensor], truth: list[Tensor]) -> Tensor:
    """Mean negated PSNR over the horizon; lower is better, floor is -100."""
    if len(generated) != len(truth):
        raise ShapeError(f"got {len(generated)} generated frames vs {len(truth)} targets")
    total = ad.psnr_loss(generated[0], truth[0])
    for g, t in zip(generated[1:], truth[1:]):
        total = ad.add(total, ad.psnr_loss(g, t))
    return ad.scale(total, 1.0 / len(generated))
