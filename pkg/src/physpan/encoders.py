"""Feature assembly for the span head.

Every generated frame becomes one column of a feature matrix F with a fixed
block layout: [per-frame image features; query embedding; context features].
The query and context blocks are computed once per sample and repeated across
columns, so only the image block varies over time.

The image and context encoders are small trainable conv stacks and the query
is an embedding lookup over (task, color, shape) ids; together they carry the
same information the original large pretrained backbones would, at a size
where end-to-end finite-difference checks stay tractable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ShapeError
from .rng import SplitMix64
from .simulator import _conv_param

N_TASKS = 3
N_COLORS = 8
N_SHAPES = 6


@dataclass
class EncoderConfig:
    resolution: int = 32
    image_dim: int = 64      # per-frame image feature size
    query_dim: int = 16      # query embedding size
    context_dim: int = 32    # per-stream context feature size (3 streams)
    embed_dim: int = 8
    conv_width: int = 12
    time_bins: int = 4       # temporal pooling bins for the generated-frame stream
    leak: float = 0.2

    @property
    def feature_dim(self) -> int:
        return self.image_dim + self.query_dim + 3 * self.context_dim


def _linear_param(rng: SplitMix64, n_in: int, n_out: int, name: str) -> tuple[Tensor, Tensor]:
    limit = np.sqrt(6.0 / (n_in + n_out))
    w = np.array(rng.uniform_values(n_out * n_in, -limit, limit)).reshape(n_out, n_in)
    return (Tensor(w, requires_grad=True, name=f"{name}.w"),
            Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b"))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    n_out, n_in = w.shape
    return ad.add(ad.reshape(ad.matmul(w, ad.reshape(x, (n_in, 1))), (n_out,)), b)


class _ConvStack:
    """Three stride-2 convs, global average pool, and a linear head."""

    def __init__(self, in_channels: int, out_dim: int, width: int, leak: float,
                 rng: SplitMix64, name: str):
        self.leak = leak
        w1 = max(4, width // 2)
        self.layers = [
            _conv_param(rng, w1, in_channels, 4, f"{name}.conv0"),
            _conv_param(rng, width, w1, 4, f"{name}.conv1"),
            _conv_param(rng, width, width, 4, f"{name}.conv2"),
        ]
        self.head = _linear_param(rng, width, out_dim, f"{name}.head")

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for w, b in self.layers:
            out[w.name] = w
            out[b.name] = b
        w, b = self.head
        out[w.name] = w
        out[b.name] = b
        return out

    def __call__(self, x: Tensor) -> Tensor:
        for w, b in self.layers:
            x = ad.leaky_relu(ad.conv2d(x, w, stride=2, padding=1, bias=b), self.leak)
        return _linear(ad.spatial_mean(x), *self.head)


class FrameEncoder2D:
    """Per-frame image features, applied to each generated frame independently."""

    def __init__(self, config: EncoderConfig, rng: SplitMix64):
        self.stack = _ConvStack(3, config.image_dim, config.conv_width, config.leak, rng, "imgenc")

    def parameters(self) -> dict[str, Tensor]:
        return self.stack.parameters()

    def __call__(self, frame: Tensor) -> Tensor:
        return self.stack(frame)


class ContextEncoder3D:
    """Three spatiotemporal context streams, each pooled to one vector.

    Streams: (a) the observed input frames, (b) the target-object input
    masks, (c) the generated horizon. Time enters through channel stacking
    (a, b) or mean-pooled temporal bins (c) before the spatial convs.
    """

    def __init__(self, config: EncoderConfig, rng: SplitMix64, m_input: int = 3,
                 streams: tuple[str, ...] = ("frames", "masks", "generated")):
        self.config = config
        self.m_input = m_input
        self.streams = streams
        builders = {
            "frames": 3 * m_input,
            "masks": m_input,
            "generated": 3 * config.time_bins,
        }
        self.stacks = {s: _ConvStack(builders[s], config.context_dim, config.conv_width,
                                     config.leak, rng, f"ctx.{s}")
                       for s in streams}

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for stack in self.stacks.values():
            out.update(stack.parameters())
        return out

    def encode_input_frames(self, input_frames: list[Tensor]) -> Tensor:
        return self.stacks["frames"](ad.concat(input_frames, axis=0))

    def encode_input_masks(self, input_masks: list[Tensor]) -> Tensor:
        # masks arrive as (H, W); stack them as channels
        chans = [ad.reshape(m, (1, *m.shape)) for m in input_masks]
        return self.stacks["masks"](ad.concat(chans, axis=0))

    def encode_generated(self, generated: list[Tensor]) -> Tensor:
        bins = self.config.time_bins
        n = len(generated)
        if n < bins:
            raise ShapeError(f"need at least {bins} generated frames, got {n}")
        pooled = []
        edges = [round(i * n / bins) for i in range(bins + 1)]
        for i in range(bins):
            chunk = generated[edges[i]:edges[i + 1]]
            acc = chunk[0]
            for frame in chunk[1:]:
                acc = ad.add(acc, frame)
            pooled.append(ad.scale(acc, 1.0 / len(chunk)))
        return self.stacks["generated"](ad.concat(pooled, axis=0))


class QueryEmbedding:
    """Deterministic embedding of the (task, color, shape) query tuple."""

    def __init__(self, config: EncoderConfig, rng: SplitMix64):
        d = config.embed_dim

        def table(rows, name):
            vals = np.array(rng.uniform_values(rows * d, -0.1, 0.1)).reshape(rows, d)
            return Tensor(vals, requires_grad=True, name=name)

        self.task_table = table(N_TASKS, "query.task")
        self.color_table = table(N_COLORS, "query.color")
        self.shape_table = table(N_SHAPES, "query.shape")
        self.head = _linear_param(rng, 3 * d, config.query_dim, "query.head")

    def parameters(self) -> dict[str, Tensor]:
        w, b = self.head
        return {self.task_table.name: self.task_table, self.color_table.name: self.color_table,
                self.shape_table.name: self.shape_table, w.name: w, b.name: b}

    def __call__(self, query: tuple[int, int, int]) -> Tensor:
        task_id, color_id, shape_id = query
        if not (0 <= task_id < N_TASKS and 0 <= color_id < N_COLORS and 0 <= shape_id < N_SHAPES):
            raise DomainError(f"query ids out of vocabulary: {query}")
        parts = [ad.take_row(self.task_table, task_id),
                 ad.take_row(self.color_table, color_id),
                 ad.take_row(self.shape_table, shape_id)]
        return _linear(ad.concat(parts, axis=0), *self.head)


def assemble_features(generated: list[Tensor], input_frames: list[Tensor],
                      input_masks: list[Tensor], query: tuple[int, int, int],
                      frame_encoder: FrameEncoder2D, context_encoder: ContextEncoder3D,
                      query_embedding: QueryEmbedding) -> Tensor:
    """Build F with columns f_t = [image_t; query; context], one per generated frame."""
    if not generated:
        raise ShapeError("need at least one generated frame")
    f_query = query_embedding(query)
    f_ctx = ad.concat([
        context_encoder.encode_input_frames(input_frames),
        context_encoder.encode_input_masks(input_masks),
        context_encoder.encode_generated(generated),
    ], axis=0)
    columns = []
    for frame in generated:
        f_img = frame_encoder(frame)
        col = ad.concat([f_img, f_query, f_ctx], axis=0)
        columns.append(ad.reshape(col, (col.shape[0], 1)))
    return ad.concat(columns, axis=1)
