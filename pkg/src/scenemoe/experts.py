"""Per-channel scene experts: small pre-norm transformer stacks.

Each expert maps its channel's frame features (F x input_width) through
`layers` pre-norm blocks at its own internal width, mean-pools over frames
and projects to the shared model width. Internal widths are deliberately
heterogeneous so expert size matters to the router's balance loss.

Frames carry no positional encoding by default (segments are short and
pooled), which makes the pooled output frame-permutation-invariant; a
sinusoidal encoding can be switched on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError
from .numerics import ParamTape, Tensor2

FFN_MULT = 2  # feed-forward hidden width = FFN_MULT * internal_width


@dataclass
class ExpertConfig:
    input_width: int
    internal_width: int
    layers: int = 8
    heads: int = 2
    common_width: int = 64
    positional_encoding: bool = False
    scaled_attention: bool = True

    def validate(self) -> None:
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.heads < 1 or self.internal_width % self.heads != 0:
            raise ConfigError(
                f"internal_width {self.internal_width} must divide by heads {self.heads}"
            )


@dataclass
class ExpertOutput:
    pooled: Tensor2  # 1 x common_width
    tokens: Tensor2  # F x internal_width (final frame states, for inspection)


def _w(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    return rng.normal(size=(out_dim, in_dim)) / math.sqrt(in_dim)


def init_expert_params(tape: ParamTape, prefix: str, cfg: ExpertConfig, rng: np.random.Generator) -> None:
    cfg.validate()
    d = cfg.internal_width
    tape.add_param(f"{prefix}/in_proj/w", _w(rng, d, cfg.input_width))
    tape.add_param(f"{prefix}/in_proj/b", np.zeros((1, d)))
    for layer in range(cfg.layers):
        p = f"{prefix}/layer{layer}"
        tape.add_param(f"{p}/ln1/g", np.ones((1, d)))
        tape.add_param(f"{p}/ln1/b", np.zeros((1, d)))
        for name in ("q", "k", "v", "o"):
            tape.add_param(f"{p}/attn/{name}/w", _w(rng, d, d))
            if name != "k":  # a key bias is inert under softmax attention
                tape.add_param(f"{p}/attn/{name}/b", np.zeros((1, d)))
        tape.add_param(f"{p}/ln2/g", np.ones((1, d)))
        tape.add_param(f"{p}/ln2/b", np.zeros((1, d)))
        hidden = FFN_MULT * d
        tape.add_param(f"{p}/ffn/w1", _w(rng, hidden, d))
        tape.add_param(f"{p}/ffn/b1", np.zeros((1, hidden)))
        tape.add_param(f"{p}/ffn/w2", _w(rng, d, hidden))
        tape.add_param(f"{p}/ffn/b2", np.zeros((1, d)))
    tape.add_param(f"{prefix}/out_proj/w", _w(rng, cfg.common_width, d))
    tape.add_param(f"{prefix}/out_proj/b", np.zeros((1, cfg.common_width)))
    tape.add_param(f"{prefix}/decoder/w", _w(rng, cfg.input_width, cfg.common_width))
    tape.add_param(f"{prefix}/decoder/b", np.zeros((1, cfg.input_width)))


def expert_param_names(tape: ParamTape, prefix: str) -> list[str]:
    return [name for name in tape.names() if name.startswith(prefix + "/")]


def sinusoidal_encoding(frames: int, width: int) -> np.ndarray:
    pe = np.zeros((frames, width))
    pos = np.arange(frames)[:, None].astype(np.float64)
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


def expert_forward(tape: ParamTape, prefix: str, cfg: ExpertConfig, x) -> ExpertOutput:
    """Frame features (F x input_width) -> pooled (1 x common_width)."""
    xt = x if isinstance(x, Tensor2) else nm.tensor(x)
    if xt.cols != cfg.input_width:
        raise DimensionError(
            f"{prefix}: input {xt.shape} vs expected width ({xt.rows}, {cfg.input_width})"
        )
    h = nm.linear(xt, tape[f"{prefix}/in_proj/w"], tape[f"{prefix}/in_proj/b"])
    if cfg.positional_encoding:
        h = nm.add(h, nm.tensor(sinusoidal_encoding(h.rows, h.cols)))
    head_dim = cfg.internal_width // cfg.heads
    for layer in range(cfg.layers):
        p = f"{prefix}/layer{layer}"
        a = nm.layer_norm(h, tape[f"{p}/ln1/g"], tape[f"{p}/ln1/b"])
        q = nm.linear(a, tape[f"{p}/attn/q/w"], tape[f"{p}/attn/q/b"])
        k = nm.linear(a, tape[f"{p}/attn/k/w"])
        v = nm.linear(a, tape[f"{p}/attn/v/w"], tape[f"{p}/attn/v/b"])
        heads = []
        for hd in range(cfg.heads):
            lo, hi = hd * head_dim, (hd + 1) * head_dim
            heads.append(
                nm.attention(
                    nm.slice_cols(q, lo, hi),
                    nm.slice_cols(k, lo, hi),
                    nm.slice_cols(v, lo, hi),
                    scaled=cfg.scaled_attention,
                )
            )
        mixed = heads[0] if cfg.heads == 1 else nm.concat_cols(heads)
        h = nm.add(h, nm.linear(mixed, tape[f"{p}/attn/o/w"], tape[f"{p}/attn/o/b"]))
        f = nm.layer_norm(h, tape[f"{p}/ln2/g"], tape[f"{p}/ln2/b"])
        ff = nm.linear(
            nm.gelu(nm.linear(f, tape[f"{p}/ffn/w1"], tape[f"{p}/ffn/b1"])),
            tape[f"{p}/ffn/w2"],
            tape[f"{p}/ffn/b2"],
        )
        h = nm.add(h, ff)
    pooled = nm.linear(
        nm.mean_rows(h), tape[f"{prefix}/out_proj/w"], tape[f"{prefix}/out_proj/b"]
    )
    return ExpertOutput(pooled=pooled, tokens=h)


def scene_decoder(tape: ParamTape, prefix: str, pooled: Tensor2) -> Tensor2:
    """Linear head reconstructing the channel summary from the pooled state."""
    return nm.linear(pooled, tape[f"{prefix}/decoder/w"], tape[f"{prefix}/decoder/b"])


def reconstruction_target(x: np.ndarray) -> np.ndarray:
    """Stage-1 target: the frame-mean of the channel's own features."""
    return x.mean(axis=0, keepdims=True)


def parameter_count(tape: ParamTape, prefix: str) -> int:
    return sum(tape[name].data.size for name in expert_param_names(tape, prefix))
