"""Soft scene routing and the balance-regularized router loss.

The router scores the mean of the four expert outputs (stop-gradient, so
both the task loss and the balance loss reach the router weights only
through the gating probabilities, never the experts through this path)
and the combination layer-normalizes the probability-weighted sum.

The balance loss is two terms: gating entropy scaled by `alpha`
(minimizing it sharpens routing) and `beta * L * sum_j G_j * H_j`, where
H_j is the batch-mean gate mass on expert j and G_j is that expert's
internal width normalized by the widest expert, which taxes routing mass
parked on large experts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError
from .numerics import ParamTape, Tensor2

NUM_EXPERTS = 4


@dataclass
class BalanceLossConfig:
    alpha: float = 1e-4
    beta: float = 1e-2
    expert_widths: tuple[int, ...] = (32, 48, 24, 64)
    sizes: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha/beta must be >= 0, got {self.alpha}, {self.beta}")
        widths = np.asarray(self.expert_widths, dtype=np.float64)
        if widths.size == 0 or (widths <= 0).any():
            raise ConfigError(f"expert widths must be positive, got {self.expert_widths}")
        self.sizes = widths / widths.max()


def init_router_params(tape: ParamTape, d_model: int, num_experts: int = NUM_EXPERTS) -> None:
    # zero init: training starts from uniform gates
    tape.add_param("router/w", np.zeros((num_experts, d_model)))


def gate(tape: ParamTape, expert_outputs: list[Tensor2]) -> Tensor2:
    """Gating probabilities (1 x L) from the mean of the expert outputs."""
    if len(expert_outputs) != tape["router/w"].rows:
        raise DimensionError(
            f"gate: got {len(expert_outputs)} expert outputs for router {tape['router/w'].shape}"
        )
    h = nm.stop_gradient(nm.mean_rows(nm.stack_rows(expert_outputs)))
    logits = nm.linear(h, tape["router/w"])
    return nm.softmax(logits)


def combine(
    expert_outputs: list[Tensor2],
    probs: Tensor2,
    gamma: Tensor2 | None = None,
    beta: Tensor2 | None = None,
) -> Tensor2:
    """LayerNorm of the probability-weighted expert sum (non-affine by default)."""
    if probs.cols != len(expert_outputs):
        raise DimensionError(
            f"combine: {len(expert_outputs)} expert outputs vs gating {probs.shape}"
        )
    weighted = nm.matmul(probs, nm.stack_rows(expert_outputs))
    return nm.layer_norm(weighted, gamma, beta)


def router_balance_loss(probs_batch: Tensor2, config: BalanceLossConfig) -> tuple[Tensor2, Tensor2]:
    """(entropy term, size term), each (1 x 1); their sum is the router loss.

    entropy term = alpha * mean_over_batch(-sum_j P_j log P_j)
    size term    = beta * L * sum_j G_j * H_j,  H_j = batch mean of P_j
    """
    b, l = probs_batch.shape
    if config.sizes.size != l:
        raise DimensionError(
            f"balance loss: {l} experts vs {config.sizes.size} size entries"
        )
    entropy = nm.scale(nm.sum_all(nm.xlogx(probs_batch)), -config.alpha / b)
    size_term = nm.scale(
        nm.sum_all(nm.mul_const(probs_batch, config.sizes.reshape(1, l))),
        config.beta * l / b,
    )
    return entropy, size_term
