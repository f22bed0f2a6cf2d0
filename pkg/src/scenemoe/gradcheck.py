"""Randomized finite-difference sweep over full-model configurations.

Each configuration builds a small random model (random widths, depths,
class count, scaling flag), a random dictionary and a two-segment batch,
then checks the analytic gradient of the combined loss (class + cause
cross-entropy, router balance terms, and a reconstruction term so the
decoders carry live gradients) against central differences for every
parameter group. A `grad_hook` lets tests corrupt the analytic side to
prove detection works.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nm
from .errors import ConfigError
from .experts import reconstruction_target, scene_decoder
from .iec import DictionaryProvenance, GlobalDictionary
from .sbm import BalanceLossConfig, router_balance_loss
from .synthgen import CHANNELS, SceneFeatureBundle
from .trainer import ModelConfig, build_model, forward_full


@dataclass
class SuiteReport:
    tolerance: float
    entries: list[tuple[str, str, float]] = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max((e[2] for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def failing(self) -> list[tuple[str, str, float]]:
        return [e for e in self.entries if e[2] >= self.tolerance]

    def lines(self) -> list[str]:
        out = []
        for config, group, err in self.entries:
            status = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{config:<10} {group:<40} {err:.3e} {status}")
        return out


def _random_bundle(rng: np.random.Generator, widths, frames: int) -> SceneFeatureBundle:
    mats = [rng.normal(size=(frames, w)) for w in widths]
    return SceneFeatureBundle(*mats)


def run_gradcheck_suite(
    n_configs: int = 50,
    tolerance: float = 1e-4,
    seed: int = 0,
    max_per_param: int = 3,
    grad_hook: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> SuiteReport:
    if n_configs < 1:
        raise ConfigError(f"n_configs must be >= 1, got {n_configs}")
    report = SuiteReport(tolerance=tolerance)
    started = time.monotonic()
    for ci in range(n_configs):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 707, ci)))
        widths = tuple(int(rng.integers(3, 7)) for _ in range(4))
        internal = tuple(2 * int(rng.integers(1, 4)) for _ in range(4))
        d_model = int(rng.integers(4, 9))
        frames = int(rng.integers(1, 4))
        n_classes = int(rng.integers(2, 5))
        config = ModelConfig(
            class_names=("bg",) + tuple(f"c{j}" for j in range(n_classes - 1)),
            channel_widths=widths,
            internal_widths=internal,
            layers=int(rng.integers(1, 3)),
            heads=2,
            d_model=d_model,
            dict_size=3,
            scaled_attention=bool(rng.integers(0, 2)),
            affine_combine=bool(rng.integers(0, 2)),
        )
        model = build_model(config, seed=ci)
        model.dictionary = GlobalDictionary(
            centroids=rng.normal(size=(3, d_model)),
            provenance=DictionaryProvenance("gradcheck", ci, 0, 0.0),
        )
        n_bundles = 2 if ci % 5 == 0 else 1  # a batch axis sometimes, speed mostly
        bundles = [_random_bundle(rng, widths, frames) for _ in range(n_bundles)]
        labels = [int(rng.integers(0, n_classes)) for _ in bundles]
        cause_labels = [int(rng.integers(0, 4)) for _ in bundles]
        balance = BalanceLossConfig(
            alpha=float(rng.uniform(1e-4, 1e-2)),
            beta=float(rng.uniform(1e-4, 1e-2)),
            expert_widths=internal,
        )
        recon_channel = CHANNELS[int(rng.integers(0, 4))]

        def f():
            cls_rows, cause_rows, prob_rows = [], [], []
            for bundle in bundles:
                fr = forward_full(model, bundle, "full")
                cls_rows.append(fr.class_logits)
                cause_rows.append(fr.cause_logits)
                prob_rows.append(fr.probs)
            loss = nm.add(
                nm.cross_entropy(nm.stack_rows(cls_rows), labels),
                nm.cross_entropy(nm.stack_rows(cause_rows), cause_labels),
            )
            entropy, size = router_balance_loss(nm.stack_rows(prob_rows), balance)
            loss = nm.add(loss, nm.add(entropy, size))
            # reconstruction term keeps decoder gradients live
            mats = bundles[0].by_channel()
            from .experts import expert_forward

            out = expert_forward(
                model.tape,
                f"expert_{recon_channel}",
                config.expert_config(recon_channel),
                mats[recon_channel],
            )
            pred = scene_decoder(model.tape, f"expert_{recon_channel}", out.pooled)
            recon = nm.mse(pred, reconstruction_target(mats[recon_channel]))
            return nm.add(loss, nm.scale(recon, 0.5))

        params = [(name, model.tape[name]) for name in model.tape.names()]
        result = nm.finite_diff_check(
            f,
            params,
            max_per_param=max_per_param,
            rng=np.random.default_rng(np.random.SeedSequence((seed, 808, ci))),
            grad_hook=grad_hook,
        )
        label = f"config{ci:03d}"
        for name, err in result.per_param.items():
            report.entries.append((label, name, err))
    report.elapsed_s = time.monotonic() - started
    return report
