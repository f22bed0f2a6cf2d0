"""Model assembly, two-stage optimization, interval decoding, checkpoints.

Stage 1 (scene tuning) trains each expert plus its reconstruction decoder
to summarize its own channel; router, causal block and task head are
untouched. The global dictionary is then built from the tuned embeddings,
and stage 2 minimizes task cross-entropy (class + cause channel) plus the
router balance loss on everything at once.

Ablation switches: `no_sbm` replaces the learned gating by a uniform
average and drops the balance loss, `no_iec` drops the causal-block output
from the fused representation, `no_scene_tuning` skips stage 1. The task
head replaces a language-model backbone at desk scale, so the class and
cause cross-entropies stand in for a token loss; the loss keeps the shape
task-term-plus-router-term.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nm
from .errors import (
    CheckpointVersionError,
    ConfigError,
    DataError,
    StateError,
    TrainingDiverged,
)
from .experts import (
    ExpertConfig,
    expert_forward,
    expert_param_names,
    init_expert_params,
    reconstruction_target,
    scene_decoder,
)
from .fsio import atomic_write_bytes
from .iec import GlobalDictionary, iec_forward, init_iec_params, rebuild_dictionary
from .numerics import ParamTape, Tensor2, adamw_step
from .sbm import BalanceLossConfig, NUM_EXPERTS, combine, gate, init_router_params
from .synthgen import CHANNELS, Dataset, SceneFeatureBundle, VideoSample, render_cause_text

ABLATIONS = ("full", "no_sbm", "no_iec", "no_scene_tuning")

CHECKPOINT_MAGIC = b"SCMOE\x00CK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    class_names: tuple[str, ...]
    channel_widths: tuple[int, int, int, int]
    internal_widths: tuple[int, int, int, int] = (32, 48, 24, 64)
    layers: int = 8
    heads: int = 2
    d_model: int = 64
    dict_size: int = 32
    scaled_attention: bool = True
    positional_encoding: bool = False
    iec_activation: str = "gelu"
    affine_combine: bool = False

    def validate(self) -> None:
        if len(self.class_names) < 2:
            raise ConfigError("need at least two classes")
        if self.dict_size < 2:
            raise ConfigError(f"dict_size must be >= 2, got {self.dict_size}")
        for ch in CHANNELS:
            self.expert_config(ch).validate()

    def expert_config(self, channel: str) -> ExpertConfig:
        idx = CHANNELS.index(channel)
        return ExpertConfig(
            input_width=self.channel_widths[idx],
            internal_width=self.internal_widths[idx],
            layers=self.layers,
            heads=self.heads,
            common_width=self.d_model,
            positional_encoding=self.positional_encoding,
            scaled_attention=self.scaled_attention,
        )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup_ratio: float = 0.03
    epochs: int = 3
    batch_size: int = 8
    alpha: float = 1e-4
    beta: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0
    ablation: str = "full"
    stage1_epochs: int | None = None
    # gentler stage-2 updates for the scene-tuned experts: standard
    # discriminative fine-tuning, 1.0 = uniform rate everywhere
    stage2_expert_lr_scale: float = 1.0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.stage2_expert_lr_scale <= 1.0:
            raise ConfigError(
                f"stage2_expert_lr_scale must be in [0, 1], got {self.stage2_expert_lr_scale}"
            )
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")


@dataclass
class ModelState:
    config: ModelConfig
    tape: ParamTape
    dictionary: GlobalDictionary | None = None
    flags: dict = field(default_factory=dict)


@dataclass
class PredictionTriple:
    start_s: float
    end_s: float
    class_name: str
    cause_channel: str
    cause_text: str
    class_claim: str
    confidence: float

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise DataError(f"triple interval empty: [{self.start_s}, {self.end_s})")
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class ForwardResult:
    class_logits: Tensor2  # 1 x C
    cause_logits: Tensor2  # 1 x 4
    probs: Tensor2  # 1 x L gating distribution (uniform constant under no_sbm)


def clone_model(model: ModelState) -> ModelState:
    """Independent copy of parameters, optimizer state and flags.

    The config is shared (immutable in practice); the dictionary is shared
    too since centroids are constants during training.
    """
    tape = ParamTape()
    for name, t in model.tape.items():
        tape.add_param(name, t.data.copy())
        m, v = model.tape.optimizer_state(name)
        tape._m[name] = m.copy()
        tape._v[name] = v.copy()
    tape.step_count = model.tape.step_count
    return ModelState(
        config=model.config,
        tape=tape,
        dictionary=model.dictionary,
        flags=dict(model.flags),
    )


def build_model(config: ModelConfig, seed: int) -> ModelState:
    config.validate()
    tape = ParamTape()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 303)))
    for channel in CHANNELS:
        init_expert_params(tape, f"expert_{channel}", config.expert_config(channel), rng)
    init_router_params(tape, config.d_model)
    init_iec_params(tape, config.d_model, rng)
    if config.affine_combine:
        tape.add_param("combine/g", np.ones((1, config.d_model)))
        tape.add_param("combine/b", np.zeros((1, config.d_model)))
    tape.add_param("head/class/w", rng.normal(size=(config.num_classes, config.d_model)) / np.sqrt(config.d_model))
    tape.add_param("head/class/b", np.zeros((1, config.num_classes)))
    tape.add_param("head/cause/w", rng.normal(size=(len(CHANNELS), config.d_model)) / np.sqrt(config.d_model))
    tape.add_param("head/cause/b", np.zeros((1, len(CHANNELS))))
    flags = {"scene_tuned": False, "scene_tuning_skipped": False, "stage2_done": False, "ablation": "full"}
    return ModelState(config=config, tape=tape, flags=flags)


def expert_outputs(model: ModelState, bundle: SceneFeatureBundle) -> list[Tensor2]:
    mats = bundle.by_channel()
    return [
        expert_forward(model.tape, f"expert_{ch}", model.config.expert_config(ch), mats[ch]).pooled
        for ch in CHANNELS
    ]


def scene_tokens(model: ModelState, bundle: SceneFeatureBundle) -> Tensor2:
    """The four projected expert outputs stacked as one (4 x d_model) token set."""
    return nm.stack_rows(expert_outputs(model, bundle))


def parse_ablation(spec: str) -> frozenset[str]:
    """'full' or '+'-joined switches, e.g. 'no_sbm' or 'no_sbm+no_iec'."""
    tokens = frozenset(spec.split("+"))
    if tokens == {"full"}:
        return frozenset()
    if "full" in tokens or not tokens <= set(ABLATIONS[1:]):
        raise ConfigError(f"unknown ablation {spec!r}; use 'full' or '+'-joined {ABLATIONS[1:]}")
    return tokens


def forward_full(model: ModelState, bundle: SceneFeatureBundle, ablation: str = "full") -> ForwardResult:
    switches = parse_ablation(ablation)
    tape = model.tape
    outs = expert_outputs(model, bundle)
    if "no_sbm" in switches:
        y_moe = nm.layer_norm(nm.mean_rows(nm.stack_rows(outs)))
        probs = nm.tensor(np.full((1, NUM_EXPERTS), 1.0 / NUM_EXPERTS))
    else:
        probs = gate(tape, outs)
        gamma = tape["combine/g"] if model.config.affine_combine else None
        beta = tape["combine/b"] if model.config.affine_combine else None
        y_moe = combine(outs, probs, gamma, beta)
    if "no_iec" in switches:
        fused = y_moe
    else:
        if model.dictionary is None:
            raise StateError(
                "global dictionary missing: build it (stage-1 then dictionary step) before the full forward pass"
            )
        y_iec = iec_forward(
            tape,
            nm.stack_rows(outs),
            model.dictionary,
            scaled=model.config.scaled_attention,
            activation=model.config.iec_activation,
        )
        fused = nm.add(y_moe, y_iec)
    z = nm.layer_norm(fused)
    return ForwardResult(
        class_logits=nm.linear(z, tape["head/class/w"], tape["head/class/b"]),
        cause_logits=nm.linear(z, tape["head/cause/w"], tape["head/cause/b"]),
        probs=probs,
    )


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def stage1_scene_tuning(
    model: ModelState, dataset: Dataset, cfg: TrainConfig, log: Callable[[dict], None] | None = None
) -> list[dict]:
    """Train experts + decoders on channel reconstruction; everything else untouched."""
    cfg.validate()
    if tuple(dataset.channel_widths) != tuple(model.config.channel_widths):
        raise ConfigError(
            f"dataset widths {dataset.channel_widths} vs model widths {model.config.channel_widths}"
        )
    if cfg.ablation == "no_scene_tuning":
        model.flags["scene_tuning_skipped"] = True
        model.flags["ablation"] = cfg.ablation
        return []
    epochs = cfg.epochs if cfg.stage1_epochs is None else cfg.stage1_epochs
    segments = [seg for _, seg in dataset.all_segments()]
    param_names = [n for ch in CHANNELS for n in expert_param_names(model.tape, f"expert_{ch}")]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 404)))
    n_batches_per_epoch = max(1, (len(segments) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = max(1, epochs * n_batches_per_epoch)
    model.tape.reset_optimizer()
    records = []
    step = 0
    for epoch in range(epochs):
        epoch_losses = []
        for batch in _batches(len(segments), cfg.batch_size, rng):
            terms = []
            for si in batch:
                seg = segments[si]
                mats = seg.bundle.by_channel()
                for ch in CHANNELS:
                    out = expert_forward(
                        model.tape, f"expert_{ch}", model.config.expert_config(ch), mats[ch]
                    )
                    pred = scene_decoder(model.tape, f"expert_{ch}", out.pooled)
                    terms.append(nm.mse(pred, reconstruction_target(mats[ch])))
            loss = nm.scale(_sum_terms(terms), 1.0 / len(batch))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"stage-1 loss became {value} at step {step}")
            model.tape.zero_grad()
            loss.backward()
            adamw_step(
                model.tape, cfg.lr, cfg.warmup_ratio, cfg.weight_decay, step, total_steps, param_names
            )
            epoch_losses.append(value)
            step += 1
        record = {"stage": 1, "epoch": epoch, "loss": float(np.mean(epoch_losses))}
        records.append(record)
        if log:
            log(record)
    model.flags["scene_tuned"] = epochs > 0
    model.flags["ablation"] = cfg.ablation
    return records


def _sum_terms(terms: list[Tensor2]) -> Tensor2:
    total = terms[0]
    for t in terms[1:]:
        total = nm.add(total, t)
    return total


def build_dictionary(model: ModelState, dataset: Dataset, seed: int) -> GlobalDictionary:
    model.dictionary = rebuild_dictionary(model, dataset, model.config.dict_size, seed)
    return model.dictionary


def stage2_omni_tuning(
    model: ModelState, dataset: Dataset, cfg: TrainConfig, log: Callable[[dict], None] | None = None
) -> list[dict]:
    """Minimize task loss + router balance loss over the whole model."""
    cfg.validate()
    if tuple(dataset.class_names) != tuple(model.config.class_names):
        raise ConfigError(
            f"dataset classes {dataset.class_names} vs model classes {model.config.class_names}"
        )
    ablation = cfg.ablation
    switches = parse_ablation(ablation)
    if "no_iec" not in switches and model.dictionary is None:
        raise StateError("stage-2 needs the global dictionary unless the causal block is ablated")
    balance = BalanceLossConfig(cfg.alpha, cfg.beta, model.config.internal_widths)
    segments = dataset.all_segments()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 505)))
    n_batches_per_epoch = max(1, (len(segments) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = max(1, cfg.epochs * n_batches_per_epoch)
    model.tape.reset_optimizer()
    records = []
    step = 0
    bg = dataset.background_class
    for epoch in range(cfg.epochs):
        epoch_task, epoch_rb, epoch_acc = [], [], []
        for batch in _batches(len(segments), cfg.batch_size, rng):
            cls_rows, cls_labels = [], []
            cause_rows, cause_labels = [], []
            prob_rows = []
            for si in batch:
                _, seg = segments[si]
                fr = forward_full(model, seg.bundle, ablation)
                cls_rows.append(fr.class_logits)
                cls_labels.append(dataset.class_index(seg.class_name))
                prob_rows.append(fr.probs)
                if seg.class_name != bg:
                    cause_rows.append(fr.cause_logits)
                    cause_labels.append(CHANNELS.index(seg.cause_channel))
            class_ce = nm.cross_entropy(nm.stack_rows(cls_rows), cls_labels)
            if cause_rows:
                l_task = nm.add(class_ce, nm.cross_entropy(nm.stack_rows(cause_rows), cause_labels))
            else:
                l_task = class_ce
            probs_batch = nm.stack_rows(prob_rows)
            if "no_sbm" in switches:
                l_rb = nm.tensor([[0.0]])
            else:
                entropy_term, size_term = router_balance_terms(probs_batch, balance)
                l_rb = nm.add(entropy_term, size_term)
            loss = nm.add(l_task, l_rb)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"stage-2 loss became {value} at step {step} (epoch {epoch}, ablation {ablation})"
                )
            model.tape.zero_grad()
            loss.backward()
            scale = cfg.stage2_expert_lr_scale
            adamw_step(
                model.tape,
                cfg.lr,
                cfg.warmup_ratio,
                cfg.weight_decay,
                step,
                total_steps,
                lr_scale=None if scale == 1.0 else (lambda n: scale if n.startswith("expert_") else 1.0),
            )
            p = probs_batch.data
            gate_entropy = float(-(p * np.log(np.maximum(p, 1e-300))).sum(axis=1).mean())
            pred = np.argmax(nm.stack_rows(cls_rows).data, axis=1)
            record = {
                "stage": 2,
                "step": step,
                "epoch": epoch,
                "l_task": float(l_task.item()),
                "l_rb": float(l_rb.item()),
                "loss": value,
                "gate_entropy": gate_entropy,
                "gate_mean": [float(x) for x in p.mean(axis=0)],
            }
            records.append(record)
            if log:
                log(record)
            epoch_task.append(record["l_task"])
            epoch_rb.append(record["l_rb"])
            epoch_acc.append(float((pred == np.array(cls_labels)).mean()))
            step += 1
        summary = {
            "stage": 2,
            "epoch_summary": epoch,
            "l_task": float(np.mean(epoch_task)),
            "l_rb": float(np.mean(epoch_rb)),
            "train_acc": float(np.mean(epoch_acc)),
        }
        records.append(summary)
        if log:
            log(summary)
    model.flags["stage2_done"] = cfg.epochs > 0
    model.flags["ablation"] = ablation
    return records


def router_balance_terms(probs_batch: Tensor2, balance: BalanceLossConfig):
    from .sbm import router_balance_loss

    return router_balance_loss(probs_batch, balance)


def predict_triples(
    model: ModelState, video: VideoSample, segment_seconds: float = 1.0, ablation: str | None = None
) -> list[PredictionTriple]:
    """Argmax segment classes, merged into intervals with mean confidences."""
    ablation = model.flags.get("ablation", "full") if ablation is None else ablation
    names = model.config.class_names
    per_segment = []
    for seg in video.segments:
        fr = forward_full(model, seg.bundle, ablation)
        logits = fr.class_logits.data[0]
        shifted = np.exp(logits - logits.max())
        probs = shifted / shifted.sum()
        per_segment.append((int(np.argmax(logits)), probs, fr.cause_logits.data[0]))
    triples = []
    start = 0
    n = len(per_segment)
    for i in range(1, n + 1):
        if i == n or per_segment[i][0] != per_segment[start][0]:
            cid = per_segment[start][0]
            if cid != 0:
                run = per_segment[start:i]
                confidence = float(np.mean([p[cid] for _, p, _ in run]))
                cause_mean = np.mean([c for _, _, c in run], axis=0)
                channel = CHANNELS[int(np.argmax(cause_mean))]
                name = names[cid]
                triples.append(
                    PredictionTriple(
                        start_s=start * segment_seconds,
                        end_s=i * segment_seconds,
                        class_name=name,
                        cause_channel=channel,
                        cause_text=render_cause_text(name, channel, 0),
                        class_claim=name,
                        confidence=confidence,
                    )
                )
            start = i
    return triples


def _config_to_jsonable(config: ModelConfig) -> dict:
    raw = asdict(config)
    raw["class_names"] = list(config.class_names)
    raw["channel_widths"] = list(config.channel_widths)
    raw["internal_widths"] = list(config.internal_widths)
    return raw


def _config_from_jsonable(raw: dict) -> ModelConfig:
    raw = dict(raw)
    raw["class_names"] = tuple(raw["class_names"])
    raw["channel_widths"] = tuple(raw["channel_widths"])
    raw["internal_widths"] = tuple(raw["internal_widths"])
    return ModelConfig(**raw)


def save_checkpoint(model: ModelState, path: Path) -> None:
    """Versioned container: magic, version, JSON header, raw float64 payload.

    Payload order: every parameter's values, then first moments, then
    second moments, all little-endian float64 in header order.
    """
    tape = model.tape
    names = tape.names()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": _config_to_jsonable(model.config),
        "flags": model.flags,
        "params": [
            {"name": n, "rows": tape[n].rows, "cols": tape[n].cols} for n in names
        ],
        "optimizer": {"step_count": tape.step_count},
        "dictionary": model.dictionary.to_dict() if model.dictionary is not None else None,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<Q", len(header_bytes)), header_bytes]
    for n in names:
        chunks.append(np.ascontiguousarray(tape[n].data, dtype="<f8").tobytes())
    for store in (tape._m, tape._v):
        for n in names:
            chunks.append(np.ascontiguousarray(store[n], dtype="<f8").tobytes())
    atomic_write_bytes(Path(path), b"".join(chunks))


def load_checkpoint(path: Path) -> ModelState:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 12 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version} is incompatible with {CHECKPOINT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if off + header_len > len(raw):
        raise DataError(f"{path}: checkpoint truncated in header")
    header = json.loads(raw[off : off + header_len].decode("utf-8"))
    off += header_len
    config = _config_from_jsonable(header["model_config"])
    tape = ParamTape()
    specs = header["params"]
    expected = sum(p["rows"] * p["cols"] for p in specs) * 8 * 3
    if off + expected != len(raw):
        raise DataError(
            f"{path}: checkpoint truncated (payload {len(raw) - off} bytes, expected {expected})"
        )

    def take(rows, cols):
        nonlocal off
        count = rows * cols
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(rows, cols).copy()
        off += count * 8
        return arr

    for p in specs:
        tape.add_param(p["name"], take(p["rows"], p["cols"]))
    for store in (tape._m, tape._v):
        for p in specs:
            store[p["name"]] = take(p["rows"], p["cols"])
    tape.step_count = header["optimizer"]["step_count"]
    dictionary = (
        GlobalDictionary.from_dict(header["dictionary"]) if header["dictionary"] is not None else None
    )
    return ModelState(config=config, tape=tape, dictionary=dictionary, flags=header["flags"])


def train_pipeline(
    dataset: Dataset,
    model_config: ModelConfig,
    cfg: TrainConfig,
    log: Callable[[dict], None] | None = None,
    stage1_model: ModelState | None = None,
) -> tuple[ModelState, list[dict]]:
    """Stage 1, dictionary build, stage 2, in the enforced order.

    `stage1_model` lets callers reuse an already scene-tuned model (the
    ablation sweep shares one per seed); it is deep-copied via checkpoint
    round-trip semantics by the caller, not here.
    """
    records: list[dict] = []
    if stage1_model is None:
        model = build_model(model_config, cfg.seed)
        records.extend(stage1_scene_tuning(model, dataset, cfg, log))
    else:
        model = stage1_model
        model.flags["ablation"] = cfg.ablation
        if cfg.ablation == "no_scene_tuning":
            raise ConfigError("no_scene_tuning cannot reuse a scene-tuned model")
    if "no_iec" not in parse_ablation(cfg.ablation) and model.dictionary is None:
        build_dictionary(model, dataset, cfg.seed)
    records.extend(stage2_omni_tuning(model, dataset, cfg, log))
    return model, records
