import numpy as np
import pytest

from scenemoe import synthgen as sg
from scenemoe import trainer as tr


def smoke_generator_config(**kw):
    """Small, clean, separable dataset for trainer smoke tests."""
    base = dict(
        mode="explicit",
        num_videos=64,
        segments_per_video=4,
        frames_per_segment=2,
        channel_widths=(8, 10, 6, 12),
        confounder_strength=0.0,
        contradiction_rate=0.0,
        noise_sigma=0.4,
        seed=5,
    )
    base.update(kw)
    return sg.GeneratorConfig(**base)


def smoke_model_config(dataset, **kw):
    base = dict(
        class_names=tuple(dataset.class_names),
        channel_widths=tuple(dataset.channel_widths),
        internal_widths=(8, 12, 4, 16),
        layers=1,
        heads=2,
        d_model=16,
        dict_size=8,
    )
    base.update(kw)
    return tr.ModelConfig(**base)


def smoke_train_config(**kw):
    base = dict(lr=3e-3, warmup_ratio=0.03, epochs=3, batch_size=8, alpha=1e-4, beta=1e-2, seed=0)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="session")
def smoke_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke") / "data"
    sg.generate_dataset(smoke_generator_config(), out)
    return sg.load_dataset(out, "train"), sg.load_dataset(out, "test"), out


@pytest.fixture(scope="session")
def trained_smoke_model(smoke_dataset):
    train, _, _ = smoke_dataset
    cfg = smoke_train_config()
    model, records = tr.train_pipeline(train, smoke_model_config(train), cfg)
    return model, records, cfg
