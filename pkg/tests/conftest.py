import numpy as np
import pytest

from physpan import dataset as ds
from physpan import microworld as mw
from physpan.pipeline import RunConfig
from physpan.dataset import Sample
from physpan.rng import derive


def tiny_run_config(**overrides) -> RunConfig:
    """A configuration small enough for fast end-to-end tests."""
    base = dict(horizon=6, spans=2, image_dim=6, query_dim=4, context_dim=4,
                embed_dim=2, conv_width=4, time_bins=2,
                sim_enc_widths=(4, 4, 4, 8), sim_latent=8, sim_hidden=4,
                epochs=2, batch_size=2)
    base.update(overrides)
    return RunConfig(**base)


def fake_sample(resolution=8, m_input=3, horizon=6, seed=0, label=1,
                query=(1, 2, 1)) -> Sample:
    r = np.random.default_rng(seed)
    return Sample(
        scene_id=f"fake_{seed}", object_id=1, query=query,
        input_frames=r.random((m_input, 3, resolution, resolution), dtype=np.float32),
        input_masks=(r.random((m_input, resolution, resolution)) > 0.8).astype(np.float32),
        target_frames=r.random((horizon, 3, resolution, resolution), dtype=np.float32),
        label=label)


@pytest.fixture(scope="session")
def tiny_world() -> mw.WorldConfig:
    return mw.WorldConfig(resolution=16)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_world):
    """Eight 16x16 contact scenes with splits, written once per session."""
    root = tmp_path_factory.mktemp("tiny_contact")
    episodes = mw.generate_balanced_episodes("contact", 8, derive(99, 1), tiny_world)
    manifest = ds.write_dataset(episodes, root, "contact", 99, tiny_world)
    ds.split_dataset(manifest, 99)
    ds.save_manifest(manifest)
    return manifest


@pytest.fixture()
def tiny_manifest(tiny_dataset):
    return ds.load_manifest(tiny_dataset.root)
