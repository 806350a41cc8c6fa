import numpy as np
import pytest
import torch

from fsvlm.corpus import SlidePatch, build_prompts, load_patches
from fsvlm.synthetic import DEFAULT_CLASSES, make_synthetic_dataset
from fsvlm.toy import build_toy_backbone

# tiny tensors run much faster (and reproducibly) single-threaded
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    """Shared synthetic corpus: (manifest, split, patches_dir)."""
    root = tmp_path_factory.mktemp("synthetic")
    return make_synthetic_dataset(root)


@pytest.fixture(scope="session")
def toy_model():
    return build_toy_backbone()


@pytest.fixture()
def fresh_toy():
    return build_toy_backbone()


@pytest.fixture(scope="session")
def default_prompts():
    return build_prompts(list(DEFAULT_CLASSES))


def make_patch(label: str, seed: int = 0, side: int = 48, wsi: str = "w0") -> SlidePatch:
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(side, side, 3), dtype=np.int64).astype(np.uint8)
    return SlidePatch(wsi_id=wsi, glom_id=f"g{seed}", label=label, pixels=pixels, source_bbox=(0, 0, side, side))


@pytest.fixture(scope="session")
def val_split_patches(synthetic_dataset):
    manifest, split, patches_dir = synthetic_dataset
    from fsvlm.sampler import validation_ids

    ids = validation_ids(manifest, split)
    return load_patches(manifest, ids, root=patches_dir)
