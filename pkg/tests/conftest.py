import pytest
import torch

from doppel.backbone import BackboneConfig
from doppel.encoder import EncoderConfig
from doppel.model import build_model
from doppel.toydata import make_toy_dataset

torch.set_num_threads(4)


def small_backbone_config(**kwargs) -> BackboneConfig:
    base = dict(input_size=32, patch_size=16, output_dim=24, projection_seed=0)
    base.update(kwargs)
    return BackboneConfig.toy(**base)


def small_encoder_config(**kwargs) -> EncoderConfig:
    base = dict(embed_dim=32, n_heads=4, input_dim=24, mlp_ratio=2.0)
    base.update(kwargs)
    return EncoderConfig(**base)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    return make_toy_dataset(out, n_scenes=2, seed=7)


@pytest.fixture(scope="session")
def toy_dataset_dir(toy_dataset):
    # manifest lives next to the generated images
    return next(iter(toy_dataset.scenes[0].objects[0].views)).image_ref.parents[2]


@pytest.fixture()
def small_model():
    torch.manual_seed(0)
    return build_model(small_backbone_config(), small_encoder_config())
