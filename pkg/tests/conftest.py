import pytest

from fewshot_lab.backbones import BackboneConfig
from fewshot_lab.harness import TrainConfig, train
from fewshot_lab.omniglot import ingest, split_classes
from fewshot_lab.synth import generate_glyph_tree


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Learnable synthetic glyph tree: 3 alphabets x 12 chars x 20 pages."""
    root = tmp_path_factory.mktemp("synth") / "glyphs"
    generate_glyph_tree(root, n_alphabets=3, chars_per_alphabet=12,
                        exemplars=20, seed=5)
    return root


@pytest.fixture(scope="session")
def synth_split(synth_root):
    """24 train base classes (augmented to 96) / 12 held-out test classes."""
    return split_classes(ingest(synth_root), n_train=24)


def make_config(root, out, **overrides):
    cfg = TrainConfig(
        backbone=BackboneConfig(kind="unet", width=1),
        total_steps=50, eval_interval=25, eval_episodes=50,
        data_root=str(root), data_n_train=24,
        out_dir=str(out), clock="fixed", seed=0)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture(scope="session")
def smoke_run(synth_root, tmp_path_factory):
    """One 500-step training run shared by the learning-behavior tests."""
    out = tmp_path_factory.mktemp("smoke_run")
    cfg = make_config(synth_root, out, total_steps=500,
                      eval_interval=100, eval_episodes=100)
    result = train(cfg)
    return cfg, result
