import pytest
import torch

from vesseltrainer.config import TrainerConfig
from vesseltrainer.networks import Generator
from vesseltrainer.sampling import load_cases
from vesseltrainer.train import load_generator, save_checkpoint, train_stage


def test_defaults_match_published_hyperparameters():
    cfg = TrainerConfig()
    assert cfg.lr == 2e-4
    assert cfg.beta1 == 0.5
    assert cfg.beta2 == 0.999
    assert cfg.batch_size == 2
    assert cfg.cycle_lambda == 10.0


def test_validation_rejects_bad_betas():
    with pytest.raises(ValueError, match="beta"):
        TrainerConfig(beta1=0.9, beta2=0.5).validate()
    with pytest.raises(ValueError, match="lr"):
        TrainerConfig(lr=0.0).validate()
    with pytest.raises(ValueError, match="stage1_patch"):
        TrainerConfig(stage1_patch=10).validate()
    with pytest.raises(ValueError, match="does not fit"):
        TrainerConfig(stage1_patch=64).validate(case_dims=(48, 48, 48))


def test_content_hash_stable_and_sensitive():
    a = TrainerConfig(seed=1)
    b = TrainerConfig(seed=1)
    c = TrainerConfig(seed=2)
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != c.content_hash()


def test_zero_epochs_checkpoint_equals_initialization(tmp_path, cohort_manifest):
    cases = load_cases(cohort_manifest)
    cfg = TrainerConfig(epochs=0, base_channels=4, seed=3)
    gen_fwd, gen_bwd, history = train_stage(cases, 1, cfg)
    assert history == []
    ckpt = tmp_path / "s1.pt"
    save_checkpoint(ckpt, 1, gen_fwd, gen_bwd, cfg)
    loaded, blob = load_generator(ckpt)
    assert blob["config_hash"] == cfg.content_hash()

    torch.manual_seed(cfg.seed * 1000 + 1)
    fresh = Generator(cfg.base_channels)
    for key, tensor in fresh.state_dict().items():
        assert torch.equal(tensor, loaded.state_dict()[key])
