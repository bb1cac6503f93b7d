import pytest

from pressure_motion.config import ConfigError, RunConfig, desk_config


def test_defaults_follow_reference_hyperparameters():
    cfg = RunConfig()
    assert (cfg.sampling.T, cfg.sampling.cfg_scale) == (1000, 5.0)
    assert (cfg.training.lambda_diff, cfg.training.lambda_cons, cfg.training.text_drop) == (1.0, 5.0, 0.1)
    assert (cfg.training.lr, cfg.training.batch_size) == (1e-5, 16)
    assert cfg.model.max_len == 196 and cfg.model.text_dim == 512


def test_yaml_roundtrip(tmp_path):
    cfg = desk_config(seed=3)
    cfg.dump(tmp_path / "c.yaml")
    back = RunConfig.load(tmp_path / "c.yaml")
    assert back == cfg and back.digest() == cfg.digest()


def test_partial_file_fills_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("training:\n  steps: 12\nseed: 9\n")
    cfg = RunConfig.load(tmp_path / "c.yaml")
    assert cfg.training.steps == 12 and cfg.seed == 9 and cfg.training.lr == 1e-5


@pytest.mark.parametrize("text, match", [
    ("bogus: 1\n", "unknown config section"),
    ("training:\n  stepz: 3\n", "stepz"),
    ("training:\n  steps: 2.5\n", "training.steps"),
    ("sampling:\n  beta_rescale: 1\n", "beta_rescale"),
    ("training: 5\n", "mapping"),
    ("- a\n- b\n", "top level"),
    ("training: [unclosed\n", "malformed"),
])
def test_rejects_bad_files(tmp_path, text, match):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ConfigError, match=match):
        RunConfig.load(tmp_path / "c.yaml")


def test_digest_tracks_changes():
    a, b = desk_config(), desk_config()
    assert a.digest() == b.digest()
    b.training.lr = 1e-4
    assert a.digest() != b.digest()


def test_builders_agree_with_sections():
    cfg = desk_config()
    assert cfg.schedule().T == cfg.sampling.T
    assert cfg.denoiser_config().latent == cfg.model.latent
    assert cfg.train_config().lambda_cons == 5.0
    assert cfg.world().mat_scale == cfg.data.mat_scale == cfg.traj_net_config().mat_scale
    assert cfg.data_config().seed == cfg.seed
