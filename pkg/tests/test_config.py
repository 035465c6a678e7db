import pytest

from molbuild.config import build_run, parse_seeds, read_config
from molbuild.env import MULTI_BAG, SOLVATION
from molbuild.errors import ConfigError


def test_parse_seeds():
    assert parse_seeds("0..3") == [0, 1, 2, 3]
    assert parse_seeds("4,1") == [4, 1]
    assert parse_seeds("7") == [7]
    for bad in ("", "a..b", "1,x"):
        with pytest.raises(ConfigError):
            parse_seeds(bad)


def test_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[task]\nbags = CH4\n[ppo]\nlearning_rate = 1e-3\nworkers = 4\nhorizon = 32\n"
                    "[policy]\nuse_kappa = no\n[run]\nseeds = 0..2\nsteps = 640\n")
    cfg = build_run(read_config(path))
    assert cfg.task.bags[0].formula == "CH4"
    assert cfg.ppo.learning_rate == 1e-3 and cfg.ppo.workers == 4 and cfg.ppo.horizon == 32
    assert cfg.ppo.clip == 0.2
    assert cfg.policy.use_kappa is False
    assert cfg.seeds == [0, 1, 2] and cfg.steps == 640


def test_presets():
    multi = build_run({"task": {"preset": "multi_bag_qm9_5"}})
    assert multi.task.kind == MULTI_BAG and multi.ppo.horizon == 384 and multi.ppo.minibatch_size == 48
    solv = build_run({"task": {"preset": "solvation_formaldehyde", "n_bags": "2"}})
    assert solv.task.kind == SOLVATION and solv.task.n_bags == 2 and solv.policy.d_max == 2.8
    single = build_run({"task": {"preset": "single_bag_small", "bags": "CH4O"}})
    assert single.task.bags[0].formula == "CH4O"


@pytest.mark.parametrize("sections", [
    {"task": {"bags": "H2", "colour": "red"}},
    {"task": {"bags": "H2"}, "ppo": {"momentum": "0.9"}},
    {"task": {"bags": "H2"}, "policy": {"use_kappa": "perhaps"}},
    {"task": {"bags": "H2"}, "ppo": {"epochs": "many"}},
    {"task": {"bags": "H2"}, "run": {"backend": "quantum"}},
    {"task": {"bags": "H2"}, "run": {"checkpoints": "some"}},
    {"task": {"preset": "nope"}},
])
def test_rejects(sections):
    with pytest.raises(ConfigError):
        build_run(sections)


def test_unknown_section(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[extras]\nx = 1\n")
    with pytest.raises(ConfigError):
        read_config(path)
    with pytest.raises(ConfigError):
        read_config(tmp_path / "missing.ini")
