import pytest

from pgas_sim.config import (ENV_CONFIG, RuntimeConfig, load_config,
                             parse_config_text)
from pgas_sim.errors import ConfigError


def test_defaults_valid():
    cfg = RuntimeConfig().validate()
    assert cfg.npes == 1
    assert cfg.ring_capacity == 4096
    assert cfg.cutover_mode == "tuned"


def test_parse_file_text():
    cfg = parse_config_text("""
        # comment
        npes = 4
        heap_size = 2M
        ring_capacity = 256
        engine_startup_us = 12.5
        engine_bw_cap_gbps = 1.5
        cutover_mode = always
        topology = cross_tile
    """)
    assert cfg.npes == 4
    assert cfg.heap_size == 2 << 20
    assert cfg.ring_capacity == 256
    assert cfg.engine_startup_us == 12.5
    assert cfg.engine_bw_cap_gbps == 1.5
    assert cfg.cutover_mode == "always"
    assert cfg.topology == "cross_tile"


@pytest.mark.parametrize("text", [
    "npes = zero", "bogus_key = 1", "npes 4", "ring_capacity = 3x",
])
def test_parse_rejects_bad_lines(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


@pytest.mark.parametrize("kwargs", [
    dict(npes=0),
    dict(ring_capacity=3),
    dict(ring_capacity=1),
    dict(cutover_mode="sometimes"),
    dict(topology="mesh"),
    dict(internode_role="node_c"),
    dict(internode_role="node_a"),          # missing peer_endpoint
    dict(time_scale=-1),
])
def test_validate_rejects(kwargs):
    with pytest.raises(ConfigError):
        RuntimeConfig(**kwargs).validate()


def test_env_var_points_at_file(tmp_path, monkeypatch):
    path = tmp_path / "sim.conf"
    path.write_text("npes = 3\nheap_size = 1M\n")
    monkeypatch.setenv(ENV_CONFIG, str(path))
    cfg = load_config()
    assert cfg.npes == 3
    assert cfg.heap_size == 1 << 20


def test_cli_overrides_beat_file(tmp_path):
    path = tmp_path / "sim.conf"
    path.write_text("npes = 3\ncutover_mode = never\n")
    cfg = load_config(str(path), npes=7, cutover_mode="tuned")
    assert cfg.npes == 7
    assert cfg.cutover_mode == "tuned"


def test_missing_file_errors():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/sim.conf")
