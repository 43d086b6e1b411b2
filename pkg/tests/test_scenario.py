import json

import pytest

from functree.scenario import Scenario, ScenarioError, load_scenario


def test_defaults_valid():
    s = Scenario()
    s.validate()
    assert s.network.registry_gbps == 10.0 and s.provision.window == 16
    assert s.image.block_size == 524288 and s.manager.idle_timeout_s == 900.0


def test_load_from_text_and_seed_override():
    s = load_scenario('policy = "registry_full_pull"\nseed = 3\n[image]\nsize_bytes = 1e6\n', seed=9)
    assert s.policy == "registry_full_pull" and s.seed == 9
    assert s.image.size_bytes == 1_000_000 and isinstance(s.image.size_bytes, int)


def test_load_from_file_resolves_relative_paths(tmp_path):
    (tmp_path / "t.csv").write_text("t_s,function_id,count\n")
    p = tmp_path / "s.toml"
    p.write_text('[workload]\ntrace = "t.csv"\n')
    s = load_scenario(p)
    assert s.resolve(s.workload.trace) == tmp_path / "t.csv"


@pytest.mark.parametrize("text", [
    'policy = "bogus"',
    'vm_count = 0',
    'nope = 1',
    '[network]\nregistry_gbps = 0',
    '[network]\nduplex = "simplex"',
    '[image]\nblock_size = 5000',
    '[image]\nstartup_fraction = 0',
    'vm_count = "many"',
    'vm_count = 1.5',
    'network = 3',
    '[image]\npath = "missing.fnbf"',
    'faults = [{vm = 1}]',
    'this is not toml =',
])
def test_invalid(text):
    with pytest.raises(ScenarioError):
        load_scenario(text + "\n")


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(OSError):
        load_scenario(tmp_path / "nope.toml")


def test_replace_and_json_echo():
    s = Scenario().replace(**{"image.block_size": 1 << 20, "policy": "layer_tree_root"})
    assert s.image.block_size == 1 << 20 and Scenario().image.block_size == 524288
    d = json.loads(s.to_json())
    assert d["image"]["block_size"] == 1 << 20 and "base_dir" not in d
    with pytest.raises(ScenarioError):
        Scenario().replace(**{"image.nope": 1})
