import json
from pathlib import Path

import pytest

from config import PRESETS, apply_overrides, from_dict, load_config, save_config
from errors import ConfigError


def test_desk_preset_fills_dataset_and_budget():
    config = from_dict({"dataset": {"preset": "desk"}})
    assert config.dataset.class_names == ("ring", "stripe", "wave", "lattice")
    assert config.dataset.num_classes == 4
    assert config.dataset.shape == (3, 32, 32)
    assert config.budget == 400


@pytest.mark.parametrize("preset, budget, side, num_classes, first", [
    ("cifar10", 5000, 32, 10, "airplane"),
    ("cifar100", 150000, 32, 100, "apple"),
    ("imagenette", 1000, 256, 10, "tench"),
    ("imagefruit", 130, 256, 10, "pineapple"),
    ("imageyellow", 50, 256, 10, "bee"),
    ("imagesquawk", 30, 256, 10, "peacock"),
])
def test_dataset_presets(preset, budget, side, num_classes, first):
    config = from_dict({"dataset": {"preset": preset}})
    assert config.budget == budget
    assert config.dataset.shape == (3, side, side)
    assert config.dataset.num_classes == num_classes
    assert config.dataset.class_names[0] == first
    assert len(set(config.dataset.class_names)) == num_classes


def test_preset_vocabularies_are_real_class_names():
    for name, preset in PRESETS.items():
        for class_name in preset.get("class_names", ()):
            assert not class_name.startswith("class "), name


def test_preset_without_vocabulary_needs_class_names():
    with pytest.raises(ConfigError, match="class_names"):
        from_dict({"dataset": {"preset": "tiny-imagenet"}})
    names = [f"n{i:08d}" for i in range(200)]
    config = from_dict({"dataset": {"preset": "tiny-imagenet", "class_names": names}})
    assert config.dataset.num_classes == 200
    assert config.dataset.shape == (3, 64, 64)
    assert config.budget == 200000


def test_explicit_values_beat_preset():
    config = from_dict({"budget": 7, "dataset": {"preset": "cifar10", "shape": [3, 16, 16]}})
    assert config.budget == 7
    assert config.dataset.shape == (3, 16, 16)


def test_unknown_key_names_the_dotted_path():
    with pytest.raises(ConfigError, match="substitute.distill.epoch"):
        from_dict({"substitute": {"distill": {"epoch": 3}}})
    with pytest.raises(ConfigError, match="budgett"):
        from_dict({"budgett": 3})


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        from_dict({"substitute": {"distill": {"epochs": 0}}})
    with pytest.raises(ConfigError):
        from_dict({"attacks": [{"method": "PGD", "alpha": 1.0, "epsilon": 0.1}]})
    with pytest.raises(ConfigError):
        from_dict({"budget": -1})
    with pytest.raises(ConfigError):
        from_dict({"schema_version": "2"})
    with pytest.raises(ConfigError):
        from_dict({"dataset": {"preset": "mnist"}})


def test_overrides_parse_json_with_string_fallback():
    raw = apply_overrides({"budget": 1}, ["budget=5000", "substitute.distill.epochs=5", "run_id=my-run", "seeds=[1,2]"])
    assert raw == {"budget": 5000, "substitute": {"distill": {"epochs": 5}}, "run_id": "my-run", "seeds": [1, 2]}
    config = from_dict({}, ["target.label_mode=soft", "budget=12"])
    assert config.target.label_mode == "soft"
    assert config.budget == 12


def test_override_without_equals_sign_is_rejected():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["budget"])


def test_attacks_are_parsed_into_specs():
    config = from_dict({"attacks": [{"method": "fgsm", "epsilon": 0.03}, {"method": "PGD", "targeted": True}]})
    assert [a.name for a in config.attacks] == ["FGSM-untargeted", "PGD-targeted"]
    assert config.attacks[0].steps == 1


def test_resolved_config_round_trips(tmp_path):
    config = from_dict({"dataset": {"preset": "desk"}, "attacks": [{"method": "BIM"}]}, ["budget=100"])
    path = save_config(config, tmp_path / "config.json")
    assert load_config(path) == config
    text = path.read_text()
    assert text == json.dumps(json.loads(text), indent=2, sort_keys=True) + "\n"


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_shipped_desk_config_loads():
    config = load_config(Path(__file__).resolve().parent.parent / "configs" / "desk.json")
    assert config.budget == 400
    assert config.sweep_budgets == (0, 100, 200, 400)
    assert len(config.attacks) == 6
    assert config.seeds == (0, 1, 2, 3, 4)
