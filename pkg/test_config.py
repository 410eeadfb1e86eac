# 📄 test_config.py
from pathlib import Path

import pytest
import yaml
from pydantic import ValidationError

from config import (ClusterSpec, ExperimentConfig, FrontEndConfig, IterationConfig, ModelConfig, config_hash, load_config)
from errors import ConfigError

ROOT = Path(__file__).parent


def model(**kw):
    base = dict(num_layers=4, num_heads=4, model_dim=16, supervised_layers=[2, 4], codebook_sizes=[50, 100])
    base.update(kw)
    return ModelConfig(**base)


class TestModelConfig:
    def test_restricted_heads_default_to_last_two(self):
        cfg = model(window_schedule=[4, 4, 8, 8])
        assert cfg.restricted_heads == (2, 3)

    def test_no_schedule_no_restricted_heads(self):
        assert model().restricted_heads is None

    def test_frame_rate(self):
        assert model().stride_product == 320
        assert model().frame_rate == pytest.approx(50.0)

    @pytest.mark.parametrize("kw", [
        dict(model_dim=18),
        dict(supervised_layers=[2, 3], codebook_sizes=[50, 100]),
        dict(supervised_layers=[4, 2], codebook_sizes=[50, 100]),
        dict(codebook_sizes=[100]),
        dict(codebook_sizes=[100, 50]),
        dict(window_schedule=[8, 4, 8, 8]),
        dict(window_schedule=[4, 4, 8]),
        dict(window_schedule=[4, None, 8, 8]),
        dict(num_heads=1, model_dim=16, window_schedule=[1, 1, 1, 1]),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            model(**kw)

    def test_equal_sizes_allowed(self):
        assert model(codebook_sizes=[100, 100]).codebook_sizes == [100, 100]

    def test_unbounded_top_windows(self):
        cfg = model(window_schedule=[4, 8, None, None])
        assert cfg.window_schedule[-1] is None


class TestExperimentConfig:
    def corpus(self):
        return {"unlabeled_dir": "u", "labeled_dir": "l"}

    def test_iteration2_sizes_must_be_clustered(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(corpus=self.corpus(), extract_layer=2,
                             iteration1=IterationConfig(model=model(supervised_layers=[4], codebook_sizes=[50]),
                                                        clustering=ClusterSpec(sizes=[50])),
                             iteration2=IterationConfig(model=model(), clustering=ClusterSpec(sizes=[50])))

    def test_extract_layer_in_range(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(corpus=self.corpus(), extract_layer=9,
                             iteration1=IterationConfig(model=model(supervised_layers=[4], codebook_sizes=[50]),
                                                        clustering=ClusterSpec(sizes=[50])),
                             iteration2=IterationConfig(model=model(), clustering=ClusterSpec(sizes=[50, 100])))


class TestFrontEndConfig:
    @pytest.mark.parametrize("kw", [{"hop_ms": 0.0}, {"hop_ms": -10.0}, {"window_ms": 0.0}, {"window_ms": 5.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            FrontEndConfig(**kw)

    def test_zero_hop_in_a_file(self, tmp_path):
        raw = yaml.safe_load((ROOT / "configs" / "toy.yaml").read_text())
        raw["frontend"] = {"window_ms": 25.0, "hop_ms": 0.0}
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(raw))
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert "hop_ms" in info.value.detail


class TestLoadConfig:
    def test_shipped_configs_validate(self):
        toy = load_config(ROOT / "configs" / "toy.yaml")
        assert toy.iteration2.model.supervised_layers == [2, 4]
        assert toy.iteration2.model.restricted_heads == (2, 3)
        full = load_config(ROOT / "configs" / "full.yaml")
        assert full.iteration2.model.codebook_sizes == [300, 500]
        assert full.iteration1.model.stride_product == 320
        assert full.extract_layer == 6

    def test_validation_error_becomes_config_error(self, tmp_path):
        raw = yaml.safe_load((ROOT / "configs" / "toy.yaml").read_text())
        raw["iteration2"]["model"]["codebook_sizes"] = [100, 50]
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(raw))
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert "iteration2" in info.value.detail

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.yaml")

    def test_hash_is_stable_and_sensitive(self):
        a = load_config(ROOT / "configs" / "toy.yaml")
        b = load_config(ROOT / "configs" / "toy.yaml")
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(a.model_copy(update={"seed": 1}))
