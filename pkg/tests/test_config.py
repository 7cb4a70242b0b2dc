import json

import pytest

from fgfa.config import PipelineConfig, load_config
from fgfa.errors import ConfigError


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.aggregation.k_infer == 10 and cfg.train.k_train == 2
    assert cfg.sample_range == 10
    assert cfg.model.embed_widths == [8, 8, 16]
    assert cfg.eval.seq_nms_link_iou == 0.5 and cfg.eval.seq_nms_suppress_iou == 0.3
    cfg.validate()


def test_flat_and_nested_updates():
    cfg = PipelineConfig.from_flat({"aggregation.k_infer": "4", "train": {"lr": "0.5", "sample_range": 6}})
    assert cfg.aggregation.k_infer == 4 and cfg.train.lr == 0.5 and cfg.sample_range == 6
    cfg.set("model.feature_widths", "[4, 8]")
    assert cfg.model.feature_widths == [4, 8]
    cfg.set("aggregation.record_weights", "yes")
    assert cfg.aggregation.record_weights is True
    cfg.set("train.sample_range", "none")
    assert cfg.train.sample_range is None


def test_round_trip_through_flat():
    cfg = PipelineConfig.from_flat({"eval.ap_mode": "11-point", "train.seed": 9})
    assert cfg.copy().to_flat() == cfg.to_flat()


@pytest.mark.parametrize("key,value", [
    ("aggregation.kinfer", 3),
    ("nosuch.k", 3),
    ("aggregation.k_infer", "many"),
    ("aggregation.k_infer", 2.5),
    ("aggregation.mode", "magic"),
    ("aggregation.k_infer", -1),
    ("eval.seq_nms_link_iou", 1.5),
    ("aggregation.record_weights", "perhaps"),
])
def test_errors_name_the_key(key, value):
    with pytest.raises(ConfigError) as err:
        PipelineConfig.from_flat({key: value})
    assert err.value.key == key


def test_sample_range_smaller_than_k_train():
    with pytest.raises(ConfigError) as err:
        PipelineConfig.from_flat({"train.sample_range": 1, "train.k_train": 2})
    assert err.value.key == "train.sample_range"
    # an implicit range only matters when training starts
    PipelineConfig.from_flat({"aggregation.k_infer": 0})


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"aggregation": {"k_infer": 3}, "train.iterations": 7}))
    cfg = load_config(p)
    assert cfg.aggregation.k_infer == 3 and cfg.train.iterations == 7
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(p)
