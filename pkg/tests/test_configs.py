"""Shipped configs parse into valid training configurations."""

import json
import sys
from pathlib import Path

import pytest

from ncopt.search import SearchConfig
from ncopt.training import TrainConfig

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "scripts"))
from common import deep_merge  # noqa: E402

STUDIES = sorted((ROOT / "configs" / "studies").glob("*.json"))


@pytest.mark.parametrize("path", sorted((ROOT / "configs").glob("*.json")), ids=lambda p: p.stem)
def test_cli_configs(path):
    TrainConfig.from_dict(json.loads(path.read_text()))


@pytest.mark.parametrize("path", STUDIES, ids=lambda p: p.stem)
def test_study_variants(path):
    study = json.loads(path.read_text())
    labels = [v["label"] for v in study["variants"]]
    assert len(set(labels)) == len(labels)
    for v in study["variants"]:
        TrainConfig.from_dict({**deep_merge(study["base"], v.get("override", {})), "seed": 0})
    for s in study["eval"]["search"]:
        SearchConfig(**s)


def test_deep_merge_keeps_siblings():
    base = {"model": {"encoder": {"hidden": 64, "layers": 3}, "decoder": "ar"}}
    out = deep_merge(base, {"model": {"encoder": {"layers": 5}}})
    assert out == {"model": {"encoder": {"hidden": 64, "layers": 5}, "decoder": "ar"}}
    assert base["model"]["encoder"]["layers"] == 3
