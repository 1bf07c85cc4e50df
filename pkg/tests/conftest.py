"""Shared fixtures: the frozen pretrained checkpoint used by the trend and
acceptance tests.

Pretraining is deterministic, so the checkpoint is cached on disk keyed by
the pretraining config hash; set SEGMEM_TEST_CACHE to reuse it across test
sessions (otherwise it lives in the pytest session tmp dir and is rebuilt
once per session, a few minutes of compute).
"""

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import pytest

from segmem import backbone as bb
from segmem import synthdata as sd
from segmem.config import ExperimentConfig, config_from_dict


def _repo_config() -> ExperimentConfig:
    path = Path(__file__).resolve().parent.parent / "configs" / "default.json"
    return config_from_dict(json.loads(path.read_text()))


@pytest.fixture(scope="session")
def default_config() -> ExperimentConfig:
    return _repo_config()


@pytest.fixture(scope="session")
def pretrained(default_config, tmp_path_factory) -> bb.ModelParams:
    cfg = default_config
    key_blob = json.dumps(
        {
            "pretrain": asdict(cfg.pretrain),
            "data": repr(cfg.data),
            "init_seed": cfg.model_init_seed,
            "seed": cfg.seed,
        },
        sort_keys=True,
    )
    key = hashlib.sha256(key_blob.encode()).hexdigest()[:16]
    cache_root = os.environ.get("SEGMEM_TEST_CACHE")
    cache_dir = Path(cache_root) if cache_root else tmp_path_factory.mktemp("ckpt")
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"pretrained_{key}.json"
    if path.exists():
        return bb.load_checkpoint(path)
    splits = sd.make_splits(cfg.data, cfg.seed)
    params = bb.ModelParams.initialize(cfg.model_init_seed)
    params, _ = bb.pretrain(params, splits.pretrain_base, cfg.pretrain)
    bb.save_checkpoint(params, path)
    return params
