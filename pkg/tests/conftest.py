import numpy as np
import pytest

from cloudfill.config import RunConfig
from cloudfill.dataset import DataConfig, build_dataset

MINI = dict(categories=("table",), n_train=6, n_val=2, n_test=2, m_gt=256,
            n_in=64, image_size=64, seed=7)


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """One small category, built once per test session."""
    root = tmp_path_factory.mktemp("mini_ds")
    cfg = DataConfig(root=str(root), **MINI)
    etas = build_dataset(cfg)
    return {"root": str(root), "config": cfg, "etas": etas}


@pytest.fixture()
def mini_run_config(mini_dataset, tmp_path):
    return RunConfig(
        dataset_root=mini_dataset["root"],
        categories=("table",),
        n_train=MINI["n_train"], n_val=MINI["n_val"], n_test=MINI["n_test"],
        m_gt=MINI["m_gt"], n_in=MINI["n_in"], image_size=MINI["image_size"],
        n_coarse=32, m_out=128, l_retrieve=8, global_dim=32,
        k_pos=8, k_cur=8, k_density=4,
        epochs=2, batch_size=3, checkpoint_every=2,
        seed=MINI["seed"], out_dir=str(tmp_path / "runs"),
    )
