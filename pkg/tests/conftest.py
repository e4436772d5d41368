import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(2)

from netsr import corpus, model, training


TINY_MODEL = model.ModelConfig(
    d_e=32,
    n_heads=2,
    n_isab=1,
    n_inducing=4,
    n_seeds=2,
    n_sab=1,
    n_dec_layers=1,
    max_seq=32,
    k_max=8,
)

EASY_GEN = corpus.GenConfig(b_max=2, u_max=1, p_empty_self=0.0)


@pytest.fixture(scope="session")
def tiny_corpus() -> corpus.Corpus:
    return corpus.build_corpus(EASY_GEN, 8, seed=2024)


_TINY_RUN: dict = {}


def _tiny_run(tiny_corpus) -> dict:
    if not _TINY_RUN:
        tcfg = training.TrainConfig(
            batch_size=8,
            epochs=2000,
            lr=1e-3,
            seed=5,
            constant_resample=False,
            n_obs_points=40,
            topo_n_range=(10, 30),
            max_steps=2000,
            target_loss=0.01,
            log_every=5,
        )
        losses: list[float] = []
        ckpt = training.train(
            tiny_corpus,
            TINY_MODEL,
            tcfg,
            log=lambda line: losses.append(float(line.split("loss=")[1].split()[0])),
        )
        _TINY_RUN["checkpoint"] = ckpt
        _TINY_RUN["losses"] = losses
    return _TINY_RUN


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_corpus) -> training.Checkpoint:
    """A small model overfit on 8 easy pairs; shared across decode tests."""
    return _tiny_run(tiny_corpus)["checkpoint"]


@pytest.fixture(scope="session")
def tiny_train_losses(tiny_corpus) -> list:
    return _tiny_run(tiny_corpus)["losses"]


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
