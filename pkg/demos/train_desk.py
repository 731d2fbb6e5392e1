"""Train the one-dimensional checkpoint used by the acceptance suite.

Produces artifacts/desk_d1/ckpt_0020000.bin together with telemetry.csv
(per-step losses and wall time) and evaluations.csv (median held-out score
MSE every 1000 steps). Takes roughly 100 minutes on one CPU core.

    python demos/train_desk.py [out_dir]
"""

import logging
import sys

import numpy as np
import torch

from densformer.evaluation import heldout_score_suite, suite_score_mse
from densformer.gmm import BatchConfig
from densformer.model import ModelConfig, predict
from densformer.training import TrainConfig, train

torch.set_num_threads(1)
logging.basicConfig(level=logging.INFO)

out_dir = sys.argv[1] if len(sys.argv) > 1 else "artifacts/desk_d1"
suites = [heldout_score_suite(s) for s in range(5)]


def evaluate(w):
    return float(np.median([suite_score_mse(lambda X: predict(w, X).scores, s) for s in suites]))


model = ModelConfig(width=64, heads=4, layers=4, decoder_layers=2)
run = TrainConfig(
    steps=20000,
    lr=5e-4,
    batch=BatchConfig(B=8, d=1, n_x=256, n_y=64, k_min=1, k_max=3),
    checkpoint_every=1000,
    seed=0,
)
train(model, run, out_dir=out_dir, evaluate=evaluate)
