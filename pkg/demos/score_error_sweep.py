"""Score MSE against sample size for KDE, SD-KDE with an empirical score,
and (if a checkpoint is given) the trained transformer, on random
trimodal mixtures in one dimension.

    python demos/score_error_sweep.py [checkpoint]
"""

import sys
from collections import defaultdict

import numpy as np

from densformer.checkpoint import load_checkpoint
from densformer.evaluation import eval_score

oracles = ["kde", "sd-kde-emp"]
weights = None
if len(sys.argv) > 1:
    weights = load_checkpoint(sys.argv[1])[0]
    oracles.append("transformer")

ns = (256, 512, 1024)
for oracle in oracles:
    rows = eval_score(oracle, d=1, ns=ns, seeds=range(5), weights=weights)
    by_n = defaultdict(list)
    for r in rows:
        by_n[r["n"]].append(r["mse"])
    print(f"{oracle:12s}" + "".join(f"  n={n}: {np.median(by_n[n]):.4f}" for n in ns))
