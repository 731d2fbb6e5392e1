"""Wall time of KDE scores and of a transformer forward pass as n grows,
with the fitted log-log slopes. Dense attention is quadratic in n, so on a
CPU both slopes come out close to 2.

    python demos/runtime_scaling.py [checkpoint]
"""

import sys

import torch

from densformer.checkpoint import load_checkpoint
from densformer.evaluation import bench

torch.set_num_threads(1)
weights = load_checkpoint(sys.argv[1])[0] if len(sys.argv) > 1 else None
rows, slopes = bench(d=2, ns=tuple(2**k for k in range(10, 13)), weights=weights, repeats=3, model_repeats=1)
for r in rows:
    line = f"n={r['n']:6d}  kde {r['kde_seconds']:.3f}s"
    if "transformer_seconds" in r:
        line += f"  transformer {r['transformer_seconds']:.3f}s"
    print(line)
print("slopes: " + "  ".join(f"{k} {v:.2f}" for k, v in slopes.items()))
