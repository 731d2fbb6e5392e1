"""Plug-in entropy, Fisher information and relative Fisher information
from exact densities and scores, with Monte Carlo standard errors."""

import numpy as np

from densformer.estimators import entropy_from_log, fisher_information, gaussian_entropy, relative_fisher

rng = np.random.default_rng(0)
for d in (1, 10):
    X = rng.normal(size=(4096, d))
    logp = -0.5 * (X * X).sum(1) - 0.5 * d * np.log(2 * np.pi)
    est = entropy_from_log(logp)
    print(f"entropy d={d:2d}: {est.value:.4f} +/- {est.stderr:.4f} (exact {gaussian_entropy(np.eye(d)):.4f})")

X = rng.normal(size=(4096, 3))
est = fisher_information(-X)
print(f"fisher d=3: {est.value:.4f} +/- {est.stderr:.4f} (exact 3)")

shift = np.full(3, 0.5)
est = relative_fisher(-X, -(X - shift))
print(f"relative fisher, mean shift 0.5: {est.value:.4f} (exact {shift @ shift:.4f})")
