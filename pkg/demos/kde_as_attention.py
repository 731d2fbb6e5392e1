"""On unit-norm points, a softmax attention head with Q = K = X/h and
identity values computes the row-normalised Gaussian kernel matrix, so its
output is a KDE-weighted average of the keys. The KDE score follows as
(attention @ X - X) / h^2."""

import numpy as np

from densformer.kde import kde_score
from densformer.model import kde_attention_head, normalized_gaussian_kernel

rng = np.random.default_rng(0)
X = rng.normal(size=(400, 3))
X /= np.linalg.norm(X, axis=1, keepdims=True)

for h in (0.2, 0.5, 1.0):
    A = kde_attention_head(X, h)
    kernel_gap = np.abs(A - normalized_gaussian_kernel(X, X, h)).max()
    score_gap = np.abs((A @ X - X) / h**2 - kde_score(X, X, h)).max()
    print(f"h={h:.1f}  kernel gap {kernel_gap:.1e}  score gap {score_gap:.1e}")
