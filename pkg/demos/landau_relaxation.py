"""Particle solution of the homogeneous Landau equation (Maxwell kernel)
from an anisotropic Gaussian. The Gaussian-score run is compared with the
closed-form covariance relaxation C(t) = tr/3 I + (C0 - tr/3 I) exp(-12 t)."""

import numpy as np

from densformer.landau import LandauConfig, analytic_maxwell_covariance, make_oracle, simulate

cfg = LandauConfig(n=1024, steps=100, dt=0.002)
for name in ("exact", "kde"):
    traj = simulate(cfg, make_oracle(name))
    C = analytic_maxwell_covariance(traj.cov[0], traj.t)
    print(
        f"{name:6s} Sigma11 {traj.cov[0, 0, 0]:.3f} -> {traj.cov[-1, 0, 0]:.3f}"
        f"  max |C - closed form| {np.abs(traj.cov - C).max():.4f}"
        f"  |momentum| {np.abs(traj.momentum).max():.1e}"
    )
