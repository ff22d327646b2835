"""Synthetic capacity measurements generated from the built-in L=1 constants."""

import numpy as np

from attncap import ecm

H_GRID = (1, 2, 3, 4)
N_GRID = (16, 32, 64, 128)
B_GRID = tuple(2**k for k in range(4, 15))


def synthetic_rows(noise=0.01, seed=0, B_grid=B_GRID, H_grid=H_GRID, N_grid=N_GRID, params=None):
    p = params or ecm.PRESETS[1]
    rng = np.random.Generator(np.random.Philox(seed))
    rows = []
    for H in H_grid:
        for N in N_grid:
            for B in B_grid:
                C = float(ecm.ecm_capacity(B, H, N, p).capacity)
                if noise:
                    C *= 1.0 + noise * rng.standard_normal()
                rows.append(ecm.Measurement(B, H, N, p.layers, C, f"H{H}-N{N}-B{B}"))
    return rows
