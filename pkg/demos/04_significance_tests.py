"""
Comparing models with paired and unpaired tests
===============================================

Each cross-validation run yields one score per repeat.  Comparing two
runs means comparing those score vectors: paired Student t when the
repeats share splits, Mann-Whitney U otherwise, with Bonferroni
correction once several models enter the same table.
"""

import numpy as np

from hipgrade import (bonferroni, mann_whitney_u, paired_t_test, render_grid,
                      significance_grid)

rng = np.random.default_rng(42)

# Pretend per-repeat accuracy vectors for three models over 15 repeats.
strong = np.clip(rng.normal(0.90, 0.02, 15), 0, 1)
middle = np.clip(rng.normal(0.87, 0.02, 15), 0, 1)
weak = np.clip(rng.normal(0.80, 0.03, 15), 0, 1)

# Paired comparison: the repeats line up one-to-one.
t_res = paired_t_test(strong, middle)
print(f"paired t strong vs middle: t={t_res.statistic:.3f} p={t_res.p_value:.4f}")

# Unpaired comparison: rank-based, no normality assumption.  Small
# samples take the exact enumeration branch automatically.
u_res = mann_whitney_u(strong[:6], weak[:6])
print(f"mann-whitney strong vs weak (n=6): U={u_res.u_statistic:.1f} "
      f"p={u_res.p_value:.4f} method={u_res.method}")

# Three pairwise tests -> multiply each p by 3, clamp at 1.
raw = [t_res.p_value, u_res.p_value, 0.04]
print(f"bonferroni({np.round(raw, 4)}, m=3) = {np.round(bonferroni(raw, 3), 4)}")

# The full pairwise grid with correction applied across every cell.
grid = significance_grid({"strong": strong, "middle": middle, "weak": weak},
                         paired=True, base_alpha=0.05)
print()
print(render_grid(grid))
