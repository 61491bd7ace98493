"""Build a principal-component age basis from empirical log-mortality curves."""

import numpy as np

from jointmort.mortdata import curves_from_dataset
from jointmort.pcbasis import explained_variance, recommend_P, selection_report, svd_basis
from jointmort.simgen import SimConfig, simulate

# large populations make the empirical curves smooth enough to decompose
data, truth = simulate(SimConfig(areas=10, years=4, subgroups=3, base_pop_unit=1e6, seed=4))
curves = curves_from_dataset(data)
print("curves x ages:", curves.rows.shape)

b = svd_basis(curves, p_max=6)
ev = explained_variance(b)
print("explained variance:", ev.round(5), " cumulative:", np.cumsum(ev).round(5))

# the first component should look like the (scaled) baseline curve
cos = abs(b.components[0] @ truth.curves.basis[0]) / np.linalg.norm(truth.curves.basis[0])
print("cosine(pc1, baseline curve): %.4f" % cos)

# components whose scores separate subgroups, by Welch t-test
rep = selection_report(b, curves.row_meta, alpha=0.05, min_P=1)
for row in rep.rows:
    sig = [pair for pair, res in row.pairs.items() if res is not None and res[1] < 0.05]
    print(f"pc{row.component + 1}: share {row.explained_share:.4f}, separating pairs {sig}")
print("recommended P:", recommend_P(rep, min_P=2))
