"""Hold out 20% of cells and score the joint and independent variants on them."""

from jointmort.evalharness import compare_variants
from jointmort.hiermodel import ModelSpec
from jointmort.sampler import SamplerConfig
from jointmort.simgen import SimConfig, simulate

# strongly correlated subgroups: the case where pooling across subgroups should help
sim = SimConfig(areas=6, years=4, subgroups=3, regime_schedule=("exchangeable(0.8)",) * 4, seed=3)
data, truth = simulate(sim)
spec = ModelSpec.for_data(truth.curves.basis, data)

joint, indep = compare_variants(data, spec, spec.with_variant("independent"),
                                SamplerConfig(chains=2, warmup=300, samples=400, seed=3), split=(0.2, 3))
print("held-out cells:", joint.counts["holdout_cells"])
for rep in (joint, indep):
    cov = {lv: round(v, 3) for lv, v in rep.coverage["holdout_deaths"].items()}
    print(f"{rep.variant:12s} MAD {rep.mad:.3f}  MSE {rep.mse:.2f}  coverage {cov}")
