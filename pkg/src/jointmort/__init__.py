"""Joint small-area mortality estimation for several subpopulations.

Age curves are expressed on a principal-component basis; their coefficients get a
hierarchical prior with cross-subpopulation correlation and are sampled with NUTS.
"""

__version__ = "0.1.0"

from .evalharness import EvalReport, compare_variants, holdout_report, simulation_study, truth_report
from .hiermodel import HierModel, Hyper, ModelSpec
from .mortdata import AgeGrid, CellIndex, CurveCollection, DataError, MortalityDataset, load_curves, load_dataset
from .pcbasis import PCBasis, recommend_P, selection_report, svd_basis
from .sampler import Diagnostics, PosteriorSamples, SamplerConfig, sample
from .simgen import SimConfig, SimTruth, StandardCurves, simulate

__all__ = ["AgeGrid", "CellIndex", "CurveCollection", "DataError", "Diagnostics", "EvalReport", "HierModel",
           "Hyper", "ModelSpec", "MortalityDataset", "PCBasis", "PosteriorSamples", "SamplerConfig", "SimConfig",
           "SimTruth", "StandardCurves", "compare_variants", "holdout_report", "load_curves", "load_dataset",
           "recommend_P", "sample", "selection_report", "simulate", "simulation_study", "svd_basis",
           "truth_report"]
