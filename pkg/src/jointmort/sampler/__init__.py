"""Self-contained NUTS sampler, warm-up adaptation and convergence diagnostics."""

from .core import (Diagnostics, InitializationError, PosteriorSamples, SamplerConfig, SamplerError,
                   compute_diagnostics, parse_quantity, quantile_row, run_chain, sample, sample_target,
                   summarize)
from .diagnostics import ess_bulk, split_rhat
from .nuts import NUTS

__all__ = ["Diagnostics", "InitializationError", "NUTS", "PosteriorSamples", "SamplerConfig",
           "SamplerError", "compute_diagnostics", "ess_bulk", "parse_quantity", "quantile_row",
           "run_chain", "sample", "sample_target", "split_rhat", "summarize"]
