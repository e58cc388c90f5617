"""Joint chance-constrained optimal power flow via scenario selection.

Pipeline: parse a MATPOWER case (case_io), pick the enforced-scenario count
from the ambiguity arithmetic (ambiguity), draw or load forecast-error
scenarios (scenarios), assemble the chance-constraint rows on a DC or AC
network model (dc_model / ac_model), solve the exact k-of-S selection
program by branch-and-bound (scenario_mip), and measure out-of-sample
robustness (evaluation).  The `ccopf` console script drives the pipeline.
"""

__version__ = "0.1.0"
