"""Covariate-adjusted dynamic treatment regimes.

This package builds finite-horizon Markov decision processes whose transition
kernels are fitted from patient trajectories with covariate-dependent ordinal
logistic models, solves them by backward induction and analyzes how the
resulting treatment policies react to patient covariates and income.
"""

from __future__ import annotations

import logging

from e3.error import E3Error


logger = logging.getLogger("dtr")


class DTRError(E3Error):
    """Base class for all errors raised by e3.dtr."""
