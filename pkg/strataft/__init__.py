"""
strataft - penalized weighted Buckley-James GEE for clustered AFT models

Estimation and variable selection for accelerated failure time models with
clustered, right-censored failure times collected under stratified sampling.
"""

__version__ = "0.1.0"
