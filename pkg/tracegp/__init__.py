"""
tracegp - Trace-norm constrained matrix-variate GP regression and bipartite ranking
"""

__version__ = '0.1.0'
