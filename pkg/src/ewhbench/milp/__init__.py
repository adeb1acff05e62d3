from .model import MilpModel, ReducedLp, SparseLp, build_model, zbar_from_state
from .simplex import solve_lp

__all__ = ["MilpModel", "ReducedLp", "SparseLp", "build_model", "zbar_from_state", "solve_lp"]
