"""Cascading line outages under DC power flow and optimal load shedding."""
from .cascade import HARD, SmoothingParams, simulate
from .netmodel import PowerNetwork, ieee57, load_case, sever
from .protection import identify_disturbance, run_nps, run_rps, verify_flows
from .solver import NPS, RPS, SolverConfig, integrate

__version__ = "0.1.0"
