"""Personalized parking and charging discounts for traffic decongestion.

A traffic authority picks per-class discounts at charging and parking
facilities; vehicle classes respond by playing an aggregative routing and
facility-choice game. The lower level is solved by a projected
pseudo-gradient fixed-point loop that also propagates sensitivities, and the
upper level by projected hypergradient descent.
"""
from .agents import (AgentClass, Game, VehicleKind, agent_cost, aggregate_flow, aggregate_sensitivity,
                     build_feasible_polyhedron, make_agent, monotonicity_certificate, pseudo_gradient, step_size)
from .equilibrium import DivergenceError, InnerReport, InnerSolver, inner_loop, verify_ne
from .network import RoadNetwork, build_network, free_flow_distances, linearize_latency, load_tntp, make_network
from .projection import Polyhedron, project, projection_jacobian, step_jacobians

__version__ = "0.1.0"
