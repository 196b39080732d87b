"""Numerical Gauss–Green identities for divergence-measure fields on open sets."""
from . import cauchyflux, fields, geometry, quadrature, regdist, traces
from .fields import catalog
from .geometry import EpsilonSchedule, SetDescriptor, ball, box, polygon, signed_distance
from .traces import TraceEstimate, exterior_trace, interior_trace

__version__ = "0.1.0"

__all__ = [
    "cauchyflux", "fields", "geometry", "quadrature", "regdist", "traces", "catalog", "EpsilonSchedule",
    "SetDescriptor", "ball", "box", "polygon", "signed_distance", "TraceEstimate", "exterior_trace",
    "interior_trace",
]
