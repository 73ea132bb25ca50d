"""Numerical laboratory for convex linear-growth variational problems
posed on the symmetric gradient of a displacement field.

The package minimises viscosity-regularised energies on structured grids
and probes, at desk scale, the quantitative structures of the underlying
theory: ellipticity envelopes, recession functions, excess decay,
Korn/Poincare-type inequalities and uniqueness modulo rigid deformations.
"""

__version__ = "0.1.0"
