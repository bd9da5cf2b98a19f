"""Numerical laboratory for the deformed Hermitian-Yang-Mills and J-equations.

Modules:
    hermitian  pointwise Hermitian linear algebra and scalar operators
    torus      periodic grid fields and finite-difference complex Hessians
    elliptic   residuals, linearizations and Newton-Krylov solvers
    flows      explicit line-bundle mean curvature flow and J-flow
    bochner    pointwise and grid Bochner identity checks
    shrinker   radial self-shrinker ODEs, scans and barriers
    cli        batch entry point
"""

__version__ = "0.1.0"
