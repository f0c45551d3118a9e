"""Numerical core: meshes, coefficients, Q1 assembly, DD-LOD basis and the control solver."""
