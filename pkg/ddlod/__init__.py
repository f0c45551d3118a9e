__version__ = "0.1.0"
__title__ = "DDLOD"
__description__ = "Multiscale (DD-LOD) finite elements for elliptic optimal control with rough coefficients"
__license__ = "MIT"
