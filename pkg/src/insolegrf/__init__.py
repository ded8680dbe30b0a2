"""Ground-reaction-force estimation from piezoresistive insole sensors."""

__version__ = "0.1.0"
