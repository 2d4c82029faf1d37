"""On-the-fly dynamic radiance field training with projected-color conditioning
and a transitioned occupancy grid."""

__version__ = "0.1.0"
