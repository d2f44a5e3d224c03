"""Urban spatial-structure mining from taxi trajectories and road networks."""

__version__ = "0.1.0"
