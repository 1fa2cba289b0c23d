"""Waypoint-curriculum PointNav: occupancy-grid simulator, A* planner, twin VAE perception and PPO."""

__version__ = "0.1.0"
