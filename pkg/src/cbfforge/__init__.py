"""Safety filtering toolbox: learned margins, grid reachability values, and
sampling-based action filters on a Dubins car testbed."""

__version__ = "0.1.0"
