"""Evolution-strategies training of a routing policy for capacity-limited
transport networks, with a coordinator/worker runtime for parallel fitness
evaluation."""

__version__ = "0.1.0"
