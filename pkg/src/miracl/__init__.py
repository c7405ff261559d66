"""Meta multi-objective RL with composite learning and PSA weight diversity for supply chains."""

__version__ = "0.1.0"
