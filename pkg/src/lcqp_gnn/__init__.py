"""LCQP toolkit: interior-point reference solver, graph encoding, and message-passing predictors."""
__version__ = "0.1.0"
