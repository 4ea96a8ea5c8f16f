"""Control-theoretic analysis of prompting: attention reachability bounds,
LLM system state machine, prompt optimizers and k-epsilon measurement."""

__version__ = "0.1.0"
