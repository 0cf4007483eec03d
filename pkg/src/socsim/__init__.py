"""socsim: a generative social-simulation engine.

Societal environment (urban, social, economic spaces), a topic-addressed
agent message bus, group-based deterministic agent execution, and a social
-experiment toolbox with a CLI and HTTP control gateway.
"""

__version__ = "0.1.0"
