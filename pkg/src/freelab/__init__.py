"""Remote-lab orchestration suite: control server, agent SDK and admin CLI."""

__version__ = "0.1.0"
