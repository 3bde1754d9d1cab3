"""Deliberative GUI agent: propose an action, check it against the thought
before executing, and reflect on the screen change afterwards."""

__version__ = "0.1.0"
