"""Self-extending agent runtime: assess capability gaps, synthesize tools, validate them
in isolated environments and keep the good ones as reusable MCP servers."""

__version__ = "0.1.0"
