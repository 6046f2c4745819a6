"""Token-indexed parameter plugins (JTok, JTok-M) for a toy Transformer, with
scaling-law and lookup-traffic tooling."""

__version__ = "0.1.0"
