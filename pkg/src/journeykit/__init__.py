"""journeykit: role-transport attention over dual text/structured streams.

Relative position handling is one instance of a general pattern: give every
token a role, realize each role as an invertible operator, and let attention
scores travel the journey from the query's role to the key's role. This
package implements that pattern end to end at desk scale: exact numerics
with a compiled fast path, operator algebra, a retrieval repository, a
two-stream encoder, training objectives, and a command-line interface.
"""

__version__ = "0.1.0"

__all__ = [
    "numerics",
    "operators",
    "schema",
    "attention",
    "repository",
    "model",
    "training",
    "cli",
]
