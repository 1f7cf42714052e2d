"""Rendering of immunization experiment results.

Reads the experiment runner's results.csv (never modifying it) and draws
the two figure families: per-concept similarity-vs-adaptation-steps curves
with the un-immunized arm dashed, and gap-ratio bar charts per method.
"""

__version__ = "0.1.0"

from .render import (  # noqa: F401
    EXPECTED_HEADER,
    EmptySelection,
    PlotSpec,
    SchemaMismatch,
    load_rows,
    render,
    render_grid,
)
