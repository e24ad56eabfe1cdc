"""Figure rendering for leashed benchmark telemetry."""

from .render import KINDS, FigureSpec, RenderResult, render
from .schemas import SchemaError

__version__ = "0.1.0"
