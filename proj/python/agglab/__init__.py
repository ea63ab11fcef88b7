"""Graph aggregation layers, rank certificates and a training harness."""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401
