from .vgraph import *  # NOQA
from .deit import *  # NOQA
