from .vquant import *  # NOQA
from .qgraph import *  # NOQA
