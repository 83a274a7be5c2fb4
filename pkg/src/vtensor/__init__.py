from .vtensor import *  # NOQA
