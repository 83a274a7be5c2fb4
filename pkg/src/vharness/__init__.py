from .vharness import *  # NOQA
