from .vrewrite import *  # NOQA
