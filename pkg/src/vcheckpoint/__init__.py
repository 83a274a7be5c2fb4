from .vcheckpoint import *  # NOQA
