"""Parametric coupling flows, diffeomorphism factorisation and neural contextual BO."""
from . import cbo, diffeo, flows, numkit, taiji
from .flows import ParaCFlowModel, build_paracflow, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
