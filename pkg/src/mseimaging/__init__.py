"""Frequency-domain ADMM wavefield-reconstruction imaging of microseismic events."""
from .grid import Acquisition, Grid, Model, read_model, write_model
from .engine import EventSet, InversionConfig, run_inversion
from .synthesis import SpectraData, SyntheticEvent, read_data, synthesize_data, write_data

__all__ = [
    "Acquisition",
    "EventSet",
    "Grid",
    "InversionConfig",
    "Model",
    "SpectraData",
    "SyntheticEvent",
    "read_data",
    "read_model",
    "run_inversion",
    "synthesize_data",
    "write_data",
    "write_model",
]
