"""Simulation and analysis toolkit for spin-photon heralded entanglement between two emitters."""

from .fock import BellTarget, JointState, beam_splitter, bell_fidelity, build_post_pulse_state, herald_project
from .protocol import NoiseParams, ProtocolParams, heralded_state_with_noise

__version__ = "0.1.0"
