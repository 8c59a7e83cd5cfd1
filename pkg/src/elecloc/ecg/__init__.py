"""In-silico ECG: Eikonal activation on a voxel phantom, pseudo-ECG and trace comparison."""
from .compare import EcgComparison, compare_ecgs, dtw, pearson, qrs_duration, rs_ratio
from .eikonal import ActivationMap, solve_eikonal
from .phantom import HeartPhantom, PhantomError, PhantomSpec, build_phantom, read_phantom_spec, write_phantom_spec
from .signals import (
    EXTRA_LEADS,
    LEADS,
    EcgTrace,
    ElectrodeInsideError,
    derive_leads,
    pseudo_ecg,
    read_ecg_csv,
    transmembrane,
    write_ecg_csv,
)
from .simulate import phantom_for_torso, simulate_ecg

__all__ = [
    "EXTRA_LEADS",
    "LEADS",
    "ActivationMap",
    "EcgComparison",
    "EcgTrace",
    "ElectrodeInsideError",
    "HeartPhantom",
    "PhantomError",
    "PhantomSpec",
    "build_phantom",
    "compare_ecgs",
    "derive_leads",
    "dtw",
    "pearson",
    "phantom_for_torso",
    "pseudo_ecg",
    "qrs_duration",
    "read_ecg_csv",
    "read_phantom_spec",
    "rs_ratio",
    "simulate_ecg",
    "solve_eikonal",
    "transmembrane",
    "write_ecg_csv",
    "write_phantom_spec",
]
