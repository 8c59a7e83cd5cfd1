"""Subject-level ECG simulation: phantom placement, activation and 8-lead traces."""
from __future__ import annotations

import numpy as np

from ..geometry import ELECTRODE_NAMES, N_ELECTRODES, SizeError
from ..synth import TorsoSpec, heart_frame
from .eikonal import ActivationMap, solve_eikonal
from .phantom import HeartPhantom, PhantomSpec, build_phantom, frame_from_axis
from .signals import CHANNELS, EcgTrace, derive_leads, lead_field, vm_matrix

DEFAULT_DT = 1.0  # ms
DEFAULT_UPSTROKE = 10.0  # ms
TAIL_MS = 10.0


def phantom_for_torso(spec: TorsoSpec, pspec: PhantomSpec | None = None) -> HeartPhantom:
    """Place the phantom at the torso's heart centre with its long axis along the heart axis."""
    centre, apex_dir = heart_frame(spec)
    return build_phantom(pspec, centre=centre, frame=frame_from_axis(apex_dir))


def time_axis(act: ActivationMap, dt: float = DEFAULT_DT, upstroke_ms: float = DEFAULT_UPSTROKE) -> np.ndarray:
    end = act.max_time + upstroke_ms + TAIL_MS
    return np.arange(0.0, end + 0.5 * dt, dt)


def simulate_ecg(
    phantom: HeartPhantom,
    electrodes,
    act: ActivationMap | None = None,
    dt: float = DEFAULT_DT,
    upstroke_ms: float = DEFAULT_UPSTROKE,
    times=None,
) -> EcgTrace:
    """8-lead trace for a (10, 3) electrode set (LA, RA, LL, RL, V1..V6; RL unused)."""
    el = np.asarray(electrodes, dtype=float)
    if el.shape != (N_ELECTRODES, 3):
        raise SizeError(f"expected (10, 3) electrodes, got {el.shape}")
    act = act if act is not None else solve_eikonal(phantom)
    times = time_axis(act, dt, upstroke_ms) if times is None else np.asarray(times, dtype=float)
    vm = vm_matrix(act.tau, phantom.mask, times, upstroke_ms)
    pos = {name: el[i] for i, name in enumerate(ELECTRODE_NAMES)}
    W = np.stack([lead_field(phantom, pos[c]) for c in CHANNELS], axis=1)
    phi = vm @ W  # (T, 9)
    trace = derive_leads(phi.T, dt=dt, t0=float(times[0]) if len(times) else 0.0)
    trace.flags.extend(phantom.flags)
    if act.unreachable:
        trace.flags.append(f"{len(act.unreachable)} unreachable myocardial voxels")
    return trace
