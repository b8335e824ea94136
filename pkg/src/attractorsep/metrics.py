"""Scale-invariant SDR and its improvement over the unprocessed mixture."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .dsp import Waveform
from .errors import InvalidInputError

# Caps keep log values finite in reports; residuals below ~1e-12 relative
# map to the +60 cap, alpha ~ 0 maps to the -60 cap.
SI_SDR_CAP_DB = 60.0


@dataclass
class SeparationScore:
    """Per-mixture separation quality under a single source alignment."""

    si_sdr_db: float
    si_sdri_db: float
    permutation: tuple


def si_sdr(estimate: Waveform, target: Waveform) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    The target is rescaled by alpha = <estimate, target> / ||target||^2 and
    the ratio ||alpha*target||^2 / ||estimate - alpha*target||^2 is reported
    in dB, capped to [-60, +60].

    Args:
        estimate: separated waveform.
        target: reference waveform of the same length and rate.

    Returns:
        SI-SDR in dB.
    """
    s_hat = estimate.samples
    s = target.samples
    if len(s_hat) != len(s):
        raise InvalidInputError(
            f"length mismatch: estimate {len(s_hat)} vs target {len(s)}"
        )
    s_energy = float(s @ s)
    if s_energy <= 0.0:
        raise InvalidInputError("target signal is all zero")
    alpha = float(s_hat @ s) / s_energy
    signal = alpha * s
    residual = s_hat - signal
    num = float(signal @ signal)
    den = float(residual @ residual)
    if num <= 0.0:
        return -SI_SDR_CAP_DB
    if den <= 1e-12 * num:
        return SI_SDR_CAP_DB
    return float(np.clip(10.0 * np.log10(num / den), -SI_SDR_CAP_DB, SI_SDR_CAP_DB))


def best_permutation(estimates: list, targets: list) -> tuple:
    """Source alignment maximizing mean SI-SDR over all k! orderings.

    Returns:
        Tuple p where estimate i is scored against target p[i].
    """
    if len(estimates) != len(targets):
        raise InvalidInputError(
            f"count mismatch: {len(estimates)} estimates vs {len(targets)} targets"
        )
    best, best_score = None, -np.inf
    for perm in permutations(range(len(targets))):
        score = np.mean([si_sdr(e, targets[p]) for e, p in zip(estimates, perm)])
        if score > best_score:
            best, best_score = perm, score
    return best


def si_sdri(estimates: list, targets: list, mixture: Waveform) -> SeparationScore:
    """Mean SI-SDR and improvement over the mixture, best-permutation aligned.

    Estimates are aligned to targets by the permutation maximizing mean
    SI-SDR; the improvement subtracts, per aligned target, the SI-SDR of
    the unprocessed mixture against that target.

    Args:
        estimates: k separated waveforms.
        targets: k reference waveforms.
        mixture: the unprocessed mixture waveform.

    Returns:
        SeparationScore with mean SI-SDR, mean SI-SDRi, and the alignment.
    """
    perm = best_permutation(estimates, targets)
    sdrs = [si_sdr(e, targets[p]) for e, p in zip(estimates, perm)]
    base = [si_sdr(mixture, targets[p]) for p in perm]
    mean_sdr = float(np.mean(sdrs))
    mean_imp = float(np.mean([a - b for a, b in zip(sdrs, base)]))
    return SeparationScore(si_sdr_db=mean_sdr, si_sdri_db=mean_imp, permutation=perm)
