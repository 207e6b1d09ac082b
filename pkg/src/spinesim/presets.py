"""Built-in model fixtures used by the verification suites and the CLI.

Four presets:

MODEL-SYM    two-state symmetric chain, binary branching everywhere. Every
             spectral quantity has a closed form, which makes it the
             workhorse oracle fixture.
MODEL-ASYM   two-state chain with asymmetric rates, state-dependent branching
             rate and a mixed offspring law at state 1; exercises every
             state-dependent code path.
MODEL-BM     Brownian motion on (0, pi) killed at the boundary, constant
             binary branching; the continuum backend with an analytic
             eigentriple.
MODEL-HEAVY  the MODEL-SYM motion with the heavy-tailed offspring law at both
             states; the divergent side of the dichotomy contrast.
"""

import math

from .model import (
    BranchingParams,
    FiniteChainMotion,
    FiniteOffspring,
    HeavyTailOffspring,
    KilledDiffusion1D,
    ModelSpec,
)

PRESET_NAMES = ("MODEL-SYM", "MODEL-ASYM", "MODEL-BM", "MODEL-HEAVY")


def preset(name, step_dt=None, bridge_correction=True):
    """Build one of the named fixtures; step knobs apply to MODEL-BM only."""
    binary = FiniteOffspring([2], [1.0])
    if name == "MODEL-SYM":
        motion = FiniteChainMotion([[-1.0, 1.0], [1.0, -1.0]], measure=[1.0, 1.0])
        return ModelSpec(motion, BranchingParams([1.0, 1.0], [binary, binary]), name)
    if name == "MODEL-ASYM":
        motion = FiniteChainMotion([[-1.0, 1.0], [2.0, -2.0]], measure=[1.0, 1.0])
        mixed = FiniteOffspring([2, 3], [0.5, 0.5])
        return ModelSpec(motion, BranchingParams([1.0, 2.0], [binary, mixed]), name)
    if name == "MODEL-BM":
        motion = KilledDiffusion1D(
            0.0, math.pi, step_dt=step_dt or 1e-3, bridge_correction=bridge_correction
        )
        return ModelSpec(motion, BranchingParams(1.0, binary), name)
    if name == "MODEL-HEAVY":
        motion = FiniteChainMotion([[-1.0, 1.0], [1.0, -1.0]], measure=[1.0, 1.0])
        heavy = HeavyTailOffspring()
        return ModelSpec(motion, BranchingParams([1.0, 1.0], [heavy, heavy]), name)
    raise ValueError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")


def default_root(spec):
    """Starting point used when a run does not specify one."""
    return 0 if spec.is_finite else math.pi / 2
