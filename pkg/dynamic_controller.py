"""
Adaptive discriminator difficulty.

After every discriminator step the batch-mean score on noised real images
moves the accumulator r by +lambda (score > 0.5) or -lambda (otherwise), and
the maximum diffusion step T moves by int(r). r is never reset.
"""

import logging
import math
from pathlib import Path
from typing import Optional, Union

import torch

from errors import ControllerError
from models import ControllerState

logger = logging.getLogger(__name__)

# r is kept at fixed decimal precision so repeated +/-lambda steps land on
# exact multiples (ten steps of 0.1 give 1.0, not 0.9999999999999999)
R_DECIMALS = 12


def new_controller(T_init: int, lam: float, T_min: int, T_max: int) -> ControllerState:
    try:
        return ControllerState(r=0.0, lam=lam, T=T_init, T_min=T_min, T_max=T_max)
    except ValueError as e:
        raise ControllerError(f"Invalid controller configuration: {e}")


def _sign(x: float) -> int:
    return 1 if x > 0 else -1


def update(state: ControllerState, d_real_score: float) -> ControllerState:
    """Apply one adjustment step and return the new state."""
    if not math.isfinite(d_real_score) or not 0.0 <= d_real_score <= 1.0:
        raise ControllerError(f"discriminator score must lie in [0, 1], got {d_real_score}")

    r = round(state.r + _sign(d_real_score - 0.5) * state.lam, R_DECIMALS)
    T = min(max(state.T + math.trunc(r), state.T_min), state.T_max)
    return state.model_copy(update={"r": r, "T": T, "update_count": state.update_count + 1})


def sample_t(
    state: ControllerState,
    generator: Optional[torch.Generator] = None,
    size: Optional[int] = None,
) -> Union[int, torch.Tensor]:
    """Draw t uniformly from {0, ..., T}; a tensor of ``size`` draws when given."""
    shape = (1,) if size is None else (size,)
    draws = torch.randint(0, state.T + 1, shape, generator=generator)
    return int(draws[0]) if size is None else draws


class ControllerTrace:
    """Plain-text trace, one ``update_count,d_real_score,r,T`` record per update."""

    header = "update_count,d_real_score,r,T"

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def initialize(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            self.path.write_text(self.header + "\n")

    def append(self, state: ControllerState, d_real_score: float) -> None:
        try:
            with self.path.open("a") as handle:
                handle.write(f"{state.update_count},{d_real_score:.6f},{state.r:.6f},{state.T}\n")
        except OSError as e:
            logger.error(f"Failed to append controller trace: {e}")
            raise

    def read(self) -> list:
        if not self.path.exists():
            return []
        lines = self.path.read_text().strip().splitlines()[1:]
        records = []
        for line in lines:
            count, score, r, T = line.split(",")
            records.append((int(count), float(score), float(r), int(T)))
        return records
