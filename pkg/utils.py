from __future__ import annotations

import os
import time
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple, Union

# numpy loads lazily here: BDSDP_THREADS has to reach the BLAS variables first
if TYPE_CHECKING:
    import numpy as np

SeedLike = Union[None, int, "np.random.Generator"]

VERSION = "1.0.0"

MASK64 = (1 << 64) - 1
THREAD_ENV_VARS = ["OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"]


class BdsdpError(Exception):
    """Root of every error raised by the solver and its front end."""


#==================================================================#
#  Seeds
#==================================================================#
def splitmix64(x: int) -> int:
    """One step of the splitmix64 generator, used to derive trial seeds."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def trial_seed(master_seed: int, index: int) -> int:
    # numpy seeds must fit in 63 bits for some older pickled generators
    return splitmix64((master_seed + index) & MASK64) >> 1


def make_rng(seed: SeedLike) -> np.random.Generator:
    import numpy as np

    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


#==================================================================#
#  Thread caps (BDSDP_THREADS)
#==================================================================#
def thread_cap(environ: Optional[Dict[str, str]] = None) -> Optional[int]:
    environ = os.environ if environ is None else environ
    raw = environ.get("BDSDP_THREADS")
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise BdsdpError(f"BDSDP_THREADS must be a positive integer, got {raw!r}")
    if value < 1:
        raise BdsdpError(f"BDSDP_THREADS must be a positive integer, got {raw!r}")
    return value


def apply_thread_cap(environ: Optional[Dict[str, str]] = None) -> Optional[int]:
    """Exports BDSDP_THREADS to the BLAS/OpenMP variables. Only effective
    before numpy has loaded its BLAS."""
    environ = os.environ if environ is None else environ
    cap = thread_cap(environ)
    if cap is not None:
        for var in THREAD_ENV_VARS:
            environ[var] = str(cap)
    return cap


#==================================================================#
#  Benchmark sweep specs, e.g. "m=10,20,40" or "fraction=0,0.25,0.5"
#==================================================================#
def parse_sweep(spec: str) -> Tuple[str, List[float]]:
    if "=" not in spec:
        raise BdsdpError(f"Sweep must look like name=v1,v2,...; got {spec!r}")
    name, _, values = spec.partition("=")
    name = name.strip()
    if not name:
        raise BdsdpError(f"Sweep parameter name missing in {spec!r}")
    try:
        parsed = [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise BdsdpError(f"Sweep values must be numbers in {spec!r}")
    if not parsed:
        raise BdsdpError(f"Sweep {spec!r} has no values")
    return name, parsed


class Stopwatch:
    """Use in a `with` block; `elapsed` holds wall seconds afterwards."""

    def __init__(self) -> None:
        self.start = None
        self.elapsed = 0.0

    def __enter__(self) -> Stopwatch:
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_value, exc_traceback) -> None:
        self.elapsed = time.perf_counter() - self.start

    def lap(self) -> float:
        return time.perf_counter() - self.start
