"""
Randomized small problems for likelihood and gradient agreement checks
"""
from typing import NamedTuple, Optional

import numpy as np

from src.estimation.kalman import SupervisorySpec, SystemModel
from src.estimation.params import CovParam, build_param


class Problem(NamedTuple):
    model: SystemModel
    spec: SupervisorySpec
    y_o: np.ndarray
    param: CovParam
    theta: np.ndarray


def random_spd(rng: np.random.Generator, n: int, scale: float = 1.0, floor: float = 0.1) -> np.ndarray:
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T / n + floor * np.eye(n))


def random_problem(
    rng: np.random.Generator,
    d: Optional[int] = None,
    m: Optional[int] = None,
    N: Optional[int] = None,
    kind: Optional[str] = None,
    n_supervised: Optional[int] = None,
    process: str = "fixed",
    time_varying: bool = True,
) -> Problem:
    """
    d <= 3, m <= 3, N <= 8, 0-3 supervised states, random SPD Q/P0/Psi and random theta.

    Unset arguments are drawn from rng.
    """
    d = int(rng.integers(1, 4)) if d is None else d
    m = int(rng.integers(1, 4)) if m is None else m
    N = int(rng.integers(1, 9)) if N is None else N
    kind = str(rng.choice(["isotropic", "diagonal", "cholesky"])) if kind is None else kind
    n_supervised = int(rng.integers(0, min(3, N) + 1)) if n_supervised is None else n_supervised

    def transition():
        return np.eye(d) + 0.3 * rng.normal(size=(d, d))

    if time_varying:
        F = np.stack([transition() for _ in range(N)])
        H = rng.normal(size=(N, m, d))
    else:
        F = np.repeat(transition()[None], N, axis=0)
        H = np.repeat(rng.normal(size=(m, d))[None], N, axis=0)
    model = SystemModel(
        F=F,
        B=rng.normal(size=(N, d, 1)),
        H=H,
        u=rng.normal(size=(N, 1)),
        x0=rng.normal(size=d),
        P0=random_spd(rng, d),
    )

    param = build_param(kind, m, random_spd(rng, d, scale=0.5), process=process)
    theta = param.theta + 0.3 * rng.normal(size=param.p)

    if n_supervised:
        indices = np.sort(rng.choice(np.arange(1, N + 1), size=n_supervised, replace=False))
        n_obs = int(rng.integers(1, n_supervised * d + 2))
        spec = SupervisorySpec(
            indices=tuple(int(k) for k in indices),
            Hs=rng.normal(size=(n_obs, n_supervised * d)),
            Psi=random_spd(rng, n_obs, scale=0.2),
            ys=rng.normal(size=n_obs),
            state_dim=d,
        )
    else:
        spec = SupervisorySpec.empty(d)

    y_o = rng.normal(size=(N, m)) * 2.0
    return Problem(model=model, spec=spec, y_o=y_o, param=param, theta=theta)
