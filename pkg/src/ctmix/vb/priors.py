from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from ..errors import DomainError


@dataclass(frozen=True)
class Priors:
    """Hyperparameters for the variational mixture engines.

    Values are on the standardized data scale. ``tau0=None`` means
    ``d + 2``. ``kappa0`` is the prior precision multiplier for component
    locations in every family (Normal-Wishart for MN/Mt, isotropic normal
    for MFA/MtFA).
    """

    alpha0: float = 1.0
    kappa0: float = 0.01
    tau0: Optional[float] = None
    sigma0: float = 1.0
    a: float = 1e-3
    b: float = 1e-3
    lambda0: int = 100
    epsilon: float = 1e-3

    def __post_init__(self):
        for name in ("alpha0", "kappa0", "sigma0", "a", "b", "epsilon"):
            if not getattr(self, name) > 0:
                raise DomainError(f"prior {name} must be positive")
        if int(self.lambda0) != self.lambda0 or self.lambda0 < 1:
            raise DomainError("lambda0 must be an integer >= 1")

    def wishart_dof(self, d: int) -> float:
        tau0 = d + 2.0 if self.tau0 is None else float(self.tau0)
        if tau0 < d:
            raise DomainError(f"tau0={tau0} must be at least d={d}")
        return tau0

    def scale_matrix(self, d: int) -> np.ndarray:
        return self.sigma0 * np.eye(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Priors":
        return cls(**data)

    def with_(self, **changes) -> "Priors":
        return replace(self, **changes)
