"""Semiclassical parameters (mu, h, tau) and their admissible range."""

from __future__ import annotations

from dataclasses import dataclass, asdict


class AdmissibilityError(ValueError):
    """Raised when (mu, h) leave the range 1 <= mu <= c / h."""


@dataclass(frozen=True)
class SemiclassicalParams:
    """Field strength ``mu``, Planck constant ``h`` and energy level ``tau``.

    ``mu_h_cap`` is the constant ``c`` in ``mu <= c / h``. Setting
    ``validate=False`` only keeps ``h > 0``; it exists for lattice checks
    at ``mu = 0`` (free Laplacian) that sit outside the physical range.
    """

    mu: float
    h: float
    tau: float = 0.0
    mu_h_cap: float = 1.0
    validate: bool = True

    def __post_init__(self):
        if not self.h > 0.0:
            raise AdmissibilityError(f"h must be positive, got {self.h}")
        if not self.validate:
            return
        if self.h > 1.0:
            raise AdmissibilityError(f"h must lie in (0, 1], got {self.h}")
        if self.mu < 1.0:
            raise AdmissibilityError(f"mu must be >= 1, got {self.mu}")
        if self.mu * self.h > self.mu_h_cap * (1.0 + 1e-12):
            raise AdmissibilityError(
                f"mu*h = {self.mu * self.h:g} exceeds the cap c = {self.mu_h_cap:g}"
            )

    @property
    def mu_h(self) -> float:
        return self.mu * self.h

    def replace(self, **changes) -> "SemiclassicalParams":
        data = asdict(self)
        data.update(changes)
        return SemiclassicalParams(**data)

    def to_dict(self) -> dict:
        return asdict(self)
