"""Ito/Stratonovich bookkeeping for linear multiplicative noise ``sigma(xi) = xi``.

For ``d xi = ... + xi o dW`` the Ito form gains the drift ``c * xi`` with
``sum_k D sigma_k(xi) sigma_k(xi) = gamma * xi``.  Ito calculus puts a factor 1/2
in front of that sum (``half``); ``full`` keeps the coefficient ``gamma`` itself
and is retained so the literal form of the system can be reproduced and compared.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .wiener import NoiseSpec, gamma_constant


class CorrectionConvention(enum.Enum):
    HALF_GAMMA = "half"
    FULL_GAMMA = "full"

    @classmethod
    def parse(cls, value) -> "CorrectionConvention":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"half": cls.HALF_GAMMA, "half_gamma": cls.HALF_GAMMA,
                   "full": cls.FULL_GAMMA, "full_gamma": cls.FULL_GAMMA}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown correction convention {value!r}; use 'half' or 'full'") from None


@dataclass(frozen=True)
class EffectiveParams:
    gamma_u: float  # coefficient of the +gamma_u * u drift
    alpha_eff: float  # damping of v after the correction shift


def stratonovich_correction(spec: NoiseSpec, convention=CorrectionConvention.HALF_GAMMA) -> float:
    convention = CorrectionConvention.parse(convention)
    factor = 0.5 if convention is CorrectionConvention.HALF_GAMMA else 1.0
    return factor * gamma_constant(spec)


def effective_params(model, spec1: NoiseSpec, spec2: NoiseSpec,
                     convention=CorrectionConvention.HALF_GAMMA) -> EffectiveParams:
    """Drift coefficients of the Ito-form system.

    The u-equation gains ``+c1 * u``; the v-equation's damping becomes ``alpha - c2``.
    """
    c1 = stratonovich_correction(spec1, convention)
    c2 = stratonovich_correction(spec2, convention)
    return EffectiveParams(gamma_u=c1, alpha_eff=model.alpha - c2)
