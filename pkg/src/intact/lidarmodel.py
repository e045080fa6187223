"""Closed-form LiDAR power, energy, and resolution budget calculator.

All operations are pure functions of a physical configuration. The severity
mapping at the bottom converts an energy deficit into point-drop and noise
parameters for training/evaluation, bridging the sensing budget to the
perturbation model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError
from .perturb import PerturbationSpec

SPEED_OF_LIGHT = 2.99792458e8  # m/s, exact SI value


@dataclass
class LidarConfig:
    e_pulse: float = 1e-6        # J, emitted energy per pulse
    f_pulse: float = 1e5         # Hz, pulse repetition frequency
    eta_laser: float = 0.25      # laser efficiency
    v_motor: float = 12.0        # V
    i_motor: float = 0.5         # A
    eta_motor: float = 0.8       # motor efficiency
    p_signal: float = 2.0        # W, processing power (direct input)
    p_control: float = 1.0       # W, data handling / control
    p_r: float = 1e-9            # W, minimum received signal power
    a_r: float = 1e-3            # m^2, receiver aperture area
    rho: float = 0.5             # target reflectivity
    eta: float = 0.5             # end-to-end system efficiency
    tau: float = 5e-9            # s, pulse width
    lam: float = 905e-9          # m, wavelength
    aperture: float = 0.025      # m, aperture diameter
    k_adc: float = 1e-12         # J per sample-level, ADC constant
    n_bits: int = 8              # ADC resolution

    def __post_init__(self):
        # subsystem drive inputs may be zero (subsystem off); the rest must
        # be strictly positive for the formulas to stay in domain
        nonnegative = {
            "e_pulse": self.e_pulse, "f_pulse": self.f_pulse, "v_motor": self.v_motor,
            "i_motor": self.i_motor, "p_signal": self.p_signal, "p_control": self.p_control,
        }
        positive = {
            "p_r": self.p_r, "a_r": self.a_r, "tau": self.tau, "lam": self.lam,
            "aperture": self.aperture, "k_adc": self.k_adc,
        }
        problems = [name for name, v in nonnegative.items() if v < 0]
        problems += [name for name, v in positive.items() if v <= 0]
        for name, v in (("eta_laser", self.eta_laser), ("eta_motor", self.eta_motor),
                        ("rho", self.rho), ("eta", self.eta)):
            if not 0.0 < v <= 1.0:
                problems.append(name)
        if self.n_bits < 1:
            problems.append("n_bits")
        if problems:
            raise DomainError(f"invalid physical parameters: {', '.join(sorted(problems))}")


@dataclass
class LidarBudget:
    p_laser: float
    p_scan: float
    p_adc: float
    p_total: float
    e_pulse_available: float
    e_pulse_required: float
    delta_r: float
    delta_theta: float
    f_s: float


def laser_power(cfg: LidarConfig) -> float:
    """Average emitter power: pulse energy times rate over laser efficiency."""
    if cfg.eta_laser <= 0:
        raise DomainError("eta_laser must be positive")
    return cfg.e_pulse * cfg.f_pulse / cfg.eta_laser


def scan_power(cfg: LidarConfig) -> float:
    """Mechanical scanning power: motor V*I over motor efficiency."""
    if cfg.eta_motor <= 0:
        raise DomainError("eta_motor must be positive")
    return cfg.v_motor * cfg.i_motor / cfg.eta_motor


def pulse_energy_for_range(cfg: LidarConfig, r: float) -> float:
    """Pulse energy needed to meet the receiver floor at range r (grows as r^4)."""
    if r <= 0:
        raise DomainError(f"range must be positive, got {r}")
    return cfg.p_r * (4.0 * math.pi * r * r) ** 2 * cfg.tau / (cfg.a_r * cfg.rho * cfg.eta)


def range_resolution(cfg: LidarConfig) -> float:
    """Two-way range resolution set by the pulse width."""
    if cfg.tau <= 0:
        raise DomainError("tau must be positive")
    return SPEED_OF_LIGHT * cfg.tau / 2.0


def angular_resolution(cfg: LidarConfig) -> float:
    """Diffraction-limited beam divergence: wavelength over aperture."""
    if cfg.aperture <= 0:
        raise DomainError("aperture must be positive")
    return cfg.lam / cfg.aperture


def adc_power(cfg: LidarConfig, delta_r: float):
    """(P_adc, f_s): sampling at c/delta_r with 2^n_bits levels."""
    if delta_r <= 0:
        raise DomainError(f"delta_r must be positive, got {delta_r}")
    if cfg.n_bits < 1:
        raise DomainError("n_bits must be at least 1")
    f_s = SPEED_OF_LIGHT / delta_r
    return cfg.k_adc * f_s * 2.0 ** cfg.n_bits, f_s


def total_power(cfg: LidarConfig, r: float) -> LidarBudget:
    """Compose the full budget and the pulse-energy requirement at range r."""
    p_laser = laser_power(cfg)
    p_scan = scan_power(cfg)
    delta_r = range_resolution(cfg)
    p_adc, f_s = adc_power(cfg, delta_r)
    return LidarBudget(
        p_laser=p_laser,
        p_scan=p_scan,
        p_adc=p_adc,
        p_total=p_laser + p_scan + cfg.p_signal + cfg.p_control,
        e_pulse_available=cfg.e_pulse,
        e_pulse_required=pulse_energy_for_range(cfg, r),
        delta_r=delta_r,
        delta_theta=angular_resolution(cfg),
        f_s=f_s,
    )


def severity_from_budget(budget: LidarBudget, reference: LidarBudget) -> PerturbationSpec:
    """Map the energy deficit against a nominal operating point to a severity.

    Deficit ratio r = clamp(1 - available/required, 0, 1) maps linearly to
    drop fraction 0.5*r and noise sigma 0.1*r, so a total deficit lands on
    the canonical 50% drop / sigma 0.1 test conditions.
    """
    required = reference.e_pulse_required
    if required <= 0:
        raise DomainError("reference budget has no positive pulse-energy requirement")
    ratio = 1.0 - budget.e_pulse_available / required
    ratio = min(max(ratio, 0.0), 1.0)
    return PerturbationSpec(drop_fraction=0.5 * ratio, sigma=0.1 * ratio)


def budget_table(cfg: LidarConfig, r: float) -> str:
    """Human-readable budget rendering for the CLI."""
    b = total_power(cfg, r)
    rows = [
        ("laser power [W]", b.p_laser),
        ("scan power [W]", b.p_scan),
        ("signal power [W]", cfg.p_signal),
        ("control power [W]", cfg.p_control),
        ("total power [W]", b.p_total),
        ("ADC power [W]", b.p_adc),
        ("ADC sample rate [Hz]", b.f_s),
        (f"pulse energy required at {r:g} m [J]", b.e_pulse_required),
        ("pulse energy available [J]", b.e_pulse_available),
        ("range resolution [m]", b.delta_r),
        ("angular resolution [rad]", b.delta_theta),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value:.6g}" for name, value in rows)
