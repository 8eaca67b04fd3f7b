"""Forward-equation pricing for an FX stochastic-local-volatility model with
stochastic spot/variance correlation and correlated Kou jumps."""
from .diffusion import PicardConfig, SchemeConfig, StepOperators
from .grid import GridSpec, build_grid
from .jumps import CommonJumpConfig, JumpStepper
from .model import JumpSpec, KouJumpParams, ModelParams, heston_limit_params, reference_jump_spec, reference_params
from .pricing import Contract, PricingConfig, evolve_density, implied_vol, price_contract, rr10_skew_curve
from .validation import MCConfig, heston_benchmark_price, mc_price

__all__ = [
    "CommonJumpConfig", "Contract", "GridSpec", "JumpSpec", "JumpStepper", "KouJumpParams", "MCConfig",
    "ModelParams", "PicardConfig", "PricingConfig", "SchemeConfig", "StepOperators", "build_grid",
    "evolve_density", "heston_benchmark_price", "heston_limit_params", "implied_vol", "mc_price",
    "reference_jump_spec", "price_contract", "rr10_skew_curve", "reference_params",
]
