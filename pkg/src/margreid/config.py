"""Flat key = value pipeline configuration.

UTF-8 text, one `key = value` per line, '#' starts a comment. Unknown keys
are hard errors so typos never silently fall back to defaults. Defaults are
the cross-validated values used throughout: d_h=800, lambda_l1=1e-7,
sigma_d=0.1, d_ml=400, sigma_k=0.01, lambda_a=1e-8, lambda_b=1e-7 and
300-iteration budgets.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .layer1 import Layer1Config
from .metric import MetricConfig


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    seed: int = 0
    # layer 1
    d_h: int = 800
    lambda_l1: float = 1e-7
    sigma_d: float = 0.1
    kappa: int = 50
    l1_max_iter: int = 300
    # metric layer
    d_ml: int = 400
    sigma_k: float = 0.01
    lambda_a: float = 1e-8
    lambda_b: float = 1e-7
    rank_a: int = 0  # 0 = full rank (d_ml)
    rank_b: int = 0
    rho: int = 10
    ml_max_iter: int = 300
    corrupt_both: bool = False
    # kernel space
    bandwidth: float = 0.0  # 0 = estimate from training stripes
    # splits
    train_identities: int = 316
    # ablations
    no_marg: bool = False
    no_inv: bool = False
    # synthetic data
    synth_identities: int = 128
    synth_latent: int = 16
    synth_noise: float = 0.05

    def layer1_config(self) -> Layer1Config:
        return Layer1Config(
            d_h=self.d_h,
            lam=self.lambda_l1,
            sigma_d=self.sigma_d,
            kappa=self.kappa,
            max_iter=self.l1_max_iter,
            enable_invariance=not self.no_inv,
            enable_marginalization=not self.no_marg,
        )

    def metric_config(self) -> MetricConfig:
        return MetricConfig(
            d_ml=self.d_ml,
            sigma_k=self.sigma_k,
            lambda_a=self.lambda_a,
            lambda_b=self.lambda_b,
            rank_a=self.rank_a or None,
            rank_b=self.rank_b or None,
            rho=self.rho,
            max_iter=self.ml_max_iter,
            enable_marginalization=not self.no_marg,
            corrupt_both=self.corrupt_both,
        )


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config(text: str) -> PipelineConfig:
    known = {f.name: f.type for f in fields(PipelineConfig)}
    cfg = PipelineConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        current = getattr(cfg, key)
        try:
            if isinstance(current, bool):
                if value.lower() not in _BOOL_WORDS:
                    raise ValueError(value)
                parsed = _BOOL_WORDS[value.lower()]
            elif isinstance(current, int):
                parsed = int(value)
            else:
                parsed = float(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from exc
        setattr(cfg, key, parsed)
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def validate_config(cfg: PipelineConfig) -> None:
    if cfg.d_h <= 0 or cfg.d_ml <= 0:
        raise ConfigError("d_h and d_ml must be positive")
    if cfg.kappa <= 0 or cfg.kappa > max(cfg.l1_max_iter, 1):
        raise ConfigError("need 0 < kappa <= l1_max_iter")
    if cfg.sigma_d < 0 or cfg.sigma_k < 0 or cfg.lambda_l1 < 0 or cfg.lambda_a < 0 or cfg.lambda_b < 0:
        raise ConfigError("penalties and corruption scales must be nonnegative")
    if cfg.bandwidth < 0:
        raise ConfigError("bandwidth must be nonnegative (0 = auto)")
    if cfg.rho <= 0 or cfg.train_identities <= 0:
        raise ConfigError("rho and train_identities must be positive")


def dump_config(cfg: PipelineConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(PipelineConfig)]
    return "\n".join(lines) + "\n"
