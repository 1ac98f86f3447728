"""Simulation configuration and the strict scenario-file loader."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from typing import Any, Optional

from ..ledger import ConsensusParams, GasSchedule
from ..manager import RateLimits

MODELS = ("edsc", "baseline")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadConfig:
    subscribers: int = 10
    # mean seconds between oracle emissions; None follows the block interval
    emit_interval: Optional[float] = None
    oracle_node: int = 0
    gas_price: int = 20
    gas_limit: int = 150_000
    consume_gas: int = 120_000
    subscription_fee: int = 1
    max_subscription_fee: int = 10
    inclusion_fee: int = 50
    # baseline only: blocks (counting the request block) before the oracle answers
    oracle_confirmations: int = 2
    oracle_response_latency: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    model: str = "edsc"
    node_count: int = 20
    hashpower: tuple[float, ...] = ()
    block_interval: float = 12.42
    block_delay: float = 2.3
    msg_delay_ms: float = 100.0
    hash_wait_ms: float = 500.0
    run_length: int = 10_000
    block_gas_limit: int = 8_000_000
    seed: int = 0
    finality_margin: int = 6
    tail_blocks: int = 20
    activation_delay: int = 2
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    limits: RateLimits = field(default_factory=RateLimits)
    schedule: GasSchedule = field(default_factory=GasSchedule)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.node_count < 2:
            raise ConfigError("node_count must be at least 2")
        if self.hashpower:
            if len(self.hashpower) != self.node_count:
                raise ConfigError("hashpower needs one share per node")
            if any(s <= 0 for s in self.hashpower) or abs(sum(self.hashpower) - 1.0) > 1e-9:
                raise ConfigError("hashpower shares must be positive and sum to 1")
        for name in ("block_interval",):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("block_delay", "msg_delay_ms", "hash_wait_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.run_length < 1 or self.finality_margin < 0 or self.tail_blocks < 0:
            raise ConfigError("run_length must be positive and margins non-negative")
        if self.block_gas_limit <= 0:
            raise ConfigError("block_gas_limit must be positive")
        w = self.workload
        if not 0 <= w.oracle_node < self.node_count:
            raise ConfigError("workload.oracle_node is not a node index")
        if w.subscribers < 1 or w.oracle_confirmations < 1:
            raise ConfigError("workload needs at least one subscriber and one confirmation")
        if w.emit_interval is not None and w.emit_interval <= 0:
            raise ConfigError("workload.emit_interval must be positive")
        if w.oracle_response_latency < 0:
            raise ConfigError("workload.oracle_response_latency must be non-negative")

    @property
    def shares(self) -> tuple[float, ...]:
        return self.hashpower or tuple(1.0 / self.node_count for _ in range(self.node_count))

    @property
    def emit_interval(self) -> float:
        return self.workload.emit_interval or self.block_interval

    @property
    def consensus(self) -> ConsensusParams:
        return ConsensusParams(gas_limit=self.block_gas_limit, schedule=self.schedule, limits=self.limits,
                               activation_delay=self.activation_delay)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


# -- loading ----------------------------------------------------------------------

def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return from_mapping(tp, value, path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        item = typing.get_args(tp)[0]
        return tuple(_coerce(item, v, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported type {tp!r}")


def from_mapping(cls, data: Any, path: str = "scenario"):
    """Build ``cls`` from a JSON object; unknown keys are errors, missing keys take defaults."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from None


def to_mapping(obj) -> dict:
    return dataclasses.asdict(obj)
