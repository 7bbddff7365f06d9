"""
Experiment configuration: pydantic models plus a JSON loader that merges the
config file over the defaults
"""
import json
import logging
import re
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

import settings
from kronround.quantize import QuantizerSpec
from kronround.transform import is_power_of_two

logger = logging.getLogger(__name__)

ALGORITHM_PATTERN = re.compile(r"^(nearest|ldlq|yaqa|yaqa-wavefront|guidedquant\((\d+)\))$")


class ModelSpec(BaseModel):
    dims: List[int] = Field(default_factory=lambda: [8, 8, 4])
    seed: int = 0
    weight_scale: float = Field(default=1.5, gt=0)
    mix: float = Field(default=0.5, ge=0.0, lt=1.0)

    @field_validator('dims')
    @classmethod
    def check_dims(cls, dims: List[int]) -> List[int]:
        if len(dims) < 2:
            raise ValueError("need an input size and at least one layer")
        if any(d < 1 or d > 64 for d in dims):
            raise ValueError("every dimension must lie in [1, 64]")
        if dims[-1] < 2:
            raise ValueError("the softmax head needs at least 2 classes")
        return dims


class DataSpec(BaseModel):
    count: int = Field(default=64, ge=1)
    seq_len: int = Field(default=4, ge=1)
    correlation: float = Field(default=0.5, ge=0.0, lt=1.0)
    seed: int = 1
    eval_count: int = Field(default=128, ge=1)


class SketchSpec(BaseModel):
    method: Literal['ldlq', 'a', 'b', 'powerfull', 'vanloan'] = 'vanloan'
    iters: int = Field(default=2, ge=0)
    label_mode: Literal['exact', 'monte-carlo'] = 'exact'
    samples: int = Field(default=1, ge=1)


class QuantizerConfig(BaseModel):
    bits: int = Field(default=4, ge=1, le=16)
    mode: Literal['nearest', 'stochastic'] = 'nearest'
    scale: Dict[str, Union[int, float]] = Field(default_factory=lambda: {'groupwise': 8})
    block: Tuple[int, int] = (1, 1)

    @model_validator(mode='after')
    def check_scale(self) -> "QuantizerConfig":
        keys = set(self.scale)
        if keys not in ({'groupwise'}, {'step'}):
            raise ValueError("scale must be {'groupwise': len} or {'step': value}")
        if 'step' in keys and not self.scale['step'] > 0:
            raise ValueError("step must be positive")
        if 'groupwise' in keys:
            if int(self.scale['groupwise']) != self.scale['groupwise'] or self.scale['groupwise'] < 1:
                raise ValueError("groupwise length must be a positive integer")
            if self.bits < 2:
                raise ValueError("groupwise absmax scaling needs bits >= 2")
        if min(self.block) < 1:
            raise ValueError("block shape must be positive")
        return self

    def to_spec(self, bits: Optional[int] = None) -> QuantizerSpec:
        config = self.model_dump()
        if 'groupwise' in config['scale']:
            config['scale'] = {'groupwise': int(config['scale']['groupwise'])}
        if bits is not None:
            config['bits'] = bits
        return QuantizerSpec.from_dict(config)


class ExperimentConfig(BaseModel):
    model: ModelSpec = Field(default_factory=ModelSpec)
    data: DataSpec = Field(default_factory=DataSpec)
    sketch: SketchSpec = Field(default_factory=SketchSpec)
    quantizer: QuantizerConfig = Field(default_factory=QuantizerConfig)
    layer: int = Field(default=0, ge=0)
    incoherence: bool = False
    algorithms: List[str] = Field(default_factory=lambda: ['nearest', 'ldlq', 'yaqa'])
    bit_widths: List[int] = Field(default_factory=list)
    trials: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)
    reg: float = Field(default=1e-4, ge=0.0)
    output: str = Field(default_factory=lambda: settings.output_dir)

    @field_validator('algorithms')
    @classmethod
    def check_algorithms(cls, algorithms: List[str]) -> List[str]:
        if not algorithms:
            raise ValueError("at least one algorithm is required")
        for name in algorithms:
            if not ALGORITHM_PATTERN.match(name):
                raise ValueError(f"unknown algorithm {name!r}; expected nearest, ldlq, yaqa, yaqa-wavefront or guidedquant(g)")
        return algorithms

    @field_validator('bit_widths')
    @classmethod
    def check_bit_widths(cls, bit_widths: List[int]) -> List[int]:
        if any(b < 2 or b > 16 for b in bit_widths):
            raise ValueError("bit widths must lie in [2, 16]")
        return bit_widths

    @model_validator(mode='after')
    def check_layer(self) -> "ExperimentConfig":
        dims = self.model.dims
        if self.layer >= len(dims) - 1:
            raise ValueError(f"layer {self.layer} does not exist in a {len(dims) - 1}-layer model")
        n, m = dims[self.layer], dims[self.layer + 1]
        if self.incoherence and not (is_power_of_two(m) and is_power_of_two(n)):
            raise ValueError(f"incoherence processing needs power-of-two layer dims, got {m}x{n}")
        group = self.quantizer.scale.get('groupwise')
        if group is not None and n % int(group):
            raise ValueError(f"group length {int(group)} does not divide the {n} layer inputs")
        gx, gy = self.quantizer.block
        if m % gx or n % gy:
            raise ValueError(f"block shape {(gx, gy)} does not tile the {m}x{n} layer")
        for name in self.algorithms:
            groups = ALGORITHM_PATTERN.match(name).group(2)
            if groups is not None and m % int(groups):
                raise ValueError(f"{name}: group count does not divide {m} output channels")
        return self

    def bit_list(self) -> List[int]:
        return list(self.bit_widths) or [self.quantizer.bits]


def validation_details(error: ValidationError) -> List[str]:
    """'quantizer.bits: Input should be ...' for every pydantic error"""
    details = []
    for err in error.errors():
        path = ".".join(str(p) for p in err['loc'])
        details.append(f"{path}: {err['msg']}" if path else err['msg'])
    return details


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != 'scale':
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class ExperimentConfigLoader:
    """Loads experiment configs, creating the file with defaults when absent"""

    def __init__(self, config_file: str = "experiment_config.json"):
        self.config_file = config_file
        self.default_config = ExperimentConfig().model_dump(mode='json')

    def load_config(self, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
        """Merge the file (then overrides) over the defaults and validate"""
        try:
            with open(self.config_file, 'r') as f:
                config = json.load(f)
        except FileNotFoundError:
            logger.info(f"Config {self.config_file} not found, writing defaults")
            self.save_config(self.default_config)
            config = {}
        merged = _deep_merge(self.default_config, config)
        if overrides:
            merged = _deep_merge(merged, overrides)
        return ExperimentConfig.model_validate(merged)

    def save_config(self, config: Union[Dict[str, Any], ExperimentConfig]):
        if isinstance(config, ExperimentConfig):
            config = config.model_dump(mode='json')
        with open(self.config_file, 'w') as f:
            json.dump(config, f, indent=2)
