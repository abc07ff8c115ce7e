import hashlib
import json
import logging
from typing import Any, Dict, List, Sequence

import yaml
from marshmallow import Schema, ValidationError, fields, post_load, validate, validates_schema

from config import (
    COMPLIANCE_RESET_MODES,
    GENERATION_MODES,
    TRADE_COST_DT_MODES,
    AgentClassSpec,
    EvalConfig,
    ExperimentConfig,
    MarketConfig,
    NetConfig,
    OracleConfig,
    TrainConfig,
)

logger = logging.getLogger(__name__)

POSITIVE = validate.Range(min=0, min_inclusive=False)
NONNEGATIVE = validate.Range(min=0)
UNIT_OPEN = validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False)


class ConfigValidationError(Exception):
    def __init__(self, messages: Dict[str, Any]):
        super().__init__(f"invalid configuration: {messages}")
        self.messages = messages


def _build(cls, data: Dict[str, Any]):
    try:
        return cls(**data)
    except ValueError as e:
        raise ValidationError(str(e))


class MarketSchema(Schema):
    compliance_dates = fields.List(fields.Float(validate=POSITIVE), validate=validate.Length(min=1), load_default=[1.0, 2.0])
    steps_per_period = fields.List(fields.Int(validate=validate.Range(min=1)), validate=validate.Length(min=1), load_default=[24, 24])
    penalty = fields.Float(validate=NONNEGATIVE, load_default=50.0)
    friction = fields.Float(validate=NONNEGATIVE, load_default=2.0)
    price_impact = fields.Float(validate=NONNEGATIVE, load_default=0.5)
    volatility = fields.Float(validate=NONNEGATIVE, load_default=3.0)
    initial_price = fields.Float(load_default=50.0)
    trade_bound = fields.Float(validate=POSITIVE, load_default=50.0)
    trade_cost_dt_mode = fields.Str(validate=validate.OneOf(TRADE_COST_DT_MODES), load_default="dt")
    compliance_reset_mode = fields.Str(validate=validate.OneOf(COMPLIANCE_RESET_MODES), load_default="none")

    @post_load
    def make_config(self, data, **kwargs):
        data["compliance_dates"] = tuple(data["compliance_dates"])
        data["steps_per_period"] = tuple(data["steps_per_period"])
        return _build(MarketConfig, data)


class AgentClassSchema(Schema):
    label = fields.Str(required=True, validate=validate.Length(min=1))
    population = fields.Int(validate=validate.Range(min=1), load_default=1)
    requirement = fields.Float(validate=NONNEGATIVE, load_default=25.0)
    gen_size = fields.Float(validate=NONNEGATIVE, load_default=1.0)
    gen_cost = fields.Float(validate=NONNEGATIVE, load_default=50.0)

    @post_load
    def make_config(self, data, **kwargs):
        return _build(AgentClassSpec, data)


class NetSchema(Schema):
    input_dim = fields.Int(allow_none=True, load_default=None, validate=validate.Range(min=1))
    hidden_layers = fields.Int(validate=validate.Range(min=1), load_default=5)
    nodes_per_layer = fields.Int(validate=validate.Range(min=1), load_default=200)
    activation = fields.Str(validate=validate.OneOf(["silu", "tanh", "softplus", "elu"]), load_default="silu")
    output_scale = fields.Float(validate=POSITIVE, load_default=1000.0)
    seed = fields.Int(load_default=0)

    @post_load
    def make_config(self, data, **kwargs):
        return _build(NetConfig, data)


class TrainSchema(Schema):
    epochs = fields.Int(validate=validate.Range(min=1), load_default=20000)
    batch_size = fields.Int(validate=validate.Range(min=1), load_default=256)
    lr = fields.Float(validate=POSITIVE, load_default=0.001)
    lr_decay_every = fields.Int(validate=validate.Range(min=1), load_default=25)
    lr_decay_factor = fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False), load_default=0.999)
    lr_floor = fields.Float(validate=NONNEGATIVE, load_default=1e-5)
    gamma = fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False), load_default=1.0)
    phi_V = fields.Float(validate=UNIT_OPEN, load_default=0.05)
    phi_L = fields.Float(validate=UNIT_OPEN, load_default=0.25)
    varphi0 = fields.Float(validate=POSITIVE, load_default=50.0)
    c_nu = fields.Float(allow_none=True, validate=NONNEGATIVE, load_default=None)
    c_p = fields.Float(validate=NONNEGATIVE, load_default=0.5)
    eps0 = fields.Float(validate=NONNEGATIVE, load_default=1.0)
    eps_min = fields.Float(validate=NONNEGATIVE, load_default=0.02)
    eps_decay_fraction = fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False), load_default=0.8)
    max_param_norm = fields.Float(validate=POSITIVE, load_default=1e8)
    log_every = fields.Int(validate=NONNEGATIVE, load_default=500)
    seed = fields.Int(load_default=0)

    @validates_schema
    def check_exploration(self, data, **kwargs):
        if data.get("eps_min", 0.02) > data.get("eps0", 1.0):
            raise ValidationError("eps_min must not exceed eps0", "eps_min")

    @post_load
    def make_config(self, data, **kwargs):
        return _build(TrainConfig, data)


class EvalSchema(Schema):
    num_paths = fields.Int(validate=validate.Range(min=1), load_default=10000)
    seed = fields.Int(load_default=1)
    generation_mode = fields.Str(validate=validate.OneOf(GENERATION_MODES), load_default="stochastic")
    out_dir = fields.Str(allow_none=True, load_default=None)

    @post_load
    def make_config(self, data, **kwargs):
        return _build(EvalConfig, data)


class OracleSchema(Schema):
    trade_points = fields.Int(validate=validate.Range(min=1), load_default=3)
    price_points = fields.Int(validate=validate.Range(min=2), load_default=9)
    inventory_points = fields.Int(validate=validate.Range(min=2), load_default=21)
    quadrature_nodes = fields.Int(validate=validate.Range(min=1), load_default=7)
    max_profiles = fields.Int(validate=validate.Range(min=1), load_default=4096)
    max_nodes = fields.Int(validate=validate.Range(min=1), load_default=200000)
    refinement_tolerance = fields.Float(validate=POSITIVE, load_default=0.05)
    nash_tolerance = fields.Float(validate=NONNEGATIVE, load_default=1e-9)

    @validates_schema
    def check_trade_points(self, data, **kwargs):
        if data.get("trade_points", 3) % 2 == 0:
            raise ValidationError("trade_points must be odd so the grid contains 0", "trade_points")

    @post_load
    def make_config(self, data, **kwargs):
        return _build(OracleConfig, data)


class ExperimentSchema(Schema):
    preset = fields.Str(allow_none=True, load_default=None)
    market = fields.Nested(MarketSchema, load_default=dict)
    classes = fields.List(fields.Nested(AgentClassSchema), required=True, validate=validate.Length(min=1))
    net = fields.Nested(NetSchema, load_default=dict)
    train = fields.Nested(TrainSchema, load_default=dict)
    eval = fields.Nested(EvalSchema, load_default=dict)
    oracle = fields.Nested(OracleSchema, load_default=dict)

    @validates_schema
    def check_cross_fields(self, data, **kwargs):
        classes = data.get("classes") or []
        labels = [c.label for c in classes]
        if len(set(labels)) != len(labels):
            raise ValidationError("class labels must be unique", "classes")
        net = data.get("net")
        num_agents = sum(c.population for c in classes)
        if isinstance(net, NetConfig) and net.input_dim is not None and net.input_dim != num_agents + 3:
            raise ValidationError(f"input_dim must equal {num_agents + 3} for {num_agents} agents", "net")

    @post_load
    def make_config(self, data, **kwargs):
        # nested load_default dicts are not run through their schemas
        sections = (("market", MarketSchema), ("net", NetSchema), ("train", TrainSchema), ("eval", EvalSchema), ("oracle", OracleSchema))
        for key, schema in sections:
            if isinstance(data[key], dict):
                data[key] = schema().load(data[key])
        return ExperimentConfig(**data)


def load_experiment(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentSchema().load(data)
    except ValidationError as e:
        raise ConfigValidationError(e.messages) from e


def dump_experiment(cfg: ExperimentConfig) -> Dict[str, Any]:
    return ExperimentSchema().dump(cfg)


def read_config_file(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigValidationError({"_schema": [f"{path} must contain a mapping"]})
    return data


def to_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(dump_experiment(cfg), sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(dump_experiment(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply `section.field=value` (or `classes.<i>.field=value`) overrides; values are parsed as YAML scalars."""
    for item in overrides:
        key, sep, raw = item.lstrip("-").partition("=")
        if not sep or not key:
            raise ConfigValidationError({"_overrides": [f"expected section.field=value, got '{item}'"]})
        path: List[str] = key.split(".")
        node: Any = data
        try:
            for part in path[:-1]:
                if isinstance(node, list):
                    node = node[int(part)]
                else:
                    node = node.setdefault(part, {})
            leaf = path[-1]
            value = yaml.safe_load(raw)
            if isinstance(node, list):
                node[int(leaf)] = value
            else:
                node[leaf] = value
        except (ValueError, IndexError, TypeError, AttributeError):
            raise ConfigValidationError({"_overrides": [f"cannot apply override '{item}'"]})
        logger.debug(f"Override {key} = {value!r}")
    return data
