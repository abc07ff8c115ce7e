"""Built-in experiment presets, kept as plain config mappings so they go through the same validation as files."""

import copy
from typing import Any, Dict, List

from config import ExperimentConfig
from schemas import load_experiment

TWO_PERIOD_MARKET = {
    "compliance_dates": [1.0, 2.0],
    "steps_per_period": [24, 24],
    "penalty": 50.0,
    "initial_price": 50.0,
    "volatility": 3.0,
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "four_agent": {
        "market": {**TWO_PERIOD_MARKET, "friction": 2.0, "price_impact": 0.5},
        "classes": [
            {"label": "One", "requirement": 25.0, "gen_size": 2.0, "gen_cost": 100.0},
            {"label": "Two", "requirement": 25.0, "gen_size": 1.5, "gen_cost": 75.0},
            {"label": "Three", "requirement": 25.0, "gen_size": 1.0, "gen_cost": 50.0},
            {"label": "Four", "requirement": 25.0, "gen_size": 0.5, "gen_cost": 25.0},
        ],
        "net": {"hidden_layers": 5, "nodes_per_layer": 200},
        "train": {"epochs": 20000, "batch_size": 256, "lr": 0.001, "varphi0": 50.0},
    },
    "eight_agent": {
        "market": {**TWO_PERIOD_MARKET, "friction": 5.0, "price_impact": 0.1},
        "classes": [
            {"label": "A", "population": 2, "requirement": 40.0, "gen_size": 3.0, "gen_cost": 150.0},
            {"label": "B", "population": 1, "requirement": 30.0, "gen_size": 2.5, "gen_cost": 125.0},
            {"label": "C", "population": 1, "requirement": 30.0, "gen_size": 2.0, "gen_cost": 100.0},
            {"label": "D", "population": 2, "requirement": 20.0, "gen_size": 1.5, "gen_cost": 75.0},
            {"label": "E", "population": 2, "requirement": 10.0, "gen_size": 1.0, "gen_cost": 50.0},
        ],
        "net": {"hidden_layers": 9, "nodes_per_layer": 200},
        "train": {"epochs": 20000, "batch_size": 256, "lr": 0.003, "varphi0": 1000.0},
    },
    # agent Four of the four-agent market, trading alone
    "single_agent": {
        "market": {**TWO_PERIOD_MARKET, "friction": 2.0, "price_impact": 0.5},
        "classes": [{"label": "Four", "requirement": 25.0, "gen_size": 0.5, "gen_cost": 25.0}],
        "net": {"hidden_layers": 5, "nodes_per_layer": 200},
        "train": {"epochs": 20000, "batch_size": 256, "lr": 0.001, "varphi0": 50.0},
        "oracle": {"trade_points": 11, "price_points": 101, "inventory_points": 101, "quadrature_nodes": 7},
    },
    "two_agent_small": {
        "market": {
            "compliance_dates": [1.0],
            "steps_per_period": [4],
            "penalty": 50.0,
            "initial_price": 50.0,
            "volatility": 3.0,
            "friction": 2.0,
            "price_impact": 0.5,
            "trade_bound": 10.0,
        },
        "classes": [
            {"label": "Big", "requirement": 5.0, "gen_size": 2.0, "gen_cost": 60.0},
            {"label": "Small", "requirement": 5.0, "gen_size": 1.0, "gen_cost": 20.0},
        ],
        "net": {"hidden_layers": 3, "nodes_per_layer": 64},
        "train": {"epochs": 3000, "batch_size": 128, "lr": 0.001, "varphi0": 50.0},
        "eval": {"num_paths": 2000},
        "oracle": {"trade_points": 3, "price_points": 9, "inventory_points": 21},
    },
}


def preset_names() -> List[str]:
    return list(PRESETS)


def preset_data(name: str) -> Dict[str, Any]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset '{name}', choose from {preset_names()}")
    data = copy.deepcopy(PRESETS[name])
    data["preset"] = name
    return data


def load_preset(name: str) -> ExperimentConfig:
    return load_experiment(preset_data(name))
