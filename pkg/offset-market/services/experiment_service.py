import hashlib
import logging
import os
from dataclasses import asdict, replace
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from config import ExperimentConfig, settings
from evaluation import (
    ENSEMBLE_FILE,
    FLOAT_FORMAT,
    PathEnsemble,
    check_checkpoint,
    display_inventories,
    emit_csv,
    load_ensemble,
    metrics,
    save_ensemble,
    simulate_paths,
)
from market_env import AgentTable, ConstantPolicy, initial_state
from nets import NetworkPolicy, load_checkpoint, model_from_checkpoint
from oracle import DiscreteGameSpec, brute_force_nash, dp_refinement_check, exploitability, write_oracle_report
from schemas import config_hash, to_yaml
from trainer import NashDQNTrainer

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.pt"
LOSS_HISTORY_FILE = "loss_history.csv"
ORACLE_REPORT_FILE = "oracle_report.csv"
RESOLVED_CONFIG_FILE = "resolved_config.yaml"
MANIFEST_FILE = "MANIFEST.sha256"


def file_sha256(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


class ExperimentService:
    """Runs one experiment command and keeps its artifact directory self-describing."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Optional[str] = None):
        self.cfg = cfg
        self.agents = AgentTable.from_classes(cfg.classes)
        self.config_hash = config_hash(cfg)
        name = cfg.preset or "experiment"
        self.out_dir = out_dir or os.path.join(settings.output_dir, f"{name}_{self.config_hash}")
        os.makedirs(self.out_dir, exist_ok=True)
        logger.info(f"Artifacts for config {self.config_hash} go to {self.out_dir}")

    def path(self, filename: str) -> str:
        return os.path.join(self.out_dir, filename)

    def header(self, seed: Any) -> str:
        return f"config_hash={self.config_hash} seed={seed}"

    def write_metadata(self):
        """Write the resolved config and a sha256 manifest of every artifact in the directory."""
        with open(self.path(RESOLVED_CONFIG_FILE), "w", encoding="utf-8") as f:
            f.write(to_yaml(self.cfg))
        lines = []
        for filename in sorted(os.listdir(self.out_dir)):
            full = self.path(filename)
            if filename == MANIFEST_FILE or filename.endswith(".tmp") or not os.path.isfile(full):
                continue
            lines.append(f"{file_sha256(full)}  {filename}\n")
        with open(self.path(MANIFEST_FILE), "w", encoding="utf-8") as f:
            f.writelines(lines)

    def load_payload(self, checkpoint: Optional[str] = None) -> Dict[str, Any]:
        payload = load_checkpoint(checkpoint or self.path(CHECKPOINT_FILE))
        check_checkpoint(payload, self.cfg.market, self.cfg.classes)
        return payload

    def load_model(self, checkpoint: Optional[str] = None):
        return model_from_checkpoint(self.load_payload(checkpoint))

    def provenance(self, checkpoint: Optional[str] = None) -> Dict[str, Any]:
        """What a stored ensemble must match to be reused: the checkpoint bytes and the eval settings."""
        path = checkpoint or self.path(CHECKPOINT_FILE)
        eval_cfg = asdict(self.cfg.eval)
        eval_cfg.pop("out_dir")
        return {"checkpoint_sha256": file_sha256(path) if os.path.exists(path) else None, "eval": eval_cfg}

    def train(self) -> Dict[str, Any]:
        trainer = NashDQNTrainer(self.cfg.market, self.cfg.classes, self.cfg.net, self.cfg.train)
        result = trainer.run(self.path(CHECKPOINT_FILE))
        with open(self.path(LOSS_HISTORY_FILE), "w", encoding="utf-8", newline="") as f:
            f.write(f"# {self.header(self.cfg.train.seed)}\n")
            result.history.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self.write_metadata()
        tail = result.history.tail(100)
        return {
            "epochs": len(result.history),
            "final_q_loss": float(tail["q_loss"].median()),
            "final_clearing_loss": float(tail["clearing_loss"].median()),
            "varphi": result.varphi,
            "checkpoint": self.path(CHECKPOINT_FILE),
        }

    def simulate(self, checkpoint: Optional[str] = None):
        model = self.load_model(checkpoint)
        ensemble = simulate_paths(
            model, self.cfg.market, model.agents, self.cfg.eval.num_paths, self.cfg.eval.seed, self.cfg.eval.generation_mode
        )
        ensemble.provenance = self.provenance(checkpoint)
        save_ensemble(self.path(ENSEMBLE_FILE), ensemble)
        self.write_metadata()
        return ensemble

    def stored_ensemble(self, checkpoint: Optional[str] = None) -> Optional[PathEnsemble]:
        ensemble_path = self.path(ENSEMBLE_FILE)
        if not os.path.exists(ensemble_path):
            logger.info("No stored ensemble, simulating first")
            return None
        ensemble = load_ensemble(ensemble_path)
        expected = self.provenance(checkpoint)
        if ensemble.provenance != expected:
            logger.info("Stored ensemble does not match the current checkpoint or eval settings, simulating again")
            return None
        return ensemble

    def compute_metrics(self, checkpoint: Optional[str] = None, display_submissions: bool = False) -> pd.DataFrame:
        ensemble = self.stored_ensemble(checkpoint)
        if ensemble is None:
            ensemble = self.simulate(checkpoint)
        agent_metrics = metrics(ensemble)
        inventories = None
        if display_submissions:
            inventories = display_inventories(ensemble, self.cfg.market, self.agents.requirement)
        emit_csv(ensemble, agent_metrics, self.out_dir, config_hash=self.config_hash, inventories=inventories)
        self.write_metadata()
        return pd.DataFrame([m.__dict__ for m in agent_metrics])

    def oracle_check(self, checkpoint: Optional[str] = None) -> Dict[str, Any]:
        """DP (one agent) or brute-force Nash (several), then exploitability of the learned or equilibrium policy."""
        market, classes, oracle_cfg = self.cfg.market, self.cfg.classes, self.cfg.oracle
        summary: Dict[str, Any] = {}
        spec = DiscreteGameSpec.build(market, classes, oracle_cfg)
        state = initial_state(market, spec.agents)

        if spec.num_agents == 1:
            coarse, fine = dp_refinement_check(market, classes[0], oracle_cfg)
            summary.update(dp_value=coarse.value, dp_objective=coarse.objective, refined_dp_objective=fine.objective)
            reference_policy = coarse.policy
            spec = coarse.spec
        else:
            solution = brute_force_nash(spec, state)
            summary.update(nash_value=solution.value.tolist(), nash_objective=solution.objective.tolist())
            summary["equilibria_found"] = len(solution.equilibria)
            reference_policy = solution.policy

        has_checkpoint = checkpoint is not None or os.path.exists(self.path(CHECKPOINT_FILE))
        # grid equilibria involve no randomness
        seed: Any = "none"
        policy = reference_policy
        if has_checkpoint:
            payload = self.load_payload(checkpoint)
            policy = NetworkPolicy(model_from_checkpoint(payload))
            seed = payload.get("train", {}).get("seed", "none")
        report = exploitability(policy, spec, state)
        benchmark = market.num_periods * market.penalty * spec.agents.requirement
        summary["exploitability"] = report.exploitability.tolist()
        summary["exploitability_vs_benchmark"] = (report.exploitability / np.maximum(benchmark, 1e-12)).tolist()
        summary["do_nothing_exploitability"] = exploitability(ConstantPolicy(), spec, state).exploitability.tolist()
        summary["policy"] = "network" if has_checkpoint else "grid equilibrium"

        write_oracle_report(self.path(ORACLE_REPORT_FILE), spec, state, report, header=self.header(seed))
        self.write_metadata()
        return summary


def with_seed(cfg: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    """Apply one seed to network initialization, training and evaluation."""
    if seed is None:
        return cfg
    return replace(
        cfg,
        net=replace(cfg.net, seed=seed),
        train=replace(cfg.train, seed=seed),
        eval=replace(cfg.eval, seed=seed),
    )
