"""Experiment configuration: JSON schema, validation, and builders that turn
a config document into fleet, policy, weight plan, and run settings.

The format is versioned (``schema_version``) and strict: unknown keys are
rejected at every level so typos fail loudly before any compute happens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .core import ClientSpec, ConfigurationError, Fleet, uniform_importances
from .engine import RunConfig, Seeds
from .objectives import QuadraticObjective, SyntheticShardConfig, make_synthetic_shards
from .timing import BIASED_CRITERIA, HardwareModel, PolicyKind, WaitPolicy
from .weights import WeightScheme, plan_weights

SCHEMA_VERSION = 1

_NUMBER = {"type": "number"}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_VECTOR = {"type": "array", "items": _NUMBER, "minItems": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "fleet", "scheme", "optimization", "horizon"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "fleet": {
            "type": "object",
            "additionalProperties": False,
            "required": ["compute_times", "objective"],
            "properties": {
                "compute_times": {"type": "array", "items": _POSITIVE, "minItems": 1},
                "importances": _VECTOR,
                "hardware": {"enum": ["fixed", "exponential"]},
                "initial_clocks": {"type": "array", "items": _POSITIVE},
                "distribution_ids": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "objective": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["family"],
                    "properties": {
                        "family": {"enum": ["quadratic", "logistic", "linear"]},
                        "optima": {
                            "type": "array",
                            "items": {"anyOf": [_NUMBER, _VECTOR]},
                            "minItems": 1,
                        },
                        "curvature": _POSITIVE,
                        "noise_std": {"type": "number", "minimum": 0},
                        "dim": {"type": "integer", "minimum": 1},
                        "samples_per_client": {"type": "integer", "minimum": 1},
                        "concentration": _POSITIVE,
                        "seed": {"type": "integer", "minimum": 0},
                        "batch_size": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
        "scheme": {
            "type": "object",
            "additionalProperties": False,
            "required": ["policy", "weights"],
            "properties": {
                "policy": {"enum": [k.value for k in PolicyKind]},
                "delta_t": _POSITIVE,
                "m": {"type": "integer", "minimum": 1},
                "criterion": {"enum": list(BIASED_CRITERIA)},
                "weights": {"enum": [s.value for s in WeightScheme]},
                "custom_d": {"type": "array", "items": {"type": "number", "minimum": 0}},
            },
        },
        "optimization": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eta_g": {"type": "number", "minimum": 0},
                "eta_l": {"type": "number", "minimum": 0},
                "k_steps": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "full_gradient": {"type": "boolean"},
                "theta0": {"anyOf": [_NUMBER, _VECTOR]},
            },
        },
        "horizon": {
            "type": "object",
            "additionalProperties": False,
            "minProperties": 1,
            "maxProperties": 1,
            "properties": {"rounds": {"type": "integer", "minimum": 1}, "time": _POSITIVE},
        },
        "ensemble": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_seeds": {"type": "integer", "minimum": 1},
                "base_seed": {"type": "integer", "minimum": 0},
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"cadence": {"type": "integer", "minimum": 1}},
        },
        "seeds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hardware": {"type": "integer", "minimum": 0},
                "batching": {"type": "integer", "minimum": 0},
                "sampling": {"type": "integer", "minimum": 0},
            },
        },
        "tau_max": {"type": "integer", "minimum": 0},
        "record_local_paths": {"type": "boolean"},
        "oracle_check": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "checkpoints": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "n_runs": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "bounds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "time_budget": _POSITIVE,
                "smoothness": _POSITIVE,
                "rho": {"type": "number", "minimum": 0},
                "sigma": {"type": "number", "minimum": 0},
                "sigma1": {"type": "number", "minimum": 0},
                "delta_t": _POSITIVE,
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["axis", "values"],
            "properties": {
                "axis": {"enum": ["eta_l", "k_steps", "delta_t", "m"]},
                "values": {"type": "array", "items": _POSITIVE, "minItems": 1},
            },
        },
    },
}


def validate_config(document: dict) -> list[str]:
    """All schema violations, formatted with their JSON paths."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(document), key=lambda e: list(e.absolute_path))
    out = []
    for err in errors:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        out.append(f"{where}: {err.message}")
    return out


def load_config(path) -> dict:
    try:
        document = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"config is not valid JSON: {err}") from err
    problems = validate_config(document)
    if problems:
        raise ConfigurationError("invalid config:\n" + "\n".join(problems))
    return document


@dataclass(frozen=True)
class Experiment:
    """Everything needed to run one configured experiment."""

    document: dict
    fleet: Fleet
    policy: WaitPolicy
    hw: HardwareModel
    run_config: RunConfig


def build_fleet(document: dict) -> tuple[Fleet, HardwareModel]:
    fcfg = document["fleet"]
    taus = fcfg["compute_times"]
    n = len(taus)
    importances = fcfg.get("importances") or uniform_importances(n)
    if len(importances) != n:
        raise ConfigurationError("importances length must match compute_times")
    hw = HardwareModel(fcfg.get("hardware", "fixed"), document.get("seeds", {}).get("hardware", 0))

    ocfg = fcfg["objective"]
    family = ocfg["family"]
    if family == "quadratic":
        optima = ocfg.get("optima")
        if optima is None or len(optima) != n:
            raise ConfigurationError("quadratic objective needs one optimum per client")
        objectives = [
            QuadraticObjective.from_optimum(
                np.atleast_1d(np.asarray(opt, dtype=float)),
                ocfg.get("curvature", 0.5),
                noise_std=ocfg.get("noise_std", 0.0),
            )
            for opt in optima
        ]
    else:
        shard_cfg = SyntheticShardConfig(
            n_clients=n,
            dim=ocfg.get("dim", 5),
            samples_per_client=ocfg.get("samples_per_client", 64),
            concentration=ocfg.get("concentration", 0.1),
            seed=ocfg.get("seed", 0),
            link=family,
            batch_size=ocfg.get("batch_size", 8),
        )
        objectives = make_synthetic_shards(shard_cfg)

    ids = fcfg.get("distribution_ids") or list(range(n))
    if len(ids) != n:
        raise ConfigurationError("distribution_ids length must match compute_times")
    clients = [ClientSpec(i, importances[i], taus[i], i, ids[i]) for i in range(n)]
    return Fleet(clients, objectives), hw


def build_policy(document: dict) -> WaitPolicy:
    scfg = document["scheme"]
    kind = PolicyKind(scfg["policy"])
    return WaitPolicy(
        kind,
        delta_t=scfg.get("delta_t"),
        m=scfg.get("m"),
        criterion=scfg.get("criterion"),
    )


def build_experiment(document: dict, seed_override: int | None = None) -> Experiment:
    fleet, hw = build_fleet(document)
    policy = build_policy(document)
    scfg = document["scheme"]
    plan = plan_weights(
        WeightScheme(scfg["weights"]),
        fleet.importances,
        fleet.compute_times,
        policy,
        hw,
        custom_d=scfg.get("custom_d"),
    )
    opt = document.get("optimization", {})
    horizon = document["horizon"]
    seeds_cfg = document.get("seeds", {})
    seeds = Seeds(
        seeds_cfg.get("hardware", 0),
        seeds_cfg.get("batching", 1),
        seeds_cfg.get("sampling", 2),
    )
    if seed_override is not None:
        seeds = Seeds((seed_override, 0), (seed_override, 1), (seed_override, 2))

    theta0 = opt.get("theta0")
    if theta0 is not None:
        theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
        if theta0.shape == (1,) and fleet.dim > 1:
            theta0 = np.full(fleet.dim, theta0[0])

    run_config = RunConfig(
        fleet=fleet,
        policy=policy,
        plan=plan,
        hw=hw,
        eta_g=opt.get("eta_g", 1.0),
        eta_l=opt.get("eta_l", 0.1),
        k_steps=opt.get("k_steps", 1),
        full_gradient=opt.get("full_gradient", False),
        batch_size=opt.get("batch_size"),
        rounds=horizon.get("rounds"),
        time_budget=horizon.get("time"),
        theta0=theta0,
        seeds=seeds,
        metric_cadence=document.get("outputs", {}).get("cadence", 1),
        tau_max=document.get("tau_max"),
        record_local_paths=document.get("record_local_paths", False),
        initial_clocks=tuple(document["fleet"]["initial_clocks"]) if document["fleet"].get("initial_clocks") else None,
    )
    return Experiment(document, fleet, policy, hw, run_config)
