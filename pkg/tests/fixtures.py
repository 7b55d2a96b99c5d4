"""Small denoisers and configs shared by the test modules."""
from __future__ import annotations

import json
import pathlib

from tlora_tool.config import AdapterConfig
from tlora_tool.diffusion import ConditionEmbedding, Denoiser, NoiseSchedule, ToyDataset

TINY_T = 20


def tiny_denoiser(seed: int = 0, *, T: int = TINY_T, hidden: int = 8, depth: int = 2) -> Denoiser:
    schedule = NoiseSchedule(T=T)
    embedding = ConditionEmbedding.create(8, 4, seed + 1)
    return Denoiser.create(schedule, embedding, seed, hidden=hidden, depth=depth, time_dim=4)


def tiny_dataset(seed: int = 0) -> ToyDataset:
    return ToyDataset(seed=seed)


def adapter_config(kind: str, r: int = 4, r_min: int | None = 2, **extra) -> AdapterConfig:
    return AdapterConfig(kind=kind, r=r, r_min=r_min, **extra)


def tiny_config_payload(kind: str = "tlora", **training) -> dict:
    payload = {
        "seed": 0,
        "dataset": {"embedding_dim": 4},
        "schedule": {"T": TINY_T},
        "denoiser": {"hidden": 8, "depth": 2, "time_dim": 4},
        "adapter": {"kind": kind, "r": 4, "r_min": 2 if kind in ("tlora", "vanilla_tlora") else None},
        "training": {"pretrain_steps": 5, "pretrain_batch": 8, "finetune_steps": 3, "metrics_every": 1},
        "eval": {"n_per_condition": 8},
    }
    payload["training"].update(training)
    return payload


def write_config(directory: pathlib.Path, payload: dict, name: str = "config.json") -> pathlib.Path:
    target = pathlib.Path(directory) / name
    target.write_text(json.dumps(payload), encoding="utf-8")
    return target
