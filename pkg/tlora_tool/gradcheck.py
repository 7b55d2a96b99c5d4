"""Standing finite-difference check of every layer type and adapter kind.

Status values follow the usual report vocabulary: ``ok`` or ``fehler`` per
case, ``gesamt`` for the overall verdict and ``<case>_info`` for details.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .adapters import AdapterKind, LinearAdapter, build_adapter
from .config import AdapterConfig
from .diffusion import ConditionEmbedding, Denoiser, DenoiserInput, NoiseSchedule
from .gradnet import AdaptedLinear, Linear, Node, Param, constant, forward_backward, gradient_check, scalar_sum, silu
from .linalg import derive_seed, make_rng

LOG = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-6
FD_STEP = 1e-5
_T = 10
_LAMBDA = 0.1


@dataclass
class LayerStack:
    """Small network over a column batch: layer, SiLU, layer, ..."""

    layers: list[Linear | AdaptedLinear]

    def __call__(self, inputs: tuple[np.ndarray, np.ndarray]) -> Node:
        x, timesteps = inputs
        h = constant(x)
        for index, layer in enumerate(self.layers):
            h = layer(h, timesteps)
            if index < len(self.layers) - 1:
                h = silu(h)
        return h

    def parameters(self) -> list[Param]:
        return [param for layer in self.layers for param in layer.parameters()]


def _perturbed_adapter(kind: AdapterKind, rng: np.random.Generator, seed: int) -> LinearAdapter:
    """Adapter whose trainable factors are all away from zero."""

    W = rng.standard_normal((6, 5))
    adapter = build_adapter(W, kind, 3, seed, r_min=1 if kind.uses_schedule else None, T=_T)
    adapter.A += 0.3 * rng.standard_normal(adapter.A.shape)
    adapter.B += 0.3 * rng.standard_normal(adapter.B.shape)
    if adapter.S is not None:
        adapter.S += 0.5 + rng.random(adapter.r)
    return adapter


def _raw_case(seed: int):
    rng = make_rng(seed)
    net = LayerStack(
        [
            Linear("l0", rng.standard_normal((6, 4)), rng.standard_normal(6)),
            Linear("l1", rng.standard_normal((3, 6)), rng.standard_normal(3)),
        ]
    )
    inputs = (rng.standard_normal((4, 5)), np.zeros(5, dtype=np.int64))
    return net, inputs, rng.standard_normal((3, 5)), None


def _adapter_case(kind: AdapterKind, seed: int):
    rng = make_rng(seed)
    adapted = AdaptedLinear("a0", _perturbed_adapter(kind, rng, seed), rng.standard_normal(6))
    head = Linear("head", rng.standard_normal((2, 6)), rng.standard_normal(2), trainable=False)
    net = LayerStack([Linear("stem", rng.standard_normal((5, 3)), rng.standard_normal(5)), adapted, head])
    timesteps = rng.integers(0, _T + 1, size=7)
    inputs = (rng.standard_normal((3, 7)), timesteps)
    extra = (lambda: adapted.penalty(_LAMBDA)) if kind is AdapterKind.ADALORA_SVD else None
    return net, inputs, rng.standard_normal((2, 7)), extra


def _denoiser_case(kind: AdapterKind, seed: int):
    rng = make_rng(seed)
    schedule = NoiseSchedule(T=20)
    embedding = ConditionEmbedding.create(3, 4, derive_seed(seed, 1))
    base = Denoiser.create(schedule, embedding, seed, hidden=8, depth=2, time_dim=4)
    config = AdapterConfig(kind=kind.value, r=4, r_min=2 if kind.uses_schedule else None)
    denoiser = base.attach_adapters(config, seed)
    for layer in denoiser.hidden:
        layer.adapter.B += 0.2 * rng.standard_normal(layer.adapter.B.shape)
        if layer.adapter.S is not None:
            layer.adapter.S += 0.5
    n = 5
    inputs = DenoiserInput(
        z=rng.standard_normal((n, 2)),
        t=rng.integers(1, schedule.T + 1, size=n),
        cond=embedding.embed([("c1", "V*")] * n),
    )
    extra = None
    if kind is AdapterKind.ADALORA_SVD:

        def extra() -> Node:
            first, second = (layer.penalty(_LAMBDA) for layer in denoiser.hidden)
            return scalar_sum(first, second)

    return denoiser, inputs, rng.standard_normal((2, n)), extra


def masked_gradients_are_zero(kind: AdapterKind, seed: int = 0) -> bool:
    """At t = T only the first r_min components may receive gradient."""

    if not kind.uses_schedule:
        raise ValueError(f"Adapterart {kind.value} maskiert nicht")
    rng = make_rng(seed)
    adapted = AdaptedLinear("a0", _perturbed_adapter(kind, rng, seed), np.zeros(6))
    net = LayerStack([adapted])
    inputs = (rng.standard_normal((5, 4)), np.full(4, _T))
    forward_backward(net, inputs, rng.standard_normal((6, 4)))
    active = adapted.adapter.schedule.rank_at(_T)
    masked = [adapted.A.grad[active:], adapted.B.grad[:, active:]]
    if adapted.S is not None:
        masked.append(adapted.S.grad[active:])
    return all(np.all(block == 0.0) for block in masked)


class GradientCheck:
    """Runs the finite-difference suite and summarises it."""

    def __init__(self, seed: int = 0, *, tolerance: float = GRADIENT_TOLERANCE, step: float = FD_STEP) -> None:
        if tolerance <= 0 or step <= 0:
            raise ValueError("Toleranz und Schrittweite müssen größer als 0 sein")
        self.seed = seed
        self.tolerance = tolerance
        self.step = step

    def cases(self) -> dict[str, Callable[[int], tuple]]:
        cases: dict[str, Callable[[int], tuple]] = {"linear": _raw_case}
        for kind in AdapterKind:
            cases[f"schicht_{kind.value}"] = lambda seed, kind=kind: _adapter_case(kind, seed)
            cases[f"denoiser_{kind.value}"] = lambda seed, kind=kind: _denoiser_case(kind, seed)
        return cases

    def run_case(self, name: str) -> tuple[str, float]:
        build = self.cases()[name]
        net, inputs, target, extra = build(derive_seed(self.seed, len(name), sum(map(ord, name))))
        errors = gradient_check(net, inputs, target, step=self.step, extra_loss=extra)
        worst = max(errors.values(), default=0.0)
        return ("ok" if worst <= self.tolerance else "fehler"), worst

    def full_check(self) -> dict[str, str]:
        report: dict[str, str] = {}
        for name in self.cases():
            status, worst = self.run_case(name)
            report[name] = status
            report[f"{name}_info"] = f"max. relativer Fehler {worst:.2e}"
            LOG.debug("Gradientenprüfung %s: %s (%.2e)", name, status, worst)
        for kind in AdapterKind:
            if kind.uses_schedule:
                name = f"maske_{kind.value}"
                report[name] = "ok" if masked_gradients_are_zero(kind, self.seed) else "fehler"
                report[f"{name}_info"] = "maskierte Gradienten exakt 0"
        report["gesamt"] = self.classify_overall(report)
        return report

    def classify_overall(self, status: dict[str, str]) -> str:
        for key, value in status.items():
            if key.endswith("_info") or key == "gesamt":
                continue
            if value == "fehler":
                return "fehler"
        return "ok"

    def human_summary(self, report: dict[str, str]) -> list[str]:
        lines = [f"Gradientenprüfung gesamt: {report.get('gesamt', 'unbekannt')}"]
        for key, value in report.items():
            if key.endswith("_info") or key == "gesamt":
                continue
            info = report.get(f"{key}_info", "")
            lines.append(f"{key}: {value}" + (f" ({info})" if info else ""))
        return lines
