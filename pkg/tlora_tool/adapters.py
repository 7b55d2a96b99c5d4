"""Low-rank adapter parametrisations and the timestep rank schedule.

Five kinds share one container, :class:`LinearAdapter`:

* ``plain_lora``      W + B A
* ``vanilla_tlora``   W + B M_t A
* ``ortho_lora``      W - B0 S0 A0 + B S A
* ``tlora``           W - B0 S0 M_t A0 + B S M_t A
* ``adalora_svd``     W + B S A   (S starts at zero)

``M_t`` is the diagonal 0/1 mask with ``rank_at(t)`` leading ones. The
frozen init term is kept factored and re-evaluated per call, never cached
densely per timestep.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .linalg import as_matrix, make_rng, orthogonality_error, random_gaussian, svd

LOG = logging.getLogger(__name__)

ADALORA_INIT_STD = 0.02


class AdapterKind(str, enum.Enum):
    PLAIN_LORA = "plain_lora"
    VANILLA_TLORA = "vanilla_tlora"
    ORTHO_LORA = "ortho_lora"
    TLORA = "tlora"
    ADALORA_SVD = "adalora_svd"

    @property
    def uses_schedule(self) -> bool:
        return self in (AdapterKind.VANILLA_TLORA, AdapterKind.TLORA)

    @property
    def has_scale(self) -> bool:
        return self in (AdapterKind.ORTHO_LORA, AdapterKind.TLORA, AdapterKind.ADALORA_SVD)

    @property
    def has_frozen_init(self) -> bool:
        return self in (AdapterKind.ORTHO_LORA, AdapterKind.TLORA)

    @classmethod
    def parse(cls, value: "str | AdapterKind") -> "AdapterKind":
        if isinstance(value, AdapterKind):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError as exc:
            allowed = ", ".join(kind.value for kind in cls)
            raise DomainError(f"Unbekannte Adapterart '{value}' (erlaubt: {allowed})") from exc


class InitSource(str, enum.Enum):
    FROM_W = "w"
    FROM_R = "r"


class Band(str, enum.Enum):
    TOP = "top"
    MIDDLE = "middle"
    LAST = "last"


@dataclass(frozen=True)
class InitVariant:
    """Which matrix is decomposed and which singular band seeds the factors."""

    source: InitSource
    band: Band

    @property
    def label(self) -> str:
        return f"{self.source.value}_{self.band.value}"

    @classmethod
    def parse(cls, text: "str | InitVariant") -> "InitVariant":
        if isinstance(text, InitVariant):
            return text
        try:
            source, band = str(text).strip().lower().split("_", 1)
            return cls(InitSource(source), Band(band))
        except ValueError as exc:
            raise DomainError(
                f"Unbekannte Initialisierung '{text}' (erlaubt: {', '.join(v.label for v in ALL_VARIANTS)})"
            ) from exc

    def window_start(self, k: int, r: int) -> int:
        """First singular index of the band of ``r`` triplets out of ``k``."""

        if self.band is Band.TOP:
            return 0
        if self.band is Band.LAST:
            return k - r
        return (k - r) // 2


ALL_VARIANTS: tuple[InitVariant, ...] = tuple(
    InitVariant(source, band) for source in InitSource for band in Band
)


@dataclass(frozen=True)
class MaskSchedule:
    """Linear rank schedule r(t) = ⌊(r − r_min)(T − t)/T⌋ + r_min."""

    r: int
    r_min: int
    T: int

    def __post_init__(self) -> None:
        if self.r < 1:
            raise DomainError("r muss mindestens 1 sein")
        if not 1 <= self.r_min <= self.r:
            raise DomainError(f"r_min muss zwischen 1 und r={self.r} liegen (erhalten: {self.r_min})")
        if self.T < 1:
            raise DomainError("T muss mindestens 1 sein")

    def rank_at(self, t: int) -> int:
        if not 0 <= t <= self.T:
            raise DomainError(f"Zeitschritt {t} liegt außerhalb von 0..{self.T}")
        return (self.r - self.r_min) * (self.T - int(t)) // self.T + self.r_min

    def mask_vector(self, t: int) -> np.ndarray:
        vector = np.zeros(self.r)
        vector[: self.rank_at(t)] = 1.0
        return vector

    def mask(self, t: int) -> np.ndarray:
        return np.diag(self.mask_vector(t))

    def mask_columns(self, timesteps: Sequence[int] | np.ndarray) -> np.ndarray:
        """r×batch 0/1 matrix; column j masks with the rank of ``timesteps[j]``."""

        steps = np.asarray(timesteps, dtype=np.int64).reshape(-1)
        if steps.size and (steps.min() < 0 or steps.max() > self.T):
            raise DomainError(f"Zeitschritte müssen in 0..{self.T} liegen")
        ranks = (self.r - self.r_min) * (self.T - steps) // self.T + self.r_min
        return (np.arange(self.r)[:, None] < ranks[None, :]).astype(np.float64)


def rank_at(sched: MaskSchedule, t: int) -> int:
    return sched.rank_at(t)


def mask(sched: MaskSchedule, t: int) -> np.ndarray:
    return sched.mask(t)


def _frozen(array: np.ndarray) -> np.ndarray:
    copy = np.array(array, dtype=np.float64, copy=True)
    copy.setflags(write=False)
    return copy


@dataclass
class LinearAdapter:
    """Frozen base weight plus low-rank factors of one adapted linear layer."""

    W: np.ndarray
    A: np.ndarray
    B: np.ndarray
    kind: AdapterKind
    S: np.ndarray | None = None
    A0: np.ndarray | None = None
    B0: np.ndarray | None = None
    S0: np.ndarray | None = None
    schedule: MaskSchedule | None = None
    variant: InitVariant | None = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.W = _frozen(as_matrix(self.W, "W"))
        self.A = np.array(as_matrix(self.A, "A"), copy=True)
        self.B = np.array(as_matrix(self.B, "B"), copy=True)
        if self.S is not None:
            self.S = np.array(self.S, dtype=np.float64, copy=True).reshape(-1)
        self.validate()

    @property
    def r(self) -> int:
        return int(self.A.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    def validate(self) -> None:
        n, m = self.W.shape
        if self.A.shape != (self.r, m):
            raise DomainError(f"A muss die Form ({self.r}, {m}) haben, erhalten {self.A.shape}")
        if self.B.shape != (n, self.r):
            raise DomainError(f"B muss die Form ({n}, {self.r}) haben, erhalten {self.B.shape}")
        if self.kind.has_scale:
            if self.S is None or np.shape(self.S) != (self.r,):
                raise DomainError(f"S muss ein Vektor der Länge {self.r} sein")
        elif self.S is not None:
            raise DomainError(f"Adapterart {self.kind.value} besitzt kein S")
        if self.kind.has_frozen_init:
            for name in ("A0", "B0", "S0"):
                if getattr(self, name) is None:
                    raise DomainError(f"Adapterart {self.kind.value} benötigt {name}")
        if self.schedule is not None and self.schedule.r != self.r:
            raise DomainError(f"Maskenplan erwartet r={self.schedule.r}, Adapter hat r={self.r}")

    def _mask_vector(self, t: int | None) -> np.ndarray | None:
        if not self.kind.uses_schedule:
            return None
        if self.schedule is None:
            raise ConfigError("adapter.r_min", f"Adapterart {self.kind.value} benötigt einen Maskenplan")
        if t is None:
            raise DomainError(f"Adapterart {self.kind.value} benötigt einen Zeitschritt")
        return self.schedule.mask_vector(t)

    def rank_at(self, t: int) -> int:
        """Active rank at ``t``; the full rank for unmasked kinds."""

        if self.kind.uses_schedule and self.schedule is not None:
            return self.schedule.rank_at(t)
        return self.r

    def frozen_term(self, t: int | None = None) -> np.ndarray | None:
        """Dense ``B0 diag(S0) M_t A0`` (``None`` for kinds without init copies)."""

        if not self.kind.has_frozen_init:
            return None
        weights = self.S0 if self.kind is AdapterKind.ORTHO_LORA else self.S0 * self._mask_vector(t)
        return (self.B0 * weights) @ self.A0

    def residual_weight(self, t: int | None = None) -> np.ndarray:
        """Base weight with the frozen init term removed (Ŵ)."""

        frozen = self.frozen_term(t)
        return self.W.copy() if frozen is None else self.W - frozen

    def update_term(self, t: int | None = None) -> np.ndarray:
        """Dense trainable contribution at ``t``."""

        weights = np.ones(self.r) if self.S is None else self.S.copy()
        vector = self._mask_vector(t)
        if vector is not None:
            weights = weights * vector
        return (self.B * weights) @ self.A

    def effective_weight(self, t: int | None = None) -> np.ndarray:
        frozen = self.frozen_term(t)
        weight = self.W + self.update_term(t)
        return weight if frozen is None else weight - frozen

    def forward(self, x: np.ndarray, t: int | None = None) -> np.ndarray:
        """Factored ``effective_weight(t) @ x`` without the dense n×m update."""

        inputs = as_matrix(x, "x")
        if inputs.shape[0] != self.W.shape[1]:
            raise DomainError(f"x hat {inputs.shape[0]} Zeilen, erwartet {self.W.shape[1]}")
        vector = self._mask_vector(t)
        out = self.W @ inputs
        weights = np.ones(self.r) if self.S is None else self.S
        if vector is not None:
            weights = weights * vector
        out = out + self.B @ (weights[:, None] * (self.A @ inputs))
        if self.kind.has_frozen_init:
            frozen = self.S0 if vector is None else self.S0 * vector
            out = out - self.B0 @ (frozen[:, None] * (self.A0 @ inputs))
        return out

    def orthogonality(self) -> tuple[float, float]:
        """Current (err_A, err_B) of the trainable factors."""

        return orthogonality_error(self.A, "rows"), orthogonality_error(self.B, "cols")

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        """Named 2-D tensors for checkpoints; vectors are stored as r×1."""

        tensors = {f"{prefix}.W": self.W, f"{prefix}.A": self.A, f"{prefix}.B": self.B}
        for name in ("S", "A0", "B0", "S0"):
            value = getattr(self, name)
            if value is not None:
                tensors[f"{prefix}.{name}"] = value.reshape(-1, 1) if value.ndim == 1 else value
        return tensors

    def describe(self) -> dict:
        return {
            "kind": self.kind.value,
            "r": self.r,
            "r_min": self.schedule.r_min if self.schedule else None,
            "T": self.schedule.T if self.schedule else None,
            "variant": self.variant.label if self.variant else None,
            "seed": self.seed,
        }

    @classmethod
    def from_tensors(cls, prefix: str, tensors: dict[str, np.ndarray], description: dict) -> "LinearAdapter":
        kind = AdapterKind.parse(description["kind"])

        def vector(name: str) -> np.ndarray | None:
            value = tensors.get(f"{prefix}.{name}")
            return None if value is None else np.array(value, dtype=np.float64).reshape(-1)

        def matrix(name: str) -> np.ndarray | None:
            value = tensors.get(f"{prefix}.{name}")
            return None if value is None else np.array(value, dtype=np.float64)

        schedule = None
        if description.get("r_min") is not None and description.get("T") is not None:
            schedule = MaskSchedule(int(description["r"]), int(description["r_min"]), int(description["T"]))
        variant = InitVariant.parse(description["variant"]) if description.get("variant") else None
        A0, B0, S0 = matrix("A0"), matrix("B0"), vector("S0")
        return cls(
            W=tensors[f"{prefix}.W"],
            A=tensors[f"{prefix}.A"],
            B=tensors[f"{prefix}.B"],
            kind=kind,
            S=vector("S"),
            A0=None if A0 is None else _frozen(A0),
            B0=None if B0 is None else _frozen(B0),
            S0=None if S0 is None else _frozen(S0),
            schedule=schedule,
            variant=variant,
            seed=int(description.get("seed", 0)),
        )


def _check_rank(W: np.ndarray, r: int) -> None:
    if not 1 <= r <= min(W.shape):
        raise DomainError(f"Rang r={r} muss zwischen 1 und {min(W.shape)} liegen")


def _check_schedule(kind: AdapterKind, schedule: MaskSchedule | None) -> None:
    if kind.uses_schedule and schedule is None:
        raise ConfigError("adapter.r_min", f"Adapterart {kind.value} benötigt einen Maskenplan")


def init_plain_lora(
    W: np.ndarray,
    r: int,
    seed: int,
    *,
    kind: AdapterKind = AdapterKind.PLAIN_LORA,
    schedule: MaskSchedule | None = None,
) -> LinearAdapter:
    """A ~ N(0, 1/r), B = 0 (plain LoRA or Vanilla T-LoRA)."""

    W = as_matrix(W, "W")
    _check_rank(W, r)
    if kind not in (AdapterKind.PLAIN_LORA, AdapterKind.VANILLA_TLORA):
        raise DomainError(f"init_plain_lora unterstützt {kind.value} nicht")
    _check_schedule(kind, schedule)
    n, m = W.shape
    return LinearAdapter(
        W=W,
        A=random_gaussian(r, m, 1.0 / r, seed),
        B=np.zeros((n, r)),
        kind=kind,
        schedule=schedule if kind.uses_schedule else None,
        seed=seed,
    )


def init_ortho(
    W: np.ndarray,
    r: int,
    variant: InitVariant,
    seed: int,
    *,
    kind: AdapterKind = AdapterKind.ORTHO_LORA,
    schedule: MaskSchedule | None = None,
) -> LinearAdapter:
    """SVD-seeded factors with frozen copies subtracted from the base weight."""

    W = as_matrix(W, "W")
    _check_rank(W, r)
    if kind not in (AdapterKind.ORTHO_LORA, AdapterKind.TLORA):
        raise DomainError(f"init_ortho unterstützt {kind.value} nicht")
    _check_schedule(kind, schedule)
    variant = InitVariant.parse(variant)
    n, m = W.shape
    source = W if variant.source is InitSource.FROM_W else random_gaussian(n, m, 1.0 / r, seed)
    factors = svd(source)
    band = factors.band(variant.window_start(factors.k, r), r)
    LOG.debug(
        "Ortho-Init %s: Singulärwerte %.4g … %.4g", variant.label, float(band.S[0]), float(band.S[-1])
    )
    return LinearAdapter(
        W=W,
        A=band.Vt.copy(),
        B=band.U.copy(),
        S=band.S.copy(),
        A0=_frozen(band.Vt),
        B0=_frozen(band.U),
        S0=_frozen(band.S),
        kind=kind,
        schedule=schedule if kind.uses_schedule else None,
        variant=variant,
        seed=seed,
    )


def init_adalora_svd(W: np.ndarray, r: int, seed: int, *, std: float = ADALORA_INIT_STD) -> LinearAdapter:
    """Gaussian A and B, zero S: the regularised SVD-style baseline."""

    W = as_matrix(W, "W")
    _check_rank(W, r)
    if not std > 0:
        raise DomainError("Standardabweichung muss größer als 0 sein")
    n, m = W.shape
    rng = make_rng(seed)
    return LinearAdapter(
        W=W,
        A=rng.standard_normal((r, m)) * std,
        B=rng.standard_normal((n, r)) * std,
        S=np.zeros(r),
        kind=AdapterKind.ADALORA_SVD,
        seed=seed,
    )


def build_adapter(
    W: np.ndarray,
    kind: AdapterKind | str,
    r: int,
    seed: int,
    *,
    r_min: int | None = None,
    T: int | None = None,
    variant: InitVariant | str = "r_last",
    adalora_std: float = ADALORA_INIT_STD,
) -> LinearAdapter:
    """Construct any adapter kind from its config block."""

    kind = AdapterKind.parse(kind)
    schedule = None
    if kind.uses_schedule:
        if r_min is None or T is None:
            raise ConfigError("adapter.r_min", f"Adapterart {kind.value} benötigt r_min und T")
        schedule = MaskSchedule(r, r_min, T)
    if kind in (AdapterKind.PLAIN_LORA, AdapterKind.VANILLA_TLORA):
        return init_plain_lora(W, r, seed, kind=kind, schedule=schedule)
    if kind in (AdapterKind.ORTHO_LORA, AdapterKind.TLORA):
        return init_ortho(W, r, InitVariant.parse(variant), seed, kind=kind, schedule=schedule)
    return init_adalora_svd(W, r, seed, std=adalora_std)


def effective_weight(adapter: LinearAdapter, t: int | None = None) -> np.ndarray:
    return adapter.effective_weight(t)


def adapter_forward(adapter: LinearAdapter, x: np.ndarray, t: int | None = None) -> np.ndarray:
    return adapter.forward(x, t)


def adalora_penalty(A: np.ndarray, B: np.ndarray, lambda_reg: float) -> float:
    """λ (‖AAᵀ − I‖²_F + ‖BᵀB − I‖²_F)."""

    if lambda_reg < 0:
        raise DomainError("lambda_reg darf nicht negativ sein")
    if lambda_reg == 0:
        return 0.0
    return float(lambda_reg) * (orthogonality_error(A, "rows") + orthogonality_error(B, "cols"))


def adalora_penalty_grad(A: np.ndarray, B: np.ndarray, lambda_reg: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`adalora_penalty` with respect to A and B."""

    if lambda_reg < 0:
        raise DomainError("lambda_reg darf nicht negativ sein")
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    residual_a = A @ A.T - np.eye(A.shape[0])
    residual_b = B.T @ B - np.eye(B.shape[1])
    return 4.0 * lambda_reg * residual_a @ A, 4.0 * lambda_reg * B @ residual_b
