"""Finite-difference verification of the analytic triple backward pass.

Random small instances are drawn so the objective is smooth around the
evaluation point: the hinge is strictly active with margin to spare, and
no trunk pre-activation sits near the ReLU kink, so central differences
with h=1e-5 are trustworthy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import TagVector
from .metric import distance
from .model import (
    ModelConfig,
    ModelParams,
    Variant,
    backward_triple,
    extract_features,
    forward_triple,
    init_params,
)
from .numeric import finite_diff_grad

REL_TOL = 1e-4
ABS_TOL = 1e-7
SMALL_GRAD = 1e-6
FD_STEP = 1e-5

# Pre-activations this close to zero could cross the ReLU kink while
# perturbing parameters by h; such draws are rejected.
_KINK_GUARD = 1e-3


@dataclass(frozen=True)
class CheckInstance:
    params: ModelParams
    anchor_raw: np.ndarray
    positive_raw: np.ndarray
    negative_raw: np.ndarray
    positive_tags: TagVector
    negative_tags: TagVector
    alpha: float


@dataclass(frozen=True)
class TensorReport:
    name: str
    max_abs_err: float
    max_rel_err: float
    passed: bool


@dataclass(frozen=True)
class TrialReport:
    trial: int
    variant: Variant
    tensors: tuple[TensorReport, ...]

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.tensors)


def _draw_raw(rng: np.random.Generator, params: ModelParams, domain: str) -> np.ndarray:
    cfg = params.config
    for _ in range(200):
        raw = rng.normal(0.0, 1.0, size=(cfg.locations, cfg.raw_dim))
        pre_act = params.trunk.apply(raw)
        if np.min(np.abs(pre_act)) > _KINK_GUARD:
            # also keep the branch output comfortably away from a zero pool
            fmap = extract_features(raw, domain, params)
            if float(np.linalg.norm(fmap.data.mean(axis=0))) > 1e-3:
                return raw
    raise RuntimeError("could not draw a kink-safe raw feature map")


def random_check_instance(
    seed: "int | list[int]", variant: Variant = Variant.CTXYNET
) -> CheckInstance:
    """Seeded random model + triple with a strictly active hinge."""
    rng = np.random.default_rng(seed)
    config = ModelConfig(
        locations=int(rng.integers(2, 7)),
        channels=int(rng.integers(2, 6)),
        tag_count=int(rng.integers(1, 5)),
        raw_dim=int(rng.integers(2, 6)),
        variant=variant,
    )
    params = init_params(config, rng)
    anchor_raw = _draw_raw(rng, params, "user")
    positive_raw = _draw_raw(rng, params, "shop")
    negative_raw = _draw_raw(rng, params, "shop")
    positive_tags = TagVector(bits=rng.integers(0, 2, size=config.tag_count).astype(np.float64))
    negative_tags = TagVector(bits=rng.integers(0, 2, size=config.tag_count).astype(np.float64))

    # Pick alpha so the hinge argument lands at >= 0.25, far from the kink.
    probe = forward_triple(
        anchor_raw, positive_raw, negative_raw, positive_tags, negative_tags, params, 0.0
    ).embeddings
    gap = distance(probe.anchor_neg, probe.negative) - distance(probe.anchor_pos, probe.positive)
    alpha = max(0.05, gap + 0.25)
    return CheckInstance(
        params=params,
        anchor_raw=anchor_raw,
        positive_raw=positive_raw,
        negative_raw=negative_raw,
        positive_tags=positive_tags,
        negative_tags=negative_tags,
        alpha=alpha,
    )


def check_triple_gradients(
    inst: CheckInstance,
    h: float = FD_STEP,
    rel_tol: float = REL_TOL,
    abs_tol: float = ABS_TOL,
    small_grad: float = SMALL_GRAD,
) -> list[TensorReport]:
    """Compare every parameter gradient against central differences.

    Entries with analytic magnitude below ``small_grad`` are held to the
    absolute tolerance instead of the relative one.
    """
    _, analytic = backward_triple(
        inst.anchor_raw,
        inst.positive_raw,
        inst.negative_raw,
        inst.positive_tags,
        inst.negative_tags,
        inst.params,
        inst.alpha,
    )
    reports: list[TensorReport] = []
    for name, tensor in inst.params.named_tensors():
        saved = tensor.copy()

        def objective(candidate: np.ndarray) -> float:
            tensor[...] = candidate
            return forward_triple(
                inst.anchor_raw,
                inst.positive_raw,
                inst.negative_raw,
                inst.positive_tags,
                inst.negative_tags,
                inst.params,
                inst.alpha,
            ).loss

        numeric = finite_diff_grad(objective, saved, h)
        tensor[...] = saved

        diff = np.abs(analytic[name] - numeric)
        small = np.abs(analytic[name]) < small_grad
        denom = np.maximum(np.abs(analytic[name]), np.abs(numeric))
        rel = np.where(small, 0.0, diff / np.where(denom == 0.0, 1.0, denom))
        ok = np.where(small, diff < abs_tol, diff <= rel_tol * denom)
        reports.append(
            TensorReport(
                name=name,
                max_abs_err=float(diff.max()) if diff.size else 0.0,
                max_rel_err=float(rel.max()) if rel.size else 0.0,
                passed=bool(np.all(ok)),
            )
        )
    return reports


def run_gradient_checks(
    trials: int = 20,
    seed: int = 1,
    h: float = FD_STEP,
    rel_tol: float = REL_TOL,
    abs_tol: float = ABS_TOL,
) -> list[TrialReport]:
    """Run seeded trials cycling through all three variants."""
    cycle = (Variant.CTXYNET, Variant.TAGYNET, Variant.YNET)
    reports = []
    for trial in range(trials):
        variant = cycle[trial % len(cycle)]
        inst = random_check_instance([seed, trial], variant=variant)
        tensors = check_triple_gradients(inst, h=h, rel_tol=rel_tol, abs_tol=abs_tol)
        reports.append(TrialReport(trial=trial, variant=variant, tensors=tuple(tensors)))
    return reports
