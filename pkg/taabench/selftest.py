"""
Invariant suite behind `taabench selftest`.

Runs on randomly initialised models so it needs no training: gradient checks
for the tensor primitives, the DCT identities, the exact reduction identities
between attacks, SVRE's variance-reduction identities and the budget
invariant for every registered attack.
"""

import logging
import time
from typing import Callable, List, Tuple

import numpy as np

from taabench import tensor_core as tc
from taabench.attacks import ATTACKS, AttackContext
from taabench.attacks.ensemble import (attack_ensemble, attack_svre, fused_gradient, model_gradients,
                                       variance_reduced_gradient)
from taabench.attacks.generative import GanPair
from taabench.attacks.gradient import attack_difgsm, attack_ifgsm, attack_mifgsm, attack_sinifgsm, attack_ssa
from taabench.model_zoo import Model, get_architecture
from taabench.models import AttackBudget, DiverseInputParams, EnsembleSpec, SpectrumTransformParams
from taabench.transforms import spectrum_transform

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
DCT_TOLERANCE = 1e-8
SVRE_TOLERANCE = 1e-10


class _Fixture:
    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        self.rng = rng
        self.model = Model(get_architecture("tinycnn-a"), get_architecture("tinycnn-a").init_params(rng), name="a")
        self.partner = Model(get_architecture("tinycnn-b"), get_architecture("tinycnn-b").init_params(rng), name="b")
        self.x = rng.uniform(0.05, 0.95, size=(16, 16, 1))
        self.y = int(rng.integers(10))
        self.budget = AttackBudget(epsilon=8 / 255, iterations=4)
        self.seed = seed


def _primitive_checks(f: _Fixture) -> None:
    rng = np.random.default_rng(f.seed + 1)
    labels = np.array([1, 4])
    basis = tc.dct_basis(4)
    weights = rng.normal(size=(3, 3, 2, 3))
    rng_matrix = rng.normal(size=(3, 4))
    probe = rng.normal(size=(2, 5))
    conv_probe = rng.normal(size=(1, 6, 6, 3))
    dct_probe = rng.normal(size=(4, 4, 1))
    cases: List[Tuple[str, Callable, Tuple[int, ...]]] = [
        ("matmul", lambda t: tc.sum(tc.matmul(t, rng_matrix)), (2, 3)),
        ("tanh", lambda t: tc.sum(tc.tanh(t)), (2, 3)),
        ("sigmoid", lambda t: tc.sum(tc.sigmoid(t)), (2, 3)),
        ("softmax", lambda t: tc.sum(tc.multiply(tc.softmax(t), probe)), (2, 5)),
        ("logsumexp", lambda t: tc.sum(tc.logsumexp(t)), (2, 5)),
        ("cross_entropy", lambda t: tc.cross_entropy(t, labels), (2, 5)),
        ("conv2d", lambda t: tc.sum(tc.multiply(tc.conv2d(t, weights), conv_probe)), (1, 6, 6, 2)),
        ("dct2", lambda t: tc.sum(tc.multiply(tc.dct2(t, basis), dct_probe)), (4, 4, 1)),
        ("l2_norm", lambda t: tc.sum(tc.l2_norm(t, axis=1)), (2, 5)),
    ]
    for name, fn, shape in cases:
        error = tc.check_gradients(fn, rng.normal(size=shape))
        assert error < GRADIENT_TOLERANCE, f"{name}: relative error {error:.2e}"
    model_error = tc.check_gradients(
        lambda t: tc.cross_entropy(f.model.forward(t), [f.y], reduction="sum"), f.x[None],
        indices=range(0, 256, 17))
    assert model_error < GRADIENT_TOLERANCE, f"model loss: relative error {model_error:.2e}"


def _dct_checks(f: _Fixture) -> None:
    basis = tc.dct_basis(16)
    a = basis.matrix
    assert np.abs(a @ a.T - np.eye(16)).max() <= DCT_TOLERANCE, "basis is not orthonormal"
    coefficients = tc.dct2(f.x, basis).data
    back = tc.idct2(coefficients, basis).data
    assert np.abs(back - f.x).max() <= DCT_TOLERANCE, "round trip drifted"
    assert abs((coefficients ** 2).sum() - (f.x ** 2).sum()) <= DCT_TOLERANCE, "energy not preserved"
    same = spectrum_transform(f.x, SpectrumTransformParams(0.0, 0.0), f.rng).data
    assert np.array_equal(same, f.x), "identity spectrum transform changed the input"


def _same_trajectory(first, second, what: str) -> None:
    assert np.array_equal(first.x_adv, second.x_adv), f"{what}: trajectories differ"


def _reduction_checks(f: _Fixture) -> None:
    m, x, y, budget = f.model, f.x, f.y, f.budget
    baseline = attack_ifgsm(m, x, y, budget)
    _same_trajectory(attack_mifgsm(m, x, y, budget, momentum=0.0), baseline, "MI-FGSM(mu=0)")
    _same_trajectory(attack_difgsm(m, x, y, budget, DiverseInputParams(probability=0.0)), baseline,
                     "DI-FGSM(p=0)")
    _same_trajectory(attack_sinifgsm(m, x, y, budget, momentum=0.0, copies=1, nesterov=False), baseline,
                     "SI-NI-FGSM(m=1, mu=0)")
    momentum = attack_mifgsm(m, x, y, budget)
    _same_trajectory(attack_ssa(m, x, y, budget, params=SpectrumTransformParams(0.0, 0.0)), momentum,
                     "SSA(sigma=0, rho=0)")
    _same_trajectory(attack_ensemble(EnsembleSpec([m]), x, y, budget), momentum, "ensemble(k=1)")
    pair = EnsembleSpec([m, f.partner])
    _same_trajectory(attack_svre(pair, x, y, budget, inner_iters=0),
                     attack_ensemble(EnsembleSpec([m, f.partner], fusion="losses"), x, y, budget),
                     "SVRE(inner=0)")


def _svre_checks(f: _Fixture) -> None:
    spec = EnsembleSpec([f.model, f.partner], weights=[0.3, 0.7])
    anchor = f.x
    x_hat = np.clip(anchor + f.rng.uniform(-0.03, 0.03, size=anchor.shape), 0.0, 1.0)
    full = fused_gradient(spec, model_gradients(spec, anchor, f.y))
    for j in range(spec.k):
        at_anchor = variance_reduced_gradient(spec, j, anchor, anchor, f.y)
        assert np.abs(at_anchor - full).max() <= SVRE_TOLERANCE, f"model {j}: correction does not cancel"
    expected = fused_gradient(spec, model_gradients(spec, x_hat, f.y))
    mean = sum(w * variance_reduced_gradient(spec, j, x_hat, anchor, f.y) for j, w in enumerate(spec.weights))
    assert np.abs(mean - expected).max() <= SVRE_TOLERANCE, "weighted mean is not the full gradient"


def _budget_checks(f: _Fixture) -> None:
    pair = GanPair.initialize(np.random.default_rng(f.seed + 2), bound=f.budget.epsilon)
    for name, entry in ATTACKS.items():
        params = entry.params_schema().resolve(f.budget, f.seed)
        partners = [f.partner] if entry.multi_model else []
        ctx = AttackContext(f.model, f.budget, params, partners, state=pair if entry.prepare else None)
        for i in range(2):
            x = np.random.default_rng(f.seed + 10 + i).uniform(0.0, 1.0, size=f.x.shape)
            example = entry.craft(ctx, x, f.y, np.random.default_rng(i))
            assert f.budget.holds(example.x_adv, example.x), f"{name}: budget violated on draw {i}"


CHECKS = (
    ("tensor primitive gradients", _primitive_checks),
    ("DCT identities", _dct_checks),
    ("attack reduction identities", _reduction_checks),
    ("SVRE variance-reduction identities", _svre_checks),
    ("budget invariant (all attacks)", _budget_checks),
)


def run_selftest(seed: int = 0) -> bool:
    """Run every check, log each outcome, and report whether all passed."""
    fixture = _Fixture(seed)
    failures = 0
    for name, check in CHECKS:
        start = time.time()
        try:
            check(fixture)
            logger.info(f"✅ {name} ({time.time() - start:.2f}s)")
        except AssertionError as e:
            failures += 1
            logger.error(f"❌ {name}: {e}")
    if failures:
        logger.error(f"❌ selftest: {failures}/{len(CHECKS)} checks failed")
    else:
        logger.info(f"✅ selftest: all {len(CHECKS)} checks passed")
    return failures == 0
