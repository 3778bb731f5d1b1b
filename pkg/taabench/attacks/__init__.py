"""
Attack registry.

Each entry binds a name to its parameter schema and a craft function with
the uniform signature craft(context, x, y, rng) -> AdversarialExample, so
the harness and CLI can drive every family the same way.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Type

import numpy as np

from taabench.attacks.attribution import attack_danaa, attack_mig, attack_naa, attribution_transform
from taabench.attacks.common import finish
from taabench.attacks.ensemble import attack_ensemble, attack_svre
from taabench.attacks.generative import (GanPair, generate_adversarial, load_pair, train_advgan,
                                         train_ge_advgan)
from taabench.attacks.gradient import (attack_difgsm, attack_ifgsm, attack_mifgsm, attack_sinifgsm,
                                       attack_ssa)
from taabench.experiment_config import (AdvGanSection, DanaaSection, DiverseInputSection, EnsembleSection,
                                        GeAdvGanSection, MigSection, MomentumParams, NeuronAttributionSection,
                                        NoParams, ScaleInvariantSection, SpectrumSection, StrictModel,
                                        SvreSection)
from taabench.errors import UnknownNameError
from taabench.model_zoo import Model
from taabench.models import (AdversarialExample, AttackBudget, DiverseInputParams, EnsembleSpec, PathSpec,
                             SpectrumTransformParams)


@dataclass
class AttackContext:
    surrogate: Model
    budget: AttackBudget
    params: StrictModel
    partners: List[Model] = field(default_factory=list)
    state: Any = None                  # GanPair for generative attacks

    @property
    def members(self) -> List[Model]:
        return [self.surrogate] + list(self.partners)


@dataclass(frozen=True)
class AttackEntry:
    name: str
    family: str
    params_schema: Type[StrictModel]
    craft: Callable[[AttackContext, np.ndarray, int, np.random.Generator], AdversarialExample]
    description: str
    prepare: Optional[Callable[[AttackContext, Any], Any]] = None
    multi_model: bool = False


def _identity(ctx, x, y, rng):
    return finish("identity", ctx.surrogate, x, x.copy(), y, moved=False)


def _ifgsm(ctx, x, y, rng):
    return attack_ifgsm(ctx.surrogate, x, y, ctx.budget)


def _mifgsm(ctx, x, y, rng):
    return attack_mifgsm(ctx.surrogate, x, y, ctx.budget, ctx.params.momentum)


def _difgsm(ctx, x, y, rng):
    p = ctx.params
    return attack_difgsm(ctx.surrogate, x, y, ctx.budget, DiverseInputParams(p.probability, p.low, p.high), rng)


def _sinifgsm(ctx, x, y, rng):
    p = ctx.params
    return attack_sinifgsm(ctx.surrogate, x, y, ctx.budget, p.momentum, p.copies, p.nesterov)


def _ssa(ctx, x, y, rng):
    p = ctx.params
    return attack_ssa(ctx.surrogate, x, y, ctx.budget, p.momentum,
                      SpectrumTransformParams(p.sigma, p.rho, p.samples), rng)


def _naa(ctx, x, y, rng):
    p = ctx.params
    return attack_naa(ctx.surrogate, x, y, ctx.budget, p.layer, p.gamma, PathSpec(steps=p.path_steps),
                      attribution_transform(p.positive), attribution_transform(p.negative))


def _danaa(ctx, x, y, rng):
    p = ctx.params
    return attack_danaa(ctx.surrogate, x, y, ctx.budget, p.layer, p.gamma, p.ascent_lr, p.ascent_steps,
                        positive=attribution_transform(p.positive), negative=attribution_transform(p.negative))


def _mig(ctx, x, y, rng):
    p = ctx.params
    return attack_mig(ctx.surrogate, x, y, ctx.budget, p.momentum, PathSpec(steps=p.path_steps))


def _ensemble(ctx, x, y, rng):
    p = ctx.params
    spec = EnsembleSpec(ctx.members, p.weights, p.lam, p.distance, p.fusion)
    return attack_ensemble(spec, x, y, ctx.budget, p.momentum)


def _svre(ctx, x, y, rng):
    p = ctx.params
    return attack_svre(EnsembleSpec(ctx.members), x, y, ctx.budget, p.momentum_outer, p.momentum_inner,
                       p.inner_iters, rng, p.outer_direction)


def _generate(ctx, x, y, rng):
    return generate_adversarial(ctx.state, x, ctx.budget, ctx.surrogate, y)


def _prepare_gan(ctx: AttackContext, data) -> GanPair:
    p = ctx.params
    if p.pretrained:
        return load_pair(p.pretrained)
    t = p.train
    settings = dict(epochs=t.epochs, seed=t.seed, bound=ctx.budget.epsilon, lambda_adv=t.lambda_adv,
                    hinge_weight=t.hinge_weight, lr=t.lr, batch_size=t.batch_size)
    if isinstance(p, GeAdvGanSection):
        spectrum = SpectrumTransformParams(p.sigma, p.rho, p.samples)
        return train_ge_advgan(ctx.surrogate, data, spectrum_params=spectrum, samples=p.samples, **settings)
    return train_advgan(ctx.surrogate, data, **settings)


_ENTRIES = [
    AttackEntry("ifgsm", "gradient", NoParams, _ifgsm, "iterative FGSM"),
    AttackEntry("difgsm", "semantic-similarity", DiverseInputSection, _difgsm,
                "I-FGSM through random resize-and-pad"),
    AttackEntry("mifgsm", "gradient", MomentumParams, _mifgsm, "momentum iterative FGSM"),
    AttackEntry("sinifgsm", "gradient", ScaleInvariantSection, _sinifgsm,
                "Nesterov look-ahead with scale-invariant gradient averaging"),
    AttackEntry("naa", "target-modification", NeuronAttributionSection, _naa,
                "descent on weighted neuron attribution, straight path"),
    AttackEntry("danaa", "target-modification", DanaaSection, _danaa,
                "neuron attribution along a gradient-ascent path"),
    AttackEntry("ssa", "semantic-similarity", SpectrumSection, _ssa, "spectrum simulation attack"),
    AttackEntry("mig", "target-modification", MigSection, _mig, "momentum integrated gradients"),
    AttackEntry("advgan", "generative", AdvGanSection, _generate, "generator trained against the surrogate",
                prepare=_prepare_gan),
    AttackEntry("ge-advgan", "generative", GeAdvGanSection, _generate,
                "AdvGAN with gradient-edited generator updates", prepare=_prepare_gan),
    AttackEntry("ensemble", "ensemble", EnsembleSection, _ensemble, "MI-FGSM on a fused multi-model loss",
                multi_model=True),
    AttackEntry("svre", "ensemble", SvreSection, _svre, "stochastic variance-reduced ensemble attack",
                multi_model=True),
    AttackEntry("identity", "baseline", NoParams, _identity, "no perturbation (sanity baseline)"),
]

ATTACKS: Dict[str, AttackEntry] = {entry.name: entry for entry in _ENTRIES}
GAN_ATTACKS = frozenset(name for name, entry in ATTACKS.items() if entry.prepare is not None)


def get_attack(name: str) -> AttackEntry:
    try:
        return ATTACKS[name]
    except KeyError:
        raise UnknownNameError("attack", name, ATTACKS) from None
