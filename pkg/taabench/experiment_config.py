"""
Experiment configuration: YAML files validated by pydantic schemas.

Unknown keys are errors everywhere. Parsing produces an ExperimentPlan in
which every default is materialised, so report.json can echo it verbatim.
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from taabench.config import DEFAULT_SAMPLES, MAX_WORKERS
from taabench.errors import ConfigError, UnknownNameError
from taabench.model_zoo import ARCHITECTURES
from taabench.models import AttackBudget


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    def resolve(self, budget: "BudgetSection", seed: int) -> "StrictModel":
        """Return a copy with budget- and seed-derived defaults filled in."""
        return self


# ---------------------------------------------------------------------------
# Per-attack parameter schemas
# ---------------------------------------------------------------------------

class NoParams(StrictModel):
    pass


class MomentumParams(StrictModel):
    momentum: float = Field(1.0, ge=0)


class DiverseInputSection(StrictModel):
    probability: float = Field(0.5, ge=0, le=1)
    low: float = Field(0.8, gt=0, le=1)
    high: float = Field(1.0, gt=0, le=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.low > self.high:
            raise ValueError("low must not exceed high")
        return self


class ScaleInvariantSection(MomentumParams):
    copies: int = Field(5, ge=1)
    nesterov: bool = True


class SpectrumSection(MomentumParams):
    sigma: Optional[float] = Field(None, ge=0, description="defaults to epsilon")
    rho: float = Field(0.5, ge=0, le=1)
    samples: int = Field(20, ge=1)

    def resolve(self, budget, seed):
        return self.model_copy(update={"sigma": budget.epsilon if self.sigma is None else self.sigma})


AttributionTransform = Literal["identity", "square", "tanh"]


class AttributionWeightingSection(StrictModel):
    layer: Optional[str] = Field(None, description="defaults to the architecture's default tap")
    gamma: float = Field(1.0, ge=0)
    positive: AttributionTransform = Field("identity", description="f_p applied to positive attributions")
    negative: AttributionTransform = Field("identity", description="f_n applied to negated negative attributions")


class NeuronAttributionSection(AttributionWeightingSection):
    path_steps: int = Field(30, ge=2)


class DanaaSection(AttributionWeightingSection):
    ascent_lr: Optional[float] = Field(None, ge=0, description="defaults to epsilon / 10")
    ascent_steps: int = Field(10, ge=1)

    def resolve(self, budget, seed):
        lr = budget.epsilon / 10 if self.ascent_lr is None else self.ascent_lr
        return self.model_copy(update={"ascent_lr": lr})


class MigSection(MomentumParams):
    path_steps: int = Field(30, ge=2)


class EnsembleSection(MomentumParams):
    partners: Optional[List[str]] = Field(None, description="defaults to every other surrogate")
    weights: Optional[List[float]] = Field(None, description="defaults to uniform")
    lam: float = Field(0.0, ge=0)
    distance: Literal["l2", "l2-squared"] = "l2"
    fusion: Literal["probabilities", "losses"] = "probabilities"


class SvreSection(StrictModel):
    partners: Optional[List[str]] = None
    momentum_outer: float = Field(1.0, ge=0)
    momentum_inner: float = Field(1.0, ge=0)
    inner_iters: Optional[int] = Field(None, ge=0, description="defaults to 2k")
    outer_direction: Literal["accumulated", "final_point"] = "accumulated"


class GanTrainSection(StrictModel):
    epochs: int = Field(20, ge=0)
    lr: float = Field(0.01, ge=0)
    lambda_adv: float = Field(10.0, ge=0)
    hinge_weight: float = Field(1.0, ge=0)
    batch_size: int = Field(32, ge=1)
    seed: Optional[int] = Field(None, description="defaults to the run seed")


class AdvGanSection(StrictModel):
    pretrained: Optional[str] = None
    train: GanTrainSection = Field(default_factory=GanTrainSection)

    def resolve(self, budget, seed):
        train = self.train.model_copy(update={"seed": seed if self.train.seed is None else self.train.seed})
        return self.model_copy(update={"train": train})


class GeAdvGanSection(AdvGanSection):
    sigma: Optional[float] = Field(None, ge=0, description="defaults to epsilon")
    rho: float = Field(0.5, ge=0, le=1)
    samples: int = Field(10, ge=1)

    def resolve(self, budget, seed):
        resolved = super().resolve(budget, seed)
        return resolved.model_copy(update={"sigma": budget.epsilon if self.sigma is None else self.sigma})


# ---------------------------------------------------------------------------
# Plan sections
# ---------------------------------------------------------------------------

class DatasetSection(StrictModel):
    seed: int = 0
    n_train: int = Field(2000, gt=0)
    n_test: int = Field(500, gt=0)


class ModelSection(StrictModel):
    name: str
    arch: str
    role: Literal["surrogate", "target", "both"] = "both"
    seed: int = 0
    epochs: int = Field(10, ge=0)
    lr: float = Field(0.05, ge=0)
    batch_size: int = Field(32, ge=1)
    path: Optional[str] = None
    adv_epsilon: Optional[float] = Field(None, ge=0, description="adversarial architectures only; defaults to 8/255")
    adv_iterations: int = Field(5, ge=1)

    @property
    def is_surrogate(self) -> bool:
        return self.role in ("surrogate", "both")

    @property
    def is_target(self) -> bool:
        return self.role in ("target", "both")


class BudgetSection(StrictModel):
    epsilon: float = Field(8 / 255, gt=0)
    iterations: int = Field(10, ge=1)
    step_size: Optional[float] = Field(None, gt=0, description="defaults to epsilon / iterations")

    def to_budget(self) -> AttackBudget:
        return AttackBudget(self.epsilon, self.iterations, self.step_size)


class AttackSection(StrictModel):
    name: str
    label: Optional[str] = None
    params: Dict[str, Any] = Field(default_factory=dict)
    pretrained: Optional[str] = None
    train: Optional[Dict[str, Any]] = None


class RunSection(StrictModel):
    samples: int = Field(DEFAULT_SAMPLES, gt=0)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    threads: int = Field(MAX_WORKERS, ge=1)


class ConfigFile(StrictModel):
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    models: List[ModelSection] = Field(min_length=1)
    attacks: List[AttackSection] = Field(min_length=1)
    budget: BudgetSection = Field(default_factory=BudgetSection)
    run: RunSection = Field(default_factory=RunSection)


class ResolvedAttack(StrictModel):
    name: str
    label: str
    params: Dict[str, Any]


class ExperimentPlan(StrictModel):
    dataset: DatasetSection
    models: List[ModelSection]
    attacks: List[ResolvedAttack]
    budget: BudgetSection
    run: RunSection

    @property
    def surrogates(self) -> List[ModelSection]:
        return [m for m in self.models if m.is_surrogate]

    @property
    def targets(self) -> List[ModelSection]:
        return [m for m in self.models if m.is_target]

    def attack(self, label: str) -> ResolvedAttack:
        for entry in self.attacks:
            if entry.label == label:
                return entry
        raise UnknownNameError("attack", label, [a.label for a in self.attacks])

    def with_seed(self, seed: int) -> "ExperimentPlan":
        return self.model_copy(update={"run": self.run.model_copy(update={"seed": seed})})


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _key_path(loc: Sequence) -> str:
    out = ""
    for part in loc:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out


def _line_of(root: Optional[yaml.Node], loc: Sequence) -> Optional[int]:
    """1-based line of the deepest YAML node along loc."""
    node, line = root, None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                if key_node.value == str(part):
                    line, node = key_node.start_mark.line + 1, value_node
                    break
            else:
                return line
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def _config_error(error: ValidationError, root, prefix: Tuple = ()) -> ConfigError:
    first = error.errors()[0]
    loc = tuple(prefix) + tuple(first["loc"])
    message = first["msg"]
    if first["type"] == "extra_forbidden":
        message = "unknown key"
    return ConfigError(message, key=_key_path(loc), line=_line_of(root, loc))


def _resolve_attack(index: int, section: AttackSection, plan_budget: BudgetSection, seed: int,
                    surrogate_names: List[str], root) -> ResolvedAttack:
    from taabench.attacks import ATTACKS, GAN_ATTACKS

    loc = ("attacks", index)
    if section.name not in ATTACKS:
        raise UnknownNameError("attack", section.name, ATTACKS, key=_key_path(loc + ("name",)),
                               line=_line_of(root, loc + ("name",)))
    raw = dict(section.params)
    for extra in ("pretrained", "train"):
        value = getattr(section, extra)
        if value is None:
            continue
        if section.name not in GAN_ATTACKS:
            raise ConfigError(f"'{extra}' is only valid for {', '.join(sorted(GAN_ATTACKS))}",
                              key=_key_path(loc + (extra,)), line=_line_of(root, loc + (extra,)))
        raw[extra] = value
    schema = ATTACKS[section.name].params_schema
    try:
        params = schema.model_validate(raw)
    except ValidationError as e:
        first_loc = tuple(e.errors()[0]["loc"])
        # pretrained/train sit beside params in the file
        prefix = loc if first_loc and first_loc[0] in ("pretrained", "train") else loc + ("params",)
        raise _config_error(e, root, prefix) from None
    for partner in getattr(params, "partners", None) or []:
        if partner not in surrogate_names:
            raise UnknownNameError("surrogate", partner, surrogate_names,
                                   key=_key_path(loc + ("params", "partners")),
                                   line=_line_of(root, loc + ("params", "partners")))
    resolved = params.resolve(plan_budget, seed)
    return ResolvedAttack(name=section.name, label=section.label or section.name,
                          params=resolved.model_dump(mode="json"))


def default_attack(plan: "ExperimentPlan", name: str) -> ResolvedAttack:
    """Resolve a registered attack with default parameters against an existing plan."""
    surrogate_names = [m.name for m in plan.surrogates]
    return _resolve_attack(0, AttackSection(name=name), plan.budget, plan.run.seed, surrogate_names, None)


def parse_plan(data: Any, root: Optional[yaml.Node] = None, seed: Optional[int] = None) -> ExperimentPlan:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping with sections dataset, models, attacks, budget, run")
    try:
        config = ConfigFile.model_validate(data)
    except ValidationError as e:
        raise _config_error(e, root) from None

    run = config.run if seed is None else config.run.model_copy(update={"seed": seed})
    budget = config.budget.model_copy(
        update={"step_size": config.budget.step_size or config.budget.epsilon / config.budget.iterations})

    names = set()
    models = []
    for i, entry in enumerate(config.models):
        loc = ("models", i)
        if entry.arch not in ARCHITECTURES:
            raise UnknownNameError("architecture", entry.arch, ARCHITECTURES, key=_key_path(loc + ("arch",)),
                                   line=_line_of(root, loc + ("arch",)))
        if entry.name in names:
            raise ConfigError(f"duplicate model name '{entry.name}'", key=_key_path(loc + ("name",)),
                              line=_line_of(root, loc + ("name",)))
        names.add(entry.name)
        if ARCHITECTURES[entry.arch].adversarial and entry.adv_epsilon is None:
            entry = entry.model_copy(update={"adv_epsilon": 8 / 255})
        models.append(entry)

    surrogate_names = [m.name for m in models if m.is_surrogate]
    if not surrogate_names:
        raise ConfigError("the model roster needs at least one surrogate", key="models")
    if not any(m.is_target for m in models):
        raise ConfigError("the model roster needs at least one target", key="models")

    attacks, labels = [], set()
    for i, section in enumerate(config.attacks):
        resolved = _resolve_attack(i, section, budget, run.seed, surrogate_names, root)
        if resolved.label in labels:
            raise ConfigError(f"duplicate attack label '{resolved.label}'", key=_key_path(("attacks", i)),
                              line=_line_of(root, ("attacks", i)))
        labels.add(resolved.label)
        attacks.append(resolved)

    return ExperimentPlan(dataset=config.dataset, models=models, attacks=attacks, budget=budget, run=run)


def load_plan(path, seed: Optional[int] = None) -> ExperimentPlan:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"invalid YAML in {path}: {getattr(e, 'problem', e)}",
                          line=None if mark is None else mark.line + 1) from None
    return parse_plan(data, root, seed)
