"""Experiment configuration: a YAML file validated against a strict schema.

Unknown keys are rejected.  Validation errors carry the field path and,
when the file is at hand, the YAML line of the offending entry.
"""

import copy
import hashlib
import json
from typing import Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TermSpec(Strict):
    angle_mode: List[int]
    space_mode: List[int]
    amplitude: float
    parity: Literal["cos", "sin"] = "cos"
    component: int = 0


class LatticeConfig(Strict):
    d: int = Field(1, ge=1, le=2)
    n: int = Field(1, ge=1, le=2)
    J: int = Field(16, ge=2, le=64)
    L: int = Field(8, ge=1, le=32)
    pad: int = Field(8, ge=0, description="extra spatial modes used while conjugating by the diffeomorphism")


class ParameterConfig(Strict):
    omega: List[float] = [1.3247]
    nu: List[float] = [1.7548]
    eps: float = Field(1e-3, ge=0)
    gamma: float = Field(0.05, gt=0, lt=1)
    tau: float = Field(3.0, gt=0)
    gain: float = Field(0.75, gt=0, le=1, description="order lowering per smoothing step")
    a_exponent: Optional[float] = Field(None, gt=0, description="if set, gamma = eps**a_exponent")


class WConfig(Strict):
    kind: Literal["multiplier_times_potential", "explicit_blocks"] = "multiplier_times_potential"
    structure: Literal["reversible", "symmetric_hyperbolic_only", "planted_growth"] = "reversible"
    potential: List[TermSpec] = Field(default_factory=lambda: [
        TermSpec(angle_mode=[1], space_mode=[0], amplitude=1.0),
        TermSpec(angle_mode=[0], space_mode=[1], amplitude=0.5),
        TermSpec(angle_mode=[0], space_mode=[0], amplitude=1.0)])
    direction: List[float] = [1.0]
    growth: float = 0.0
    growth_order: float = -1.0
    blocks_path: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.kind == "explicit_blocks" and not self.blocks_path:
            raise ValueError("explicit_blocks needs blocks_path")
        if self.structure == "planted_growth" and self.growth == 0:
            raise ValueError("planted_growth needs a nonzero growth strength")
        if self.structure != "planted_growth" and self.growth != 0:
            raise ValueError("growth is only allowed with structure planted_growth")
        return self


class StageConfig(Strict):
    straighten: bool = True
    smooth: bool = True
    reduce: bool = True
    dynamics: bool = False


class StraighteningConfig(Strict):
    tol: float = Field(1e-12, gt=0)
    max_iter: int = Field(200, ge=1)


class SmoothingConfig(Strict):
    M_cap: int = Field(4, ge=0)
    series_tol: float = Field(1e-12, gt=0)


class KAMConfig(Strict):
    max_steps: int = Field(12, ge=0)
    stop_tol: float = Field(1e-13, gt=0, description="relative to the initial remainder norm")
    s: Optional[float] = Field(None, ge=0, description="angle regularity; defaults to [n/2] + 1")
    sigma: float = 0.0
    cantor_L: Optional[int] = Field(None, ge=1, description="angle radius of the final check; defaults to L")


class ToleranceConfig(Strict):
    straightening_residual: float = 1e-9
    homological: float = 1e-12
    structure: float = 1e-12
    reversible_real_part: float = 1e-8


class U0Config(Strict):
    kind: Literal["analytic", "mode", "reduced_mode"] = "analytic"
    rate: float = Field(0.5, gt=0, lt=1)
    mode: Optional[List[int]] = None


class DynamicsConfig(Strict):
    T: float = 100.0
    dt: float = 0.05
    integrator: Literal["strang_splitting", "rk4"] = "strang_splitting"
    sigma: float = 1.0
    record_every: int = Field(10, ge=1)
    u0: U0Config = Field(default_factory=U0Config)
    directions: Literal["forward", "backward", "both"] = "forward"
    tol_rate: float = 1e-4


class MeasureConfig(Strict):
    samples: int = Field(2000, ge=1)
    gammas: List[float] = [0.2, 0.1, 0.05, 0.025]
    tau: float = Field(2.0, gt=0)
    model: Literal["first_order", "full_pipeline"] = "first_order"
    radius: Optional[int] = Field(None, ge=1, description="scan radius; defaults to max(32, 2/gamma_min**(1/tau))")
    spot_fraction: float = Field(0.05, ge=0, le=1, description="share of samples re-run through the full pipeline")
    spot_bound: float = Field(0.05, ge=0, le=1)
    chunk: int = Field(250, ge=1)

    @field_validator("gammas")
    @classmethod
    def _gammas(cls, v):
        if not v or any(not 0 < g < 1 for g in v):
            raise ValueError("gammas must be a nonempty list in (0, 1)")
        return v


class SweepConfig(Strict):
    grid: Dict[str, List] = Field(default_factory=dict)


class ExperimentConfig(Strict):
    name: str = "experiment"
    lattice: LatticeConfig = Field(default_factory=LatticeConfig)
    parameters: ParameterConfig = Field(default_factory=ParameterConfig)
    V: List[TermSpec] = Field(default_factory=lambda: [
        TermSpec(angle_mode=[1], space_mode=[1], amplitude=1.0),
        TermSpec(angle_mode=[0], space_mode=[0], amplitude=0.5)])
    W: WConfig = Field(default_factory=WConfig)
    stages: StageConfig = Field(default_factory=StageConfig)
    straightening: StraighteningConfig = Field(default_factory=StraighteningConfig)
    smoothing: SmoothingConfig = Field(default_factory=SmoothingConfig)
    kam: KAMConfig = Field(default_factory=KAMConfig)
    tolerances: ToleranceConfig = Field(default_factory=ToleranceConfig)
    dynamics: DynamicsConfig = Field(default_factory=DynamicsConfig)
    measure: MeasureConfig = Field(default_factory=MeasureConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    overrides: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _dimensions(self):
        n, d = self.lattice.n, self.lattice.d
        p = self.parameters
        if len(p.omega) != n:
            raise ValueError(f"omega has {len(p.omega)} entries, lattice n = {n}")
        if len(p.nu) != d:
            raise ValueError(f"nu has {len(p.nu)} entries, lattice d = {d}")
        if len(self.W.direction) != d:
            raise ValueError(f"W.direction has {len(self.W.direction)} entries, lattice d = {d}")
        for where, terms in (("V", self.V), ("W.potential", self.W.potential)):
            for t in terms:
                if len(t.angle_mode) != n or len(t.space_mode) != d:
                    raise ValueError(f"{where} term {t.angle_mode}/{t.space_mode} has wrong dimensions")
        for t in self.V:
            if not 0 <= t.component < d:
                raise ValueError(f"V term component {t.component} out of range")
        return self

    @property
    def gamma(self):
        p = self.parameters
        if p.a_exponent is not None and p.eps > 0:
            return p.eps ** p.a_exponent
        return p.gamma

    def canonical(self):
        """Plain-data form with every default filled in."""
        return self.model_dump(mode="json")

    def digest(self):
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def to_yaml(self):
        return yaml.safe_dump(self.canonical(), sort_keys=False)


class ConfigError(ValueError):
    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("\n".join(self.messages))


def _node_lines(node, path=()):
    """Map from key paths to 1-based YAML line numbers."""
    out = {path: node.start_mark.line + 1}
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            out.update(_node_lines(value, path + (key.value,)))
            out[path + (key.value,)] = key.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, value in enumerate(node.value):
            out.update(_node_lines(value, path + (i,)))
    return out


def _line_for(lines, loc):
    loc = tuple(loc)
    while loc:
        key = tuple(str(p) if not isinstance(p, int) else p for p in loc)
        if key in lines:
            return lines[key]
        loc = loc[:-1]
    return None


def _format_errors(err, lines, source):
    out = []
    for e in err.errors():
        loc = [p for p in e["loc"]]
        where = ".".join(str(p) for p in loc) or "<root>"
        line = _line_for(lines, loc) if lines else None
        prefix = f"{source}:{line}: " if line else f"{source}: "
        out.append(f"{prefix}{where}: {e['msg']}")
    return out


def set_path(data, dotted, value):
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        if isinstance(node, list):
            node = node[int(k)]
            continue
        node = node.setdefault(k, {})
        if not isinstance(node, (dict, list)):
            raise ConfigError([f"override {dotted}: {k} is not a section"])
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def apply_overrides(data, overrides):
    data = copy.deepcopy(data) if data else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not KEY=VALUE"])
        key, raw = item.split("=", 1)
        set_path(data, key.strip(), yaml.safe_load(raw))
    if overrides:
        data["overrides"] = list(data.get("overrides", [])) + list(overrides)
    return data


def parse_config(text, source="<config>", overrides=()):
    """Validate YAML text (plus KEY=VALUE overrides) into an :class:`ExperimentConfig`."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{source}: YAML error: {exc}"]) from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError([f"{source}: top level must be a mapping"])
    lines = _node_lines(node) if node is not None else {}
    data = apply_overrides(data, overrides)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_errors(err, lines, source)) from err


def load_config(path, overrides=()):
    with open(path) as fh:
        return parse_config(fh.read(), str(path), overrides)


def reference():
    """Generated documentation of every field with its default."""
    lines = []

    def walk(model, prefix):
        for name, f in model.model_fields.items():
            ann = f.annotation
            sub = ann if isinstance(ann, type) and issubclass(ann, BaseModel) else None
            if sub is not None and sub is not TermSpec:
                walk(sub, prefix + name + ".")
                continue
            default = f.get_default(call_default_factory=True)
            if isinstance(default, BaseModel):
                default = default.model_dump(mode="json")
            elif isinstance(default, list):
                default = [d.model_dump(mode="json") if isinstance(d, BaseModel) else d for d in default]
            desc = f" ({f.description})" if f.description else ""
            lines.append(f"{prefix}{name}: {json.dumps(default)}{desc}")

    walk(ExperimentConfig, "")
    return "\n".join(lines)
