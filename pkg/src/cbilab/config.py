"""Scenario documents: YAML parsing with line-addressed diagnostics, validation and round-trip."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import yaml

from .errors import CbiLabError, ConfigError
from .mechanisms import (
    CbiParams,
    FiniteAtoms,
    LevyMeasure,
    PowerLawDensity,
    TemperedPowerLaw,
    ZeroMeasure,
)
from .sde import (
    CbiModel,
    CbireModel,
    CnbiModel,
    EnvironmentParams,
    ModelSpec,
    NonlinearRates,
    SimConfig,
)

EXPERIMENTS = (
    "mechanism-report",
    "flow-eval",
    "w1-decay",
    "wlog-decay",
    "tv-decay",
    "invariant-convergence",
    "slln",
    "fclt",
    "cbire-tv",
    "lyapunov-scan",
)

INF = math.inf

# allowed experiment parameters and their defaults
PARAM_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "mechanism-report": {},
    "flow-eval": {"lambda": 1.0, "x": 0.0, "times": None},
    "w1-decay": {"x0": 0.0, "y0": 5.0, "expect": "contraction", "band": [0.8, 1.3]},
    "wlog-decay": {"x0": 0.0, "y0": 5.0},
    "tv-decay": {"x0": 0.0, "y0": 5.0, "band": [0.8, INF]},
    "invariant-convergence": {"x0": 0.0, "tolerance": 0.05, "lambdas": [0.5, 1.0, 2.0]},
    "slln": {"x0": 0.0, "observable": "exp", "lambda": 1.0, "batches": 20},
    "fclt": {"x0": 0.0, "lambda": 1.0, "tolerance": 0.15, "batch_length": None, "burn_in": None},
    "cbire-tv": {"x0": 0.0, "y0": 5.0, "env_paths": 100},
    "lyapunov-scan": {"test_function": "log1p", "lambda": None, "x_max": 1e6, "points": 200},
}

SIM_KEYS = {
    "dt", "horizon", "jump_cutoff", "master_seed", "n_paths", "record_grid", "record_every",
}
TOP_KEYS = {"name", "experiment", "description", "model", "sim", "params", "output"}


@dataclass
class Scenario:
    """A named experiment: model, simulation settings and experiment parameters."""

    name: str
    experiment: str
    model: ModelSpec
    sim: SimConfig
    params: Dict[str, Any] = field(default_factory=dict)
    description: str = ""
    output: Optional[str] = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}", field="experiment")
        allowed = PARAM_DEFAULTS[self.experiment]
        extra = set(self.params) - set(allowed)
        if extra:
            raise ConfigError(f"unknown parameter(s) {sorted(extra)}", field="params")
        merged = dict(allowed)
        merged.update(self.params)
        self.params = merged

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "experiment": self.experiment,
            "description": self.description,
            "model": model_to_config(self.model),
            "sim": sim_to_config(self.sim),
            "params": dict(self.params),
        }
        if self.output is not None:
            out["output"] = self.output
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_sim(self, **kw) -> "Scenario":
        """Copy with simulation overrides; a shorter horizon also clips ``record_grid``."""
        kw = {k: v for k, v in kw.items() if v is not None}
        grid = self.sim.record_grid
        if "horizon" in kw and grid is not None and "record_grid" not in kw:
            kept = tuple(t for t in grid if t <= kw["horizon"])
            if kept and kept[-1] < kw["horizon"]:
                kept += (float(kw["horizon"]),)
            kw["record_grid"] = kept or (float(kw["horizon"]),)
        return Scenario(self.name, self.experiment, self.model, self.sim.replace(**kw),
                        dict(self.params), self.description, self.output)


# ---------------------------------------------------------------------------
# serialisation helpers
# ---------------------------------------------------------------------------


def measure_to_config(mu: LevyMeasure) -> dict:
    return mu.to_dict()


def model_to_config(model: ModelSpec) -> dict:
    if isinstance(model, CnbiModel):
        return {
            "kind": "cnbi",
            "rates": model.gammas.to_dict(),
            "m": model.m.to_dict(),
            "nu": model.nu.to_dict(),
        }
    p = model.params
    out = {
        "kind": model.kind,
        "beta": p.beta,
        "b": p.b,
        "sigma": p.sigma,
        "m": p.m.to_dict(),
        "nu": p.nu.to_dict(),
    }
    if isinstance(model, CbireModel):
        out["env"] = model.env.to_dict()
    return out


def sim_to_config(sim: SimConfig) -> dict:
    out = {
        "dt": sim.dt,
        "horizon": sim.horizon,
        "jump_cutoff": sim.jump_cutoff,
        "master_seed": sim.master_seed,
        "n_paths": sim.n_paths,
    }
    if sim.record_grid is not None:
        out["record_grid"] = list(sim.record_grid)
    if sim.record_every is not None:
        out["record_every"] = sim.record_every
    return out


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


class _Node:
    """Plain value plus the line it came from."""

    __slots__ = ("value", "line")

    def __init__(self, value, line):
        self.value = value
        self.line = line


def _construct(node):
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = _construct(k).value
            if key in out:
                raise ConfigError(f"duplicate key {key!r}", line=k.start_mark.line + 1)
            out[key] = _construct(v)
        return _Node(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_construct(v) for v in node.value], line)
    return _Node(_scalar(node), line)


def _scalar(node):
    loader = yaml.SafeLoader("")
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


def _plain(n: _Node):
    v = n.value
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_plain(x) for x in v]
    return v


def _mapping(n: _Node, where: str, allowed=None, required=()):
    if not isinstance(n.value, dict):
        raise ConfigError("expected a mapping", field=where, line=n.line)
    if allowed is not None:
        for k, v in n.value.items():
            if k not in allowed:
                raise ConfigError(f"unknown key {k!r}", field=where, line=v.line)
    for k in required:
        if k not in n.value:
            raise ConfigError(f"missing required key {k!r}", field=where, line=n.line)
    return n.value


def _number(n: _Node, where: str) -> float:
    v = n.value
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}", field=where, line=n.line)
    return float(v)


def _parse_measure(n: Optional[_Node], where: str) -> LevyMeasure:
    if n is None:
        return ZeroMeasure()
    if n.value == "zero":
        return ZeroMeasure()
    d = _mapping(n, where, required=("kind",))
    kind = d["kind"].value
    try:
        if kind == "zero":
            _mapping(n, where, {"kind"})
            return ZeroMeasure()
        if kind == "atoms":
            _mapping(n, where, {"kind", "atoms"}, ("atoms",))
            atoms = []
            for a in d["atoms"].value:
                if not isinstance(a.value, list) or len(a.value) != 2:
                    raise ConfigError("atoms must be [position, mass] pairs", field=where, line=a.line)
                atoms.append((_number(a.value[0], where), _number(a.value[1], where)))
            return FiniteAtoms(atoms)
        if kind == "power":
            _mapping(n, where, {"kind", "coefficient", "exponent", "z_max"}, ("coefficient", "exponent"))
            zmax = _number(d["z_max"], where) if "z_max" in d else math.inf
            return PowerLawDensity(_number(d["coefficient"], where), _number(d["exponent"], where), zmax)
        if kind == "tempered":
            _mapping(n, where, {"kind", "coefficient", "exponent", "tempering"},
                     ("coefficient", "exponent", "tempering"))
            return TemperedPowerLaw(
                _number(d["coefficient"], where),
                _number(d["exponent"], where),
                _number(d["tempering"], where),
            )
    except ConfigError:
        raise
    except CbiLabError as exc:
        raise ConfigError(str(exc), field=where, line=n.line) from exc
    raise ConfigError(f"unknown measure kind {kind!r}", field=where, line=d["kind"].line)


def _sigma(d, where):
    if "sigma" in d and "sigma2" in d:
        raise ConfigError("give either sigma or sigma2, not both", field=where, line=d["sigma"].line)
    if "sigma2" in d:
        s2 = _number(d["sigma2"], where + ".sigma2")
        if s2 < 0:
            raise ConfigError("sigma2 must be >= 0", field=where + ".sigma2", line=d["sigma2"].line)
        return math.sqrt(s2)
    if "sigma" in d:
        return _number(d["sigma"], where + ".sigma")
    return 0.0


def _parse_model(n: _Node) -> ModelSpec:
    d = _mapping(n, "model")
    kind = d["kind"].value if "kind" in d else "cbi"
    try:
        if kind == "cnbi":
            _mapping(n, "model", {"kind", "rates", "m", "nu"}, ("rates",))
            r = _mapping(d["rates"], "model.rates",
                         {"beta", "b", "alpha", "delta", "c1", "c2", "table"})
            kw = {}
            for k, v in r.items():
                if k == "table":
                    kw["table"] = tuple(
                        (_number(row.value[0], "model.rates.table"), _number(row.value[1], "model.rates.table"))
                        for row in v.value
                    )
                else:
                    kw[k] = _number(v, f"model.rates.{k}")
            return CnbiModel(
                NonlinearRates(**kw),
                _parse_measure(d.get("m"), "model.m"),
                _parse_measure(d.get("nu"), "model.nu"),
            )
        if kind not in ("cbi", "cbire"):
            raise ConfigError(f"unknown model kind {kind!r}", field="model.kind", line=d["kind"].line)
        allowed = {"kind", "beta", "b", "sigma", "sigma2", "m", "nu"}
        if kind == "cbire":
            allowed.add("env")
        _mapping(n, "model", allowed, ("b",) + (("env",) if kind == "cbire" else ()))
        params = CbiParams(
            _number(d["beta"], "model.beta") if "beta" in d else 0.0,
            _number(d["b"], "model.b"),
            _sigma(d, "model"),
            _parse_measure(d.get("m"), "model.m"),
            _parse_measure(d.get("nu"), "model.nu"),
        )
        if kind == "cbi":
            return CbiModel(params)
        e = _mapping(d["env"], "model.env", {"b_E", "sigma_E", "mu_E"})
        env = EnvironmentParams(
            _number(e["b_E"], "model.env.b_E") if "b_E" in e else 0.0,
            _number(e["sigma_E"], "model.env.sigma_E") if "sigma_E" in e else 0.0,
            _parse_measure(e.get("mu_E"), "model.env.mu_E"),
        )
        return CbireModel(params, env)
    except ConfigError:
        raise
    except CbiLabError as exc:
        raise ConfigError(str(exc), field="model", line=n.line) from exc


def _parse_sim(n: Optional[_Node]) -> SimConfig:
    if n is None:
        return SimConfig()
    d = _mapping(n, "sim", SIM_KEYS)
    kw = {}
    for k, v in d.items():
        where = f"sim.{k}"
        if k in ("n_paths", "master_seed"):
            if isinstance(v.value, bool) or not isinstance(v.value, int):
                raise ConfigError("expected an integer", field=where, line=v.line)
            kw[k] = int(v.value)
        elif k == "record_grid":
            if not isinstance(v.value, list):
                raise ConfigError("expected a list of times", field=where, line=v.line)
            kw[k] = tuple(_number(x, where) for x in v.value)
        else:
            kw[k] = _number(v, where)
    try:
        return SimConfig(**kw)
    except ConfigError as exc:
        line = d[exc.field].line if exc.field in d else n.line
        raise ConfigError(str(exc).split(": ", 1)[-1], field=f"sim.{exc.field}", line=line) from exc


def _parse_params(n: Optional[_Node], experiment: str) -> dict:
    if n is None:
        return {}
    allowed = PARAM_DEFAULTS[experiment]
    d = _mapping(n, "params", set(allowed))
    out = {}
    for k, v in d.items():
        out[k] = _plain(v)
    return out


def scenario_from_node(root: _Node) -> Scenario:
    d = _mapping(root, "<document>", TOP_KEYS, ("experiment", "model"))
    exp = d["experiment"].value
    if exp not in EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {exp!r}; expected one of {', '.join(EXPERIMENTS)}",
            field="experiment", line=d["experiment"].line,
        )
    name = d["name"].value if "name" in d else exp
    desc = d["description"].value if "description" in d else ""
    out = d["output"].value if "output" in d else None
    return Scenario(
        str(name),
        exp,
        _parse_model(d["model"]),
        _parse_sim(d.get("sim")),
        _parse_params(d.get("params"), exp),
        str(desc or ""),
        out,
    )


def load_scenario_text(text: str) -> Scenario:
    """Parse a YAML scenario document."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None) from exc
    if node is None:
        raise ConfigError("empty document")
    return scenario_from_node(_construct(node))


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return load_scenario_text(fh.read())


def scenario_from_dict(d: dict) -> Scenario:
    return load_scenario_text(yaml.safe_dump(d, sort_keys=False))
