"""Experiment configuration: a flat ``key = value`` text format.

Keys are dotted (``grid.steps``, ``noise.kind``).  Values are JSON literals
(numbers, strings, booleans, ``null``, lists); anything that is not valid JSON
is read as a bare string.  ``#`` starts a comment line.  Unknown keys, and keys
that the chosen experiment kind does not use, are rejected.
"""

import json
from dataclasses import dataclass, field

KINDS = ("validate-noise", "dissect-check", "derivative-oracle", "duality", "representation",
         "adjoint-check", "criticality", "optimize", "credit-benchmark")


class ConfigError(ValueError):
    """Malformed, incomplete or inconsistent configuration."""


# key -> (type tag, default); type tags: int, float, str, bool, floats, ints, strs,
# and "float?" for an optional float (model.theta None means the model's natural point:
# 1.0 for the toy, the analytic optimum for the credit market)
SCHEMA = {
    "kind": ("str", None),
    "seed": ("int", None),
    "paths": ("int", 100_000),
    "threads": ("int", 1),
    "output": ("str", "runs"),
    "grid.horizon": ("float", 1.0),
    "grid.steps": ("int", 64),
    "noise.kind": ("str", "poisson"),
    "noise.marks": ("int", 1),
    "noise.intensity": ("floats", (2.0,)),
    "noise.reversion": ("float", 1.0),
    "noise.volatility": ("float", 0.0),
    "dissect.level": ("int", 4),
    "basis.degree": ("int", 2),
    "derivative.targets": ("strs", ()),
    "derivative.two_ensemble": ("bool", True),
    "derivative.oracle_steps": ("int", 10),
    "derivative.count_degree": ("int", 1),
    "duality.slope_replicates": ("int", 0),
    "duality.slope_paths": ("ints", (10_000, 40_000, 160_000)),
    "duality.slope_steps": ("int", 16),
    "representation.levels": ("ints", (2, 3, 4)),
    "model.name": ("str", "toy"),
    "model.jump_scale": ("float", 0.5),
    "model.theta": ("float?", None),
    "model.alpha": ("strs", ("one", "sign")),
    "model.widths": ("ints", (1, 2)),
    "model.anchors": ("ints", (0, 8, 32)),
    "optimizer.max_iter": ("int", 50),
    "optimizer.step0": ("float", 0.1),
    "optimizer.decay": ("float", 50.0),
    "optimizer.refit_period": ("int", 5),
    "optimizer.tolerance": ("float?", None),
    "optimizer.theta_tolerance": ("float?", None),
    "optimizer.start": ("floats", (1.0,)),
    "market.rho": ("floats", (0.05,)),
    "market.intensity": ("floats", (0.02,)),
    "market.x0": ("float", 1.0),
    "market.utility": ("str", "log"),
    "market.gamma": ("float", 0.5),
    "credit.grid_step": ("float", 0.01),
    "credit.starts": ("floats", (0.1, 0.5, 0.9)),
    "credit.residual_steps": ("int", 128),
    "credit.far_proportion": ("float", 0.2),
    "credit.residual_grid": ("floats", (0.6, 0.65, 0.7, 0.75, 0.8)),
}

COMMON = ("kind", "seed", "paths", "threads", "output")

# sections each kind reads; a key is usable when its section is listed
KIND_SECTIONS = {
    "validate-noise": ("grid", "noise", "dissect"),
    "dissect-check": ("grid", "noise", "dissect"),
    "derivative-oracle": ("grid", "noise", "dissect", "basis", "derivative"),
    "duality": ("grid", "noise", "dissect", "basis", "derivative", "duality"),
    "representation": ("grid", "dissect", "basis", "derivative", "representation"),
    "adjoint-check": ("grid", "dissect", "model", "market"),
    "criticality": ("grid", "dissect", "model", "market"),
    "optimize": ("grid", "dissect", "model", "market", "optimizer"),
    "credit-benchmark": ("grid", "dissect", "market", "optimizer", "credit"),
}

# per-kind defaults that differ from the schema defaults
KIND_DEFAULTS = {
    "derivative-oracle": {"derivative.targets": ("W_T", "W_T^2", "H_T^2")},
    "duality": {"derivative.targets": ("H_T", "W_T", "constant")},
    "representation": {"derivative.targets": ("W_T^2",)},
    "adjoint-check": {"model.name": "brownian-square"},
    "optimize": {"optimizer.step0": 0.4, "optimizer.max_iter": 20, "optimizer.refit_period": 1,
                 "optimizer.theta_tolerance": 1e-5},
    "credit-benchmark": {"grid.horizon": 5.0, "grid.steps": 64, "dissect.level": 6,
                         "optimizer.step0": 0.8, "optimizer.max_iter": 20,
                         "optimizer.refit_period": 1, "optimizer.theta_tolerance": 1e-4,
                         "optimizer.start": (0.5,)},
}


def allowed_keys(kind):
    sections = KIND_SECTIONS[kind]
    return [k for k in SCHEMA if k in COMMON or k.split(".")[0] in sections]


def defaults(kind):
    out = {k: SCHEMA[k][1] for k in allowed_keys(kind)}
    out.update(KIND_DEFAULTS.get(kind, {}))
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated configuration with every usable key resolved."""

    kind: str
    seed: int
    values: dict = field(compare=True)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def with_overrides(self, overrides):
        """Copy with replaced values for dotted keys."""
        return build_config({**self.values, **overrides})

    def echo(self):
        """JSON-ready dict of every resolved value."""
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}


def _coerce(key, value, line):
    tag = SCHEMA[key][0]
    where = f" (line {line})" if line is not None else ""
    bad = ConfigError(f"key {key!r}{where}: expected {tag}, got {value!r}")
    if tag == "float?" and value is None:
        return None
    if tag in ("int", "ints"):
        items = value if tag == "ints" and isinstance(value, (list, tuple)) else [value]
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in items):
            raise bad
        return tuple(items) if tag == "ints" else items[0]
    if tag in ("float", "float?", "floats"):
        items = value if tag == "floats" and isinstance(value, (list, tuple)) else [value]
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in items):
            raise bad
        items = [float(v) for v in items]
        return tuple(items) if tag == "floats" else items[0]
    if tag == "bool":
        if not isinstance(value, bool):
            raise bad
        return value
    if tag in ("str", "strs"):
        items = value if tag == "strs" and isinstance(value, (list, tuple)) else [value]
        if not all(isinstance(v, str) for v in items):
            raise bad
        return tuple(items) if tag == "strs" else items[0]
    raise AssertionError(tag)


def _literal(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_entries(text):
    """(key, raw value, line number) triples from the text format."""
    entries, seen = [], {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {number}: missing key")
        if key in seen:
            raise ConfigError(f"line {number}: key {key!r} already set on line {seen[key]}")
        seen[key] = number
        entries.append((key, _literal(value), number))
    return entries


def build_config(raw, lines=None):
    """Validate a ``key -> value`` mapping and fill in defaults."""
    lines = lines or {}
    kind = raw.get("kind")
    if kind is None:
        raise ConfigError("missing key 'kind'")
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}")
    allowed = set(allowed_keys(kind))
    values = defaults(kind)
    for key, value in raw.items():
        where = f" (line {lines[key]})" if key in lines else ""
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}{where}")
        if key not in allowed:
            raise ConfigError(f"key {key!r}{where} is not used by kind {kind}")
        values[key] = _coerce(key, value, lines.get(key))
    if values.get("seed") is None:
        raise ConfigError("missing key 'seed' (the seed is mandatory)")
    _validate(values)
    return ExperimentConfig(kind, values["seed"], values)


def _validate(v):
    positive = ["paths", "threads", "grid.steps", "grid.horizon"]
    for key in positive:
        if v[key] <= 0:
            raise ConfigError(f"{key} must be positive")
    if "noise.kind" in v and v["noise.kind"] not in ("brownian", "poisson", "cox"):
        raise ConfigError(f"noise.kind must be brownian, poisson or cox, got {v['noise.kind']!r}")
    if "model.name" in v and v["model.name"] not in ("toy", "credit", "brownian-square"):
        raise ConfigError(f"model.name must be toy, credit or brownian-square, got {v['model.name']!r}")
    if "market.utility" in v and v["market.utility"] not in ("log", "power"):
        raise ConfigError("market.utility must be log or power")
    if "dissect.level" in v and (v["dissect.level"] < 0 or v["grid.steps"] % 2 ** v["dissect.level"]):
        raise ConfigError("grid.steps must be divisible by 2**dissect.level")


def parse_config(text):
    entries = parse_entries(text)
    raw = {k: v for k, v, _ in entries}
    lines = {k: n for k, _, n in entries}
    return build_config(raw, lines)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(config):
    """Text form that parses back to an equal config."""
    out = []
    for key in ["kind", "seed"] + [k for k in sorted(config.values) if k not in ("kind", "seed")]:
        value = config.values[key]
        if isinstance(value, tuple):
            value = list(value)
        out.append(f"{key} = {json.dumps(value)}")
    return "\n".join(out) + "\n"
