"""Run configuration: a flat ``section.key = value`` text format.

Lines starting with ``#`` and blank lines are ignored. Values are parsed
according to a fixed schema; unknown keys, malformed values and values
outside their admissible range raise :class:`ConfigError` carrying the
dotted field path. Lists are comma separated.

The fingerprint is a hash of the fully resolved configuration (defaults
included), so two files that resolve to the same settings share it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


@dataclass(frozen=True)
class Field:
    kind: str  # float | int | str | choice | floats | bool
    default: Any
    check: Callable[[Any], bool] | None = None
    why: str = ""
    choices: tuple = ()
    length: int | None = None


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0.0 <= v <= 1.0


SCHEMA: dict[str, Field] = {
    "metric.family": Field("choice", "euclidean",
                           choices=("euclidean", "conformal", "sphere", "polar", "tabulated")),
    "metric.phi_amplitude": Field("float", 0.0),
    "metric.phi_tilt": Field("floats", (0.0, 0.0), length=2),
    "metric.phi_offset": Field("float", 0.0),
    "metric.curvature": Field("float", 1.0),
    "metric.beta": Field("float", 0.1),
    "metric.margin": Field("float", 0.1, _pos, "must be > 0"),
    "metric.table": Field("str", ""),
    "lens.n_s": Field("int", 32, _pos, "must be >= 1"),
    "lens.n_mu": Field("int", 32, _pos, "must be >= 1"),
    "lens.mu_abs_min": Field("float", 0.0, _unit, "must lie in [0, 1]"),
    "lens.mu_abs_max": Field("float", 1.0, _unit, "must lie in [0, 1]"),
    "tensor.n": Field("int", 17, lambda v: v >= 5, "must be >= 5"),
    "tensor.half_width": Field("float", 1.05, lambda v: v > 1.0, "must exceed 1"),
    "tensor.interp": Field("choice", "cubic", choices=("linear", "cubic")),
    "tensor.input": Field("str", ""),
    "tensor.synthetic": Field("choice", "smooth", choices=("smooth", "potential", "solenoidal")),
    "audit.n_points": Field("int", 16, _pos, "must be >= 1"),
    "audit.n_dirs": Field("int", 8, _pos, "must be >= 1"),
    "audit.tau_ang": Field("float", 0.1, _pos, "must be > 0"),
    "integrator.h": Field("float", 1e-3, _pos, "step must be > 0"),
    "integrator.max_length": Field("float", 50.0, _pos, "must be > 0"),
    "integrator.seed": Field("int", 0x5EED, _nonneg, "must be >= 0"),
    "integrator.jitter": Field("float", 1e-7, _nonneg, "must be >= 0"),
    "solver.tol": Field("float", 1e-10, _pos, "must be > 0"),
    "solver.lam": Field("float", -1.0, None, "negative selects the automatic value"),
    "solver.maxiter": Field("int", 20000, _pos, "must be >= 1"),
    "aperture.mu_abs_min": Field("float", 0.0, _unit, "must lie in [0, 1]"),
    "aperture.mu_abs_max": Field("float", 1.0, _unit, "must lie in [0, 1]"),
    "aperture.transition": Field("float", 0.02, _pos, "must be > 0"),
    "experiment.eps": Field("float", 0.05, _nonneg, "must be >= 0"),
    "experiment.direction": Field("floats", (0.3, -0.1), length=2),
    "experiment.ladder": Field("floats", (0.08, 0.04, 0.02, 0.01),
                               lambda v: len(v) >= 4 and min(v) > 0,
                               "needs >= 4 positive amplitudes"),
    "experiment.jet_anchors": Field("int", 8, _pos, "must be >= 1"),
    "experiment.jet_ladder": Field("floats", (0.2, 0.1, 0.05, 0.025),
                                   lambda v: len(v) >= 2 and min(v) > 0,
                                   "needs >= 2 positive offsets"),
    "experiment.spectrum_degree": Field("int", 3, _pos, "must be >= 1"),
    "experiment.band_mu_abs_min": Field("float", 0.9, _unit, "must lie in [0, 1]"),
    "experiment.gauge_n_s": Field("int", 16, _pos, "must be >= 1"),
    "experiment.gauge_n_mu": Field("int", 16, _pos, "must be >= 1"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse(path: str, spec: Field, raw: str):
    raw = raw.strip()
    try:
        if spec.kind == "float":
            val = float(raw)
            if not np.isfinite(val):
                raise ValueError
        elif spec.kind == "int":
            val = int(raw, 0)
        elif spec.kind == "bool":
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError
            val = low in _TRUE
        elif spec.kind == "floats":
            val = tuple(float(p) for p in raw.split(",") if p.strip())
            if spec.length is not None and len(val) != spec.length:
                raise ConfigError(path, f"expected {spec.length} comma-separated numbers")
        elif spec.kind == "choice":
            if raw not in spec.choices:
                raise ConfigError(path, f"{raw!r} is not one of {', '.join(spec.choices)}")
            val = raw
        else:
            val = raw
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(path, f"cannot parse {raw!r} as {spec.kind}") from None
    if spec.check is not None and not spec.check(val):
        raise ConfigError(path, spec.why or "value out of range")
    return val


def _format(val) -> str:
    if isinstance(val, tuple):
        return ",".join(repr(float(v)) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


class RunConfig:
    """Resolved settings; read with ``cfg["section.key"]`` or ``cfg.section("lens")``."""

    def __init__(self, values: dict | None = None, source: str = "<defaults>"):
        self.source = source
        self._values = {k: f.default for k, f in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)
        self.validate()

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        spec = SCHEMA[key]
        if isinstance(value, str):
            value = _parse(key, spec, value)
        else:
            value = _parse(key, spec, _format(tuple(value) if isinstance(value, list) else value))
        self._values[key] = value

    def validate(self) -> None:
        for prefix in ("lens", "aperture"):
            lo, hi = self._values[f"{prefix}.mu_abs_min"], self._values[f"{prefix}.mu_abs_max"]
            if lo >= hi:
                raise ConfigError(f"{prefix}.mu_abs_max", "must exceed mu_abs_min")
        if self._values["metric.family"] == "tabulated" and not self._values["metric.table"]:
            raise ConfigError("metric.table", "required for the tabulated family")

    def __getitem__(self, key: str):
        return self._values[key]

    def section(self, name: str) -> dict:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self._values.items() if k.startswith(pre)}

    def canonical(self) -> str:
        return "".join(f"{k} = {_format(self._values[k])}\n" for k in sorted(self._values))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self._values.items())}

    # ---- builders ---------------------------------------------------------

    def chart(self):
        from .metric_chart import make_chart
        m = self.section("metric")
        return make_chart(m["family"], phi_amplitude=m["phi_amplitude"], phi_tilt=m["phi_tilt"],
                          phi_offset=m["phi_offset"], curvature=m["curvature"], beta=m["beta"],
                          margin=m["margin"], table=m["table"] or None)

    def lens_grid(self):
        from .lens_data import GridSpec
        s = self.section("lens")
        return GridSpec(n_s=s["n_s"], n_mu=s["n_mu"], mu_abs_min=s["mu_abs_min"],
                        mu_abs_max=s["mu_abs_max"])

    def tensor_grid(self):
        from .tensor_fields import TensorGrid
        t = self.section("tensor")
        return TensorGrid(t["n"], t["half_width"], interp=t["interp"])

    def aperture(self):
        from .ray_transform import Aperture
        a = self.section("aperture")
        return Aperture(mu_abs_min=a["mu_abs_min"], mu_abs_max=a["mu_abs_max"],
                        transition=a["transition"])


def parse_text(text: str, source: str = "<text>") -> dict:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", "expected 'section.key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        values[key] = raw
    return values


def load_config(path: str | None, overrides: list[str] | tuple = ()) -> RunConfig:
    """Read a config file (``None`` means defaults) and apply ``key=value`` overrides."""
    values: dict[str, str] = {}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read config ({exc.strerror})") from None
        values.update(parse_text(text, str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, raw = (p.strip() for p in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        values[key] = raw
    return RunConfig(values, source=str(path) if path else "<defaults>")
