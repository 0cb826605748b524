"""Scenario configuration: strict flat key-value files.

Format: one `key = value` per line, `#` comments, blank lines ignored.
Values are typed per key: scalars, `true`/`false`, bracketed vectors
`[1, 2.5, -3]`, matrices `[[...], [...]]`, and (for inline systems/metrics)
bracketed lists of expressions in the grammar of `exprs`. Unknown keys and
duplicate keys are rejected; `--set key=value` overrides file entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .control import ControllerConfig
from .errors import ConfigError
from .exprs import Expr, ExprMatrix
from .geometry import GeodesicSolver, MetricField
from .systems import (BUILTIN_METRICS, BUILTIN_SYSTEMS, Setpoint, SystemModel)
from .verify import VerificationGrid

_REQUIRED = object()


@dataclass(frozen=True)
class _Key:
    kind: str
    default: object = None  # None: optional; _REQUIRED: contextually required


# Declaration order is also the canonical dump order.
_SPEC = {
    "system": _Key("str", "builtin.underactuated3"),
    "system.n": _Key("int"),
    "system.m": _Key("int"),
    "system.p_m": _Key("int"),
    "system.p_em": _Key("int"),
    "system.f": _Key("srow"),
    "system.B": _Key("smat"),
    "system.phi": _Key("smat"),
    "system.varrho": _Key("smat"),
    "system.indicator": _Key("vec"),
    "metric": _Key("str", "builtin.underactuated3"),
    "metric.params": _Key("int"),
    "metric.W": _Key("smat"),
    "metric.w_lower": _Key("float"),
    "metric.w_upper": _Key("float"),
    "theta_true_m": _Key("vec"),
    "theta_true_em": _Key("vec"),
    "x0": _Key("vec"),
    "theta0_m": _Key("vec"),
    "theta0_em": _Key("vec"),
    "setpoint.x": _Key("vec"),
    "setpoint.u": _Key("vec"),
    "setpoint.xdot": _Key("vec"),
    "sim.T": _Key("float", 20.0),
    "sim.dt": _Key("float", 1e-3),
    "sim.control_period": _Key("float", 1e-2),
    "sim.log_period": _Key("float"),
    "sim.blowup_radius": _Key("float"),
    "controller.lambda": _Key("float", 0.1),
    "controller.gamma_m": _Key("vec"),
    "controller.gamma_em": _Key("vec"),
    "controller.kappa": _Key("float", 1.0),
    "controller.adapt_m": _Key("bool", True),
    "controller.adapt_em": _Key("bool", True),
    "controller.robust": _Key("bool", False),
    "controller.projection": _Key("bool", False),
    "controller.deadzone": _Key("bool", False),
    "controller.deadzone_radius": _Key("float", 0.0),
    "controller.deadzone_norm": _Key("str", "euclidean"),
    "controller.theta_min_m": _Key("vec"),
    "controller.theta_max_m": _Key("vec"),
    "controller.theta_min_em": _Key("vec"),
    "controller.theta_max_em": _Key("vec"),
    "solver.nodes": _Key("int", 9),
    "solver.quad_order": _Key("int", 17),
    "solver.tol": _Key("float", 1e-8),
    "solver.max_iter": _Key("int", 200),
    "solver.warm_start": _Key("bool", True),
    "verify.lambda": _Key("float"),
    "verify.eps_psd": _Key("float", 1e-8),
    "verify.eps_killing": _Key("float", 1e-8),
    "verify.eps_coupling": _Key("float", 1e-6),
    "verify.x_min": _Key("vec"),
    "verify.x_max": _Key("vec"),
    "verify.x_count": _Key("ivec"),
    "verify.theta_min": _Key("vec"),
    "verify.theta_max": _Key("vec"),
    "verify.theta_count": _Key("ivec"),
    "verify.theta_m_samples": _Key("mat"),
    "verify.rate_max": _Key("float", 5.0),
    "verify.rate_resolution": _Key("float", 1e-3),
    "output.prefix": _Key("str"),
}


def _split_top(text: str, key: str):
    """Split on commas at bracket depth zero."""
    parts, cur, depth = [], [], 0
    for ch in text:
        if ch in "[(":
            depth += 1
        elif ch in "])":
            depth -= 1
            if depth < 0:
                raise ConfigError(f"unbalanced brackets in value for '{key}'")
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if depth != 0:
        raise ConfigError(f"unbalanced brackets in value for '{key}'")
    parts.append("".join(cur))
    return parts


def _strip_brackets(text: str, key: str) -> str:
    t = text.strip()
    if not (t.startswith("[") and t.endswith("]")):
        raise ConfigError(f"value for '{key}' must be bracketed: {text!r}")
    return t[1:-1].strip()

def _parse_float(text: str, key: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"value for '{key}' is not a number: {text!r}") from None


def _parse_value(kind: str, text: str, key: str):
    text = text.strip()
    if kind == "str":
        return text
    if kind == "float":
        return _parse_float(text, key)
    if kind == "int":
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"value for '{key}' is not an integer: {text!r}") from None
    if kind == "bool":
        if text == "true":
            return True
        if text == "false":
            return False
        raise ConfigError(f"value for '{key}' must be true or false, got {text!r}")
    if kind == "vec":
        inner = _strip_brackets(text, key)
        if not inner:
            return []
        return [_parse_float(p, key) for p in _split_top(inner, key)]
    if kind == "ivec":
        inner = _strip_brackets(text, key)
        if not inner:
            return []
        out = []
        for p in _split_top(inner, key):
            v = _parse_float(p, key)
            if v != int(v):
                raise ConfigError(f"value for '{key}' must hold integers")
            out.append(int(v))
        return out
    if kind == "mat":
        inner = _strip_brackets(text, key)
        rows = [] if not inner else _split_top(inner, key)
        return [[_parse_float(p, key) for p in _split_top(_strip_brackets(r, key), key)]
                for r in rows]
    if kind == "srow":
        inner = _strip_brackets(text, key)
        if not inner:
            return []
        return [p.strip() for p in _split_top(inner, key)]
    if kind == "smat":
        inner = _strip_brackets(text, key)
        rows = [] if not inner else _split_top(inner, key)
        return [[p.strip() for p in _split_top(_strip_brackets(r, key), key)]
                for r in rows]
    raise AssertionError(kind)


def _render_value(kind: str, value) -> str:
    if kind == "str":
        return str(value)
    if kind == "float":
        return repr(float(value))
    if kind == "int":
        return str(int(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind == "vec":
        return "[" + ", ".join(repr(float(v)) for v in value) + "]"
    if kind == "ivec":
        return "[" + ", ".join(str(int(v)) for v in value) + "]"
    if kind == "mat":
        return "[" + ", ".join(
            "[" + ", ".join(repr(float(v)) for v in row) + "]" for row in value) + "]"
    if kind == "srow":
        return "[" + ", ".join(value) + "]"
    if kind == "smat":
        return "[" + ", ".join("[" + ", ".join(row) + "]" for row in value) + "]"
    raise AssertionError(kind)


def _parse_lines(text: str, source: str):
    """Raw key -> value-string pairs, strict syntax, duplicates rejected."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key not in _SPEC:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        raw[key] = value.strip()
    return raw


def _vec(values, key) -> np.ndarray:
    return np.asarray(values[key], dtype=float)


class ScenarioConfig:
    """Typed, fully materialized scenario description.

    `values` maps every effective key to its typed value; defaults and
    builtin-derived entries are materialized so that `effective_text()` is a
    complete, re-parseable record of the run.
    """

    def __init__(self, values: dict):
        self.values = values

    # -- construction --------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, overrides=(), source: str = "<config>") -> "ScenarioConfig":
        raw = _parse_lines(text, source)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, value = item.split("=", 1)
            key = key.strip()
            if key not in _SPEC:
                raise ConfigError(f"override names unknown key '{key}'")
            raw[key] = value.strip()
        values = {}
        for key, value in raw.items():
            values[key] = _parse_value(_SPEC[key].kind, value, key)
        cfg = cls(values)
        cfg._apply_defaults()
        cfg._validate()
        return cfg

    @classmethod
    def from_file(cls, path, overrides=()) -> "ScenarioConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config file {p}: {e.strerror or e}") from None
        return cls.from_text(text, overrides, source=str(p))

    def _apply_defaults(self):
        v = self.values
        for key, spec in _SPEC.items():
            if key not in v and spec.default is not None and spec.default is not _REQUIRED:
                v[key] = spec.default
        system = v["system"]
        metric = v["metric"]
        if system != "inline" and system not in BUILTIN_SYSTEMS:
            raise ConfigError(f"unknown system '{system}' "
                              f"(have: inline, {', '.join(sorted(BUILTIN_SYSTEMS))})")
        if metric != "inline" and metric not in BUILTIN_METRICS:
            raise ConfigError(f"unknown metric '{metric}' "
                              f"(have: inline, {', '.join(sorted(BUILTIN_METRICS))})")
        n, m, p_m, p_em = self._dims()
        if system != "inline":
            model = BUILTIN_SYSTEMS[system]()
            v.setdefault("theta_true_m", model.theta_true_m.tolist())
            v.setdefault("theta_true_em", model.theta_true_em.tolist())
        v.setdefault("theta_true_m", [0.0] * p_m)
        v.setdefault("theta_true_em", [0.0] * p_em)
        v.setdefault("theta0_m", [0.0] * p_m)
        v.setdefault("theta0_em", [0.0] * p_em)
        v.setdefault("setpoint.x", [0.0] * n)
        v.setdefault("setpoint.u", [0.0] * m)
        v.setdefault("setpoint.xdot", [0.0] * n)
        v.setdefault("controller.gamma_m", [1.0] * p_m)
        v.setdefault("controller.gamma_em", [1.0] * p_em)
        v.setdefault("sim.log_period", v["sim.control_period"])
        v.setdefault("verify.lambda", v["controller.lambda"])
        if metric in BUILTIN_METRICS and "verify.x_min" not in v:
            # benchmark default box: x1 in [-3, 3] (61), other states pinned,
            # parameters in [-2, 2] (41 each)
            v["verify.x_min"] = [-3.0] + [0.0] * (n - 1)
            v["verify.x_max"] = [3.0] + [0.0] * (n - 1)
            v["verify.x_count"] = [61] + [1] * (n - 1)
            p = max(p_em, BUILTIN_METRICS[metric]().param_dim)
            v.setdefault("verify.theta_min", [-2.0] * p)
            v.setdefault("verify.theta_max", [2.0] * p)
            v.setdefault("verify.theta_count", [41] * p)
        if "verify.theta_m_samples" not in v:
            if p_m:
                v["verify.theta_m_samples"] = [
                    [float(t) for t in v["theta_true_m"]],
                    [2.0] * p_m,
                    [0.0] * p_m,
                ]
            else:
                v["verify.theta_m_samples"] = []

    def _dims(self):
        v = self.values
        if v["system"] == "inline":
            for key in ("system.n", "system.m", "system.p_m", "system.p_em"):
                if key not in v:
                    raise ConfigError(f"inline system requires '{key}'")
            return v["system.n"], v["system.m"], v["system.p_m"], v["system.p_em"]
        model = BUILTIN_SYSTEMS[v["system"]]()
        return model.n, model.m, model.p_m, model.p_em

    def _require_len(self, key: str, length: int):
        if len(self.values[key]) != length:
            raise ConfigError(f"'{key}' must have {length} entries, "
                              f"got {len(self.values[key])}")

    def _validate(self):
        v = self.values
        n, m, p_m, p_em = self._dims()
        for key, length in (("theta_true_m", p_m), ("theta_true_em", p_em),
                            ("theta0_m", p_m), ("theta0_em", p_em),
                            ("setpoint.x", n), ("setpoint.u", m),
                            ("setpoint.xdot", n),
                            ("controller.gamma_m", p_m),
                            ("controller.gamma_em", p_em)):
            self._require_len(key, length)
        if "x0" in v:
            self._require_len("x0", n)
        for key, length in (("controller.theta_min_m", p_m),
                            ("controller.theta_max_m", p_m),
                            ("controller.theta_min_em", p_em),
                            ("controller.theta_max_em", p_em)):
            if key in v:
                self._require_len(key, length)
        for pair in (("controller.theta_min_m", "controller.theta_max_m"),
                     ("controller.theta_min_em", "controller.theta_max_em")):
            if (pair[0] in v) != (pair[1] in v):
                raise ConfigError(f"'{pair[0]}' and '{pair[1]}' must be given together")
        if v["sim.dt"] > v["sim.control_period"]:
            raise ConfigError("'sim.dt' must not exceed 'sim.control_period'")
        if v["controller.lambda"] <= 0:
            raise ConfigError("'controller.lambda' must be positive")
        if v["solver.nodes"] < 3:
            raise ConfigError("'solver.nodes' must be at least 3")
        if v["solver.quad_order"] < 2:
            raise ConfigError("'solver.quad_order' must be at least 2")

    # -- builders -------------------------------------------------------------

    def build_model(self) -> SystemModel:
        v = self.values
        if v["system"] != "inline":
            return BUILTIN_SYSTEMS[v["system"]]()
        n, m, p_m, p_em = self._dims()
        for key in ("system.f", "system.B"):
            if key not in v:
                raise ConfigError(f"inline system requires '{key}'")
        f = ExprMatrix([[e] for e in v["system.f"]], n, 0)
        if f.shape != (n, 1):
            raise ConfigError(f"'system.f' must list {n} expressions")
        B = ExprMatrix(v["system.B"], n, 0)
        if B.shape != (n, m):
            raise ConfigError(f"'system.B' must be {n} x {m}")
        if p_m:
            if "system.phi" not in v:
                raise ConfigError("inline system with matched parameters requires 'system.phi'")
            phi = ExprMatrix(v["system.phi"], n, 0)
            if phi.shape != (p_m, m):
                raise ConfigError(f"'system.phi' must be {p_m} x {m}")
        else:
            phi = None
        if p_em:
            if "system.varrho" not in v:
                raise ConfigError("inline system with extended parameters requires 'system.varrho'")
            varrho = ExprMatrix(v["system.varrho"], n, 0)
            if varrho.shape != (p_em, n):
                raise ConfigError(f"'system.varrho' must be {p_em} x {n}")
        else:
            varrho = None
        indicator = np.asarray(v.get("system.indicator", [1.0] + [0.0] * (m - 1)), float)
        if indicator.size != m:
            raise ConfigError(f"'system.indicator' must have {m} entries")

        def varrho_fn(x):
            return varrho(x) if varrho is not None else np.zeros((0, n))

        def varrho_dx1(x, h=1e-6):
            if varrho is None:
                return np.zeros(0)
            xp = np.array(x, dtype=float)
            xm = np.array(x, dtype=float)
            xp[0] += h
            xm[0] -= h
            return (varrho_fn(xp)[:, 0] - varrho_fn(xm)[:, 0]) / (2 * h)

        return SystemModel(
            n=n, m=m, p_m=p_m, p_em=p_em,
            f=lambda x: f(x)[:, 0],
            B=lambda x: B(x),
            phi=(lambda x: phi(x)) if phi is not None else (lambda x: np.zeros((0, m))),
            varrho=varrho_fn,
            varrho_dx1=varrho_dx1,
            indicator=indicator,
            theta_true_m=_vec(v, "theta_true_m"),
            theta_true_em=_vec(v, "theta_true_em"),
            name="inline",
        )

    def build_metric(self) -> MetricField:
        v = self.values
        if v["metric"] != "inline":
            metric = BUILTIN_METRICS[v["metric"]]()
            if "metric.w_lower" in v and "metric.w_upper" in v:
                metric.bounds = (v["metric.w_lower"], v["metric.w_upper"])
            return metric
        if "metric.W" not in v:
            raise ConfigError("inline metric requires 'metric.W'")
        n, _, _, _ = self._dims()
        p = v.get("metric.params", 0)
        W = ExprMatrix(v["metric.W"], n, p)
        if W.shape != (n, n):
            raise ConfigError(f"'metric.W' must be {n} x {n}")

        def eval_dual(x, th):
            A = W(x, th)
            return 0.5 * (A + A.T)

        def eval_dual_dx(x, th):
            out = np.empty((n, n, n))
            for i in range(n):
                h = 1e-6 * max(1.0, abs(float(x[i])))
                xp = np.array(x, float)
                xm = np.array(x, float)
                xp[i] += h
                xm[i] -= h
                out[i] = (eval_dual(xp, th) - eval_dual(xm, th)) / (2 * h)
            return out

        def eval_dual_dtheta(x, th):
            out = np.empty((p, n, n))
            for j in range(p):
                h = 1e-6 * max(1.0, abs(float(th[j])))
                tp = np.array(th, float)
                tm = np.array(th, float)
                tp[j] += h
                tm[j] -= h
                out[j] = (eval_dual(x, tp) - eval_dual(x, tm)) / (2 * h)
            return out

        bounds = None
        if "metric.w_lower" in v and "metric.w_upper" in v:
            bounds = (v["metric.w_lower"], v["metric.w_upper"])
        return MetricField(dim=n, param_dim=p, eval_dual=eval_dual,
                           eval_dual_dx=eval_dual_dx,
                           eval_dual_dtheta=eval_dual_dtheta,
                           bounds=bounds, name="inline")

    def build_controller(self) -> ControllerConfig:
        v = self.values
        bounds_m = bounds_em = None
        if "controller.theta_min_m" in v:
            bounds_m = np.column_stack([_vec(v, "controller.theta_min_m"),
                                        _vec(v, "controller.theta_max_m")])
        if "controller.theta_min_em" in v:
            bounds_em = np.column_stack([_vec(v, "controller.theta_min_em"),
                                         _vec(v, "controller.theta_max_em")])
        try:
            return ControllerConfig(
                lam=v["controller.lambda"],
                gamma_m=_vec(v, "controller.gamma_m"),
                gamma_em=_vec(v, "controller.gamma_em"),
                kappa=v["controller.kappa"],
                deadzone_radius=v["controller.deadzone_radius"],
                theta_bounds_m=bounds_m,
                theta_bounds_em=bounds_em,
                adapt_m=v["controller.adapt_m"],
                adapt_em=v["controller.adapt_em"],
                robust=v["controller.robust"],
                deadzone=v["controller.deadzone"],
                projection=v["controller.projection"],
                deadzone_norm=v["controller.deadzone_norm"],
            )
        except ValueError as e:
            raise ConfigError(f"controller configuration invalid: {e}") from None

    def build_setpoint(self) -> Setpoint:
        v = self.values
        return Setpoint(x_d=_vec(v, "setpoint.x"), u_d=_vec(v, "setpoint.u"),
                        xdot_d=_vec(v, "setpoint.xdot"))

    def build_solver(self, metric: MetricField) -> GeodesicSolver:
        v = self.values
        return GeodesicSolver(metric, num_nodes=v["solver.nodes"],
                              quad_order=v["solver.quad_order"],
                              tol=v["solver.tol"], max_iter=v["solver.max_iter"],
                              warm_start=v["solver.warm_start"])

    def build_grid(self) -> VerificationGrid:
        v = self.values
        needed = ("verify.x_min", "verify.x_max", "verify.x_count",
                  "verify.theta_min", "verify.theta_max", "verify.theta_count")
        missing = [k for k in needed if k not in v]
        if missing:
            raise ConfigError(f"verification grid keys missing: {', '.join(missing)}")
        n, _, _, _ = self._dims()
        self._require_len("verify.x_min", n)
        self._require_len("verify.x_max", n)
        self._require_len("verify.x_count", n)
        x_ranges = list(zip(v["verify.x_min"], v["verify.x_max"], v["verify.x_count"]))
        theta_ranges = list(zip(v["verify.theta_min"], v["verify.theta_max"],
                                v["verify.theta_count"]))
        try:
            return VerificationGrid(x_ranges=x_ranges, theta_ranges=theta_ranges,
                                    eps_psd=v["verify.eps_psd"])
        except ValueError as e:
            raise ConfigError(f"verification grid invalid: {e}") from None

    def sim_kwargs(self) -> dict:
        v = self.values
        if "x0" not in v:
            raise ConfigError("simulation requires 'x0'")
        kw = dict(
            x0=_vec(v, "x0"),
            theta0_m=_vec(v, "theta0_m"),
            theta0_em=_vec(v, "theta0_em"),
            T=v["sim.T"],
            dt=v["sim.dt"],
            control_period=v["sim.control_period"],
            log_period=v["sim.log_period"],
            theta_true_m=_vec(v, "theta_true_m"),
            theta_true_em=_vec(v, "theta_true_em"),
        )
        if "sim.blowup_radius" in v:
            kw["blowup_radius"] = v["sim.blowup_radius"]
        return kw

    # -- emission -------------------------------------------------------------

    def effective_text(self) -> str:
        lines = []
        for key, spec in _SPEC.items():
            if key in self.values:
                lines.append(f"{key} = {_render_value(spec.kind, self.values[key])}")
        return "\n".join(lines) + "\n"
