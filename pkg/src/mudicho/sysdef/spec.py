"""The JSON system format: loading, validation, saving and derivative estimates.

A system file looks like::

    {
      "kind": "discrete",
      "dim": 2,
      "index_start": 1,
      "growth_rate": {"builtin": "polynomial"},
      "linear": [["n/(n+1)", "0"], ["0", "(n+1)/n"]],
      "nonlinear": ["c/(n+1)*x1^2*exp(-x1^2)", "c/(n+1)*x2^2*exp(-x2^2)"],
      "constants": {"c": 0.01, "K": 1, "a": 1},
      "projection": [["1", "0"], ["0", "0"]],
      "metadata": {"name": "..."}
    }

Internally the time index starts at 0; expressions are evaluated at the
label ``index_start + i``.  Names listed under ``constants`` may be used in
expressions and are substituted when the file is loaded.
"""

from __future__ import annotations

import copy
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, SchemaError, ValidationFailure
from ..growth import GrowthRate, rate_from_dict, verify_ratio_bound
from .expr import Const, Expr, ParseError, compile_programs, parse_expr, to_source

VALIDATION_WINDOW = 64
DEFAULT_COND_CAP = 1e12
CONSTANT_NAMES = ("c", "eta", "L", "M", "K", "a")
_FD_STEP = 1e-5


class NoDichotomyWarning(UserWarning):
    """The linear part is isometric, so no dichotomy can exist."""


@dataclass(frozen=True, eq=False)
class SystemSpec:
    kind: str
    dim: int
    index_start: float
    rate: GrowthRate
    linear: tuple
    nonlinear: tuple | None
    constants: dict
    projection: tuple | None = None
    metadata: dict = field(default_factory=dict)
    linearizable: bool = True
    document: dict = field(default_factory=dict)
    notes: tuple = ()

    # --- derived data --------------------------------------------------------

    @property
    def time_name(self):
        return "n" if self.kind == "discrete" else "t"

    @property
    def sha256(self):
        blob = json.dumps(self.document, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def has_nonlinearity(self):
        return self.nonlinear is not None

    def label(self, i):
        return self.index_start + np.asarray(i, dtype=float)

    def linear_program(self):
        return _cached(self, "_linear_program",
                       lambda: compile_programs([e for row in self.linear for e in row], self.time_name, self.dim))

    def nonlinear_program(self):
        if self.nonlinear is None:
            return None
        return _cached(self, "_nonlinear_program",
                       lambda: compile_programs(list(self.nonlinear), self.time_name, self.dim))

    def linear_at(self, times):
        """A evaluated at the given time labels, shape (len(times), d, d)."""
        from .. import kernels

        times = np.atleast_1d(np.asarray(times, dtype=float))
        slots = np.zeros((times.size, self.dim + 1))
        slots[:, 0] = times
        vals = kernels.eval_programs(self.linear_program(), slots)
        return vals.reshape(times.size, self.dim, self.dim)

    def linear_matrices(self, indices):
        """A_i for internal indices i (discrete systems)."""
        return self.linear_at(self.label(indices))

    def nonlinear_at(self, time, X):
        """The perturbation at one time label for a batch of states, shape (P, d)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.nonlinear is None:
            return np.zeros_like(X)
        from .. import kernels

        slots = np.empty((X.shape[0], self.dim + 1))
        slots[:, 0] = time
        slots[:, 1:] = X
        return kernels.eval_programs(self.nonlinear_program(), slots)

    def projection_matrices(self, indices):
        if self.projection is None:
            return None
        times = self.label(np.atleast_1d(indices))
        env = {self.time_name: times}
        out = np.empty((times.size, self.dim, self.dim))
        for r, row in enumerate(self.projection):
            for c, e in enumerate(row):
                out[:, r, c] = e.evaluate(env)
        return out

    def with_constants(self, **overrides):
        """Reload with some constants replaced (e.g. a different c)."""
        doc = copy.deepcopy(self.document)
        doc.setdefault("constants", {}).update({k: float(v) for k, v in overrides.items()})
        return spec_from_dict(doc)

    def to_dict(self):
        return copy.deepcopy(self.document)


def _cached(spec, attr, build):
    value = spec.__dict__.get(attr)
    if value is None:
        value = build()
        object.__setattr__(spec, attr, value)
    return value


# --- loading -----------------------------------------------------------------


def _require(doc, key, kind=None):
    if key not in doc:
        raise SchemaError(f"missing field {key!r}", condition=f"schema.{key}")
    value = doc[key]
    if kind is not None and not isinstance(value, kind):
        raise SchemaError(f"field {key!r} has the wrong type", condition=f"schema.{key}")
    return value


def _parse_field(source, where, variables, constants):
    if isinstance(source, (int, float)) and not isinstance(source, bool):
        return Const(float(source))
    if not isinstance(source, str):
        raise SchemaError(f"{where} must be an expression string", condition=f"schema.{where}")
    try:
        return parse_expr(source, variables=variables, constants=constants)
    except ParseError as exc:
        raise SchemaError(f"{where}: {exc}", condition=f"schema.{where}", witness=exc.witness) from exc


def _parse_matrix(rows, name, dim, variables, constants):
    if not isinstance(rows, list) or len(rows) != dim or any(not isinstance(r, list) or len(r) != dim for r in rows):
        raise SchemaError(f"{name!r} must be a {dim}x{dim} array of expressions", condition=f"schema.{name}")
    return tuple(
        tuple(_parse_field(src, f"{name}[{r}][{c}]", variables, constants) for c, src in enumerate(row))
        for r, row in enumerate(rows)
    )


def spec_from_dict(doc: dict, *, validate: bool = True, window: int = VALIDATION_WINDOW,
                   cond_cap: float = DEFAULT_COND_CAP) -> SystemSpec:
    if not isinstance(doc, dict):
        raise SchemaError("system file must hold a JSON object", condition="schema")
    kind = _require(doc, "kind", str)
    if kind not in ("discrete", "continuous"):
        raise SchemaError(f"kind must be 'discrete' or 'continuous', got {kind!r}", condition="schema.kind")
    dim = _require(doc, "dim", int)
    if isinstance(dim, bool) or dim < 1:
        raise SchemaError("dim must be a positive integer", condition="schema.dim")
    default_start = 0 if kind == "discrete" else 1
    index_start = doc.get("index_start", default_start)
    if not isinstance(index_start, (int, float)) or isinstance(index_start, bool):
        raise SchemaError("index_start must be a number", condition="schema.index_start")
    constants = doc.get("constants", {})
    if not isinstance(constants, dict) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in constants.values()
    ):
        raise SchemaError("constants must map names to numbers", condition="schema.constants")
    time_name = "n" if kind == "discrete" else "t"
    states = [f"x{i + 1}" for i in range(dim)]
    rate_kind = "discrete" if kind == "discrete" else "differentiable"
    try:
        rate = rate_from_dict(_require(doc, "growth_rate", dict), rate_kind, constants)
    except (ParseError, ConfigurationError) as exc:
        raise SchemaError(f"growth_rate: {exc}", condition="schema.growth_rate") from exc
    linear = _parse_matrix(_require(doc, "linear"), "linear", dim, (time_name,), constants)
    nonlinear = None
    if doc.get("nonlinear") is not None:
        src = doc["nonlinear"]
        if not isinstance(src, list) or len(src) != dim:
            raise SchemaError(f"'nonlinear' must list {dim} expressions", condition="schema.nonlinear")
        parsed = tuple(
            _parse_field(s, f"nonlinear[{i}]", (time_name, *states), constants) for i, s in enumerate(src)
        )
        if not all(isinstance(e, Const) and e.value == 0.0 for e in parsed):
            nonlinear = parsed
    projection = None
    if doc.get("projection") is not None:
        projection = _parse_matrix(doc["projection"], "projection", dim, (time_name,), constants)
    metadata = doc.get("metadata", {})
    if not isinstance(metadata, dict):
        raise SchemaError("metadata must be an object", condition="schema.metadata")
    spec = SystemSpec(
        kind=kind,
        dim=dim,
        index_start=float(index_start),
        rate=rate,
        linear=linear,
        nonlinear=nonlinear,
        constants={k: float(v) for k, v in constants.items()},
        projection=projection,
        metadata=dict(metadata),
        linearizable=bool(doc.get("linearizable", True)),
        document=copy.deepcopy(doc),
    )
    if validate:
        notes = validate_spec(spec, window=window, cond_cap=cond_cap)
        object.__setattr__(spec, "notes", tuple(notes))
    return spec


def bundled_names():
    folder = resources.files("mudicho") / "data"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def resolve_path(path_or_name):
    """A filesystem path, or the name of a bundled system (``example42``)."""
    path = Path(path_or_name)
    if path.exists():
        return path
    name = path.name[:-5] if path.name.endswith(".json") else path.name
    candidate = resources.files("mudicho") / "data" / f"{name}.json"
    if candidate.is_file():
        return Path(str(candidate))
    raise FileNotFoundError(f"no system file at {path_or_name!s} and no bundled system named {name!r}")


def load_spec(path, **kwargs) -> SystemSpec:
    path = resolve_path(path)
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})", condition="schema.json") from exc
    return spec_from_dict(doc, **kwargs)


def save_spec(spec: SystemSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def expr_to_json(e: Expr) -> str:
    return to_source(e)


# --- validation ----------------------------------------------------------------


def _jacobian_at(spec, time, X):
    """Central-difference Jacobians of the perturbation, shape (P, d, d)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    P, d = X.shape
    h = _FD_STEP * np.maximum(1.0, np.linalg.norm(X, axis=1))
    stacked = np.empty((2 * d, P, d))
    for j in range(d):
        stacked[2 * j] = X
        stacked[2 * j, :, j] += h
        stacked[2 * j + 1] = X
        stacked[2 * j + 1, :, j] -= h
    vals = spec.nonlinear_at(time, stacked.reshape(-1, d)).reshape(2 * d, P, d)
    jac = np.empty((P, d, d))
    for j in range(d):
        jac[:, :, j] = (vals[2 * j] - vals[2 * j + 1]) / (2.0 * h[:, None])
    return jac


def validate_spec(spec: SystemSpec, window: int = VALIDATION_WINDOW, cond_cap: float = DEFAULT_COND_CAP):
    """Run the load-time checks; returns informational notes, raises on violations."""
    notes = []
    check = verify_ratio_bound(spec.rate, 10_000)
    if not check.ok:
        raise ValidationFailure(
            f"growth rate ratio {check.theta_hat:.6g} at {check.argmax} exceeds declared theta {spec.rate.theta:.6g}",
            condition="ratio bound mu_{n+1}/mu_n <= theta",
            witness={"n": check.argmax, "ratio": check.theta_hat},
        )
    if spec.kind == "discrete":
        idx = np.arange(window + 1)
        times = spec.label(idx)
        mats = spec.linear_matrices(idx)
    else:
        times = spec.index_start + np.linspace(0.0, window, 8 * window + 1)
        mats = spec.linear_at(times)
    bad = ~np.all(np.isfinite(mats), axis=(1, 2))
    if bad.any():
        i = int(np.argmax(bad))
        raise ValidationFailure(f"linear part is not finite at {spec.time_name} = {times[i]:g}",
                                condition="finite linear part", witness={"index": float(times[i])})
    if spec.kind == "discrete":
        conds = np.linalg.cond(mats)
        bad = ~(conds < cond_cap)
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationFailure(
                f"A_{i} is not numerically invertible (condition number {conds[i]:.3g} > {cond_cap:.3g})",
                condition="invertible linear part", witness={"index": i, "cond": float(conds[i])},
            )
        sv = np.linalg.svd(mats, compute_uv=False)
        isometric = np.allclose(sv, 1.0, atol=1e-12)
    else:
        isometric = np.allclose(mats + np.swapaxes(mats, 1, 2), 0.0, atol=1e-12)
    if isometric:
        msg = "linear part is isometric on the validation window: no dichotomy expected"
        notes.append(msg)
        warnings.warn(msg, NoDichotomyWarning, stacklevel=3)
    if spec.linearizable and spec.nonlinear is not None:
        zero = np.zeros((1, spec.dim))
        sample_times = times if spec.kind == "discrete" else spec.index_start + np.arange(window + 1)
        for i, t in enumerate(sample_times):
            g0 = spec.nonlinear_at(t, zero)[0]
            if np.linalg.norm(g0) > 1e-12:
                raise ValidationFailure(
                    f"perturbation does not vanish at x = 0 ({spec.time_name} = {t:g}, |g(0)| = {np.linalg.norm(g0):.3g})",
                    condition="g_n(0) = 0 and Dg_n(0) = 0", witness={"index": i},
                )
            dg0 = np.linalg.norm(_jacobian_at(spec, t, zero)[0], 2)
            if dg0 > 1e-6:
                raise ValidationFailure(
                    f"perturbation derivative does not vanish at x = 0 ({spec.time_name} = {t:g}, |Dg(0)| = {dg0:.3g})",
                    condition="g_n(0) = 0 and Dg_n(0) = 0", witness={"index": i},
                )
    return notes


# --- Lipschitz data ----------------------------------------------------------------


@dataclass(frozen=True)
class LipschitzEstimate:
    c_hat: float
    c_witness: dict
    M_hat: float
    M_witness: dict
    contraction_value: float | None
    contraction_ok: bool | None


def _box_grid(dim, radius, points_per_axis):
    axis = np.linspace(-radius, radius, points_per_axis)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def estimate_lipschitz(spec: SystemSpec, window: int = VALIDATION_WINDOW, radius: float = 1.0,
                       points_per_axis: int = 21, seed: int = 0, n_pairs: int = 2000) -> LipschitzEstimate:
    """Sampled c and M in ‖Dg_n‖ ≤ c μ'_n/μ_n and ‖Dg_n(x)−Dg_n(y)‖ ≤ M (μ'_n/μ_n)‖x−y‖,
    with μ'_n = μ_{n+1} − μ_n."""
    if spec.kind != "discrete":
        raise ConfigurationError("estimate_lipschitz needs a discrete system")
    grid = _box_grid(spec.dim, radius, points_per_axis)
    rng = np.random.default_rng(seed)
    idx = np.arange(window)
    logs = spec.rate.log(np.arange(window + 1, dtype=float))
    # μ_n/μ'_n = 1/(exp(ln μ_{n+1} − ln μ_n) − 1)
    weight = 1.0 / np.expm1(np.diff(logs))
    c_hat, c_wit = 0.0, {"n": 0, "x": [0.0] * spec.dim}
    m_hat, m_wit = 0.0, {"n": 0, "x": [0.0] * spec.dim, "y": [0.0] * spec.dim}
    if spec.nonlinear is not None:
        pa = rng.integers(0, len(grid), n_pairs)
        pb = rng.integers(0, len(grid), n_pairs)
        keep = pa != pb
        pa, pb = pa[keep], pb[keep]
        with np.errstate(all="ignore"):
            for i in idx:
                t = float(spec.label(i))
                jac = _jacobian_at(spec, t, grid)
                norms = np.linalg.norm(jac, ord=2, axis=(1, 2)) * weight[i]
                if not np.all(np.isfinite(norms)):
                    k = int(np.argmax(~np.isfinite(norms)))
                    raise ValidationFailure(
                        "perturbation derivative overflows", condition="finite derivative",
                        witness={"n": int(i), "x": grid[k].tolist()},
                    )
                k = int(np.argmax(norms))
                if norms[k] > c_hat:
                    c_hat, c_wit = float(norms[k]), {"n": int(i), "x": grid[k].tolist()}
                diff = np.linalg.norm(jac[pa] - jac[pb], ord=2, axis=(1, 2))
                dist = np.linalg.norm(grid[pa] - grid[pb], axis=1)
                ratio = diff / dist * weight[i]
                k = int(np.argmax(ratio))
                if ratio[k] > m_hat:
                    m_hat = float(ratio[k])
                    m_wit = {"n": int(i), "x": grid[pa[k]].tolist(), "y": grid[pb[k]].tolist()}
    K = spec.constants.get("K")
    a = spec.constants.get("a")
    c = spec.constants.get("c", c_hat)
    value = ok = None
    if K is not None and a is not None:
        value = float(c * K * spec.rate.theta ** (a + 1.0))
        ok = value < 1.0
    return LipschitzEstimate(c_hat, c_wit, m_hat, m_wit, value, ok)
