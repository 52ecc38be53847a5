"""Exact enumeration over a discrete confounded-recognition SCM.

The graph is fixed: ``S -> X``, ``S -> Y``, ``X -> M``, ``X -> Y``, ``M -> Y``.
Every quantity is computed by enumerating the full joint, so results are exact
up to float64 rounding and can serve as ground truth for adjustment formulas.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

ROW_TOL = 1e-12
MAX_DOMAIN = 8


class SCMValidationError(ValueError):
    """A probability table is malformed."""

    def __init__(self, table: str, message: str):
        super().__init__(f"{table}: {message}")
        self.table = table


class UndefinedConditionalError(ValueError):
    """A conditional was requested on a zero-probability event."""


class PositivityError(UndefinedConditionalError):
    """Some split has no mass at the requested treatment value."""

    def __init__(self, split: int, x: int):
        super().__init__(f"positivity violated: split {split} has P(X={x}, t={split}) = 0")
        self.split = split
        self.x = x


def _check_table(name: str, table: np.ndarray, shape: tuple[int, ...]) -> None:
    if table.shape != shape:
        raise SCMValidationError(name, f"expected shape {shape}, got {table.shape}")
    if not np.all(np.isfinite(table)):
        raise SCMValidationError(name, "non-finite entries")
    if np.any(table < 0.0) or np.any(table > 1.0):
        raise SCMValidationError(name, "entries outside [0, 1]")
    rows = table.sum(axis=-1)
    if np.max(np.abs(rows - 1.0)) > ROW_TOL:
        raise SCMValidationError(name, f"rows do not sum to 1 (max deviation {np.max(np.abs(rows - 1.0)):.3e})")


@dataclass(frozen=True)
class DiscreteSCM:
    """Conditional probability tables of the recognition SCM.

    ``p_y_xsm`` is indexed ``[x, s, m, y]``; the other tables are indexed by
    their conditioning variables first and the child last.
    """

    p_s: np.ndarray
    p_x_s: np.ndarray
    p_m_x: np.ndarray
    p_y_xsm: np.ndarray

    def __post_init__(self):
        for name in ("p_s", "p_x_s", "p_m_x", "p_y_xsm"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.p_s.ndim != 1:
            raise SCMValidationError("p_s", f"expected a vector, got {self.p_s.ndim} dims")
        if self.p_x_s.ndim != 2 or self.p_m_x.ndim != 2 or self.p_y_xsm.ndim != 4:
            bad = next(
                n for n, d in (("p_x_s", 2), ("p_m_x", 2), ("p_y_xsm", 4)) if getattr(self, n).ndim != d
            )
            raise SCMValidationError(bad, f"wrong number of dimensions ({getattr(self, bad).ndim})")
        n_s, n_x = self.p_x_s.shape
        n_m = self.p_m_x.shape[1]
        n_y = self.p_y_xsm.shape[3]
        for var, size in zip("SXMY", (n_s, n_x, n_m, n_y)):
            if not 1 <= size <= MAX_DOMAIN:
                raise SCMValidationError(f"domain {var}", f"size {size} outside [1, {MAX_DOMAIN}]")
        _check_table("p_s", self.p_s, (n_s,))
        _check_table("p_x_s", self.p_x_s, (n_s, n_x))
        _check_table("p_m_x", self.p_m_x, (n_x, n_m))
        _check_table("p_y_xsm", self.p_y_xsm, (n_x, n_s, n_m, n_y))

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        """Domain sizes ``(|S|, |X|, |M|, |Y|)``."""
        return (self.p_x_s.shape[0], self.p_x_s.shape[1], self.p_m_x.shape[1], self.p_y_xsm.shape[3])


@dataclass(frozen=True)
class SplitFamily:
    """Hard assignment of every ``(s, m)`` stratum to one of ``m`` splits."""

    assignment: np.ndarray
    num_splits: int = field(default=0)

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.int64)
        if a.ndim != 2:
            raise ValueError("assignment must be indexed [s, m]")
        m = self.num_splits or int(a.max()) + 1
        if m < 1:
            raise ValueError("a split family needs at least one split")
        if a.min() < 0 or a.max() >= m:
            raise ValueError(f"split indices must lie in [0, {m})")
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "num_splits", m)

    @classmethod
    def per_confounder(cls, scm: DiscreteSCM) -> "SplitFamily":
        """One split per value of S; carries no mediator information."""
        n_s, _, n_m, _ = scm.sizes
        return cls(np.repeat(np.arange(n_s)[:, None], n_m, axis=1), n_s)

    @classmethod
    def single(cls, scm: DiscreteSCM) -> "SplitFamily":
        n_s, _, n_m, _ = scm.sizes
        return cls(np.zeros((n_s, n_m), dtype=np.int64), 1)

    @classmethod
    def finest(cls, scm: DiscreteSCM) -> "SplitFamily":
        """One split per ``(s, m)`` pair, i.e. the surrogate ``E = (S, M)``."""
        n_s, _, n_m, _ = scm.sizes
        return cls(np.arange(n_s * n_m).reshape(n_s, n_m), n_s * n_m)

    @classmethod
    def from_function(cls, scm: DiscreteSCM, fn: Callable[[int, int], int]) -> "SplitFamily":
        """Splits are the strata of a surrogate ``E = fn(s, m)``."""
        n_s, _, n_m, _ = scm.sizes
        return cls(np.array([[fn(s, m) for m in range(n_m)] for s in range(n_s)]))

    @classmethod
    def from_confounder_groups(cls, scm: DiscreteSCM, groups: Sequence[int]) -> "SplitFamily":
        """Merge S-values into coarser splits; ``groups[s]`` is the split of s."""
        n_s, _, n_m, _ = scm.sizes
        if len(groups) != n_s:
            raise ValueError(f"expected {n_s} group labels, got {len(groups)}")
        return cls(np.repeat(np.asarray(groups)[:, None], n_m, axis=1))

    def depends_on_mediator(self) -> bool:
        return bool(np.any(self.assignment != self.assignment[:, :1]))


def _check_x(scm: DiscreteSCM, x: int) -> int:
    n_x = scm.sizes[1]
    if not 0 <= int(x) < n_x:
        raise ValueError(f"x={x} outside domain [0, {n_x})")
    return int(x)


def enumerate_joint(scm: DiscreteSCM) -> np.ndarray:
    """Joint ``P(s, x, m, y)`` indexed ``[s, x, m, y]``."""
    joint = (
        scm.p_s[:, None, None, None]
        * scm.p_x_s[:, :, None, None]
        * scm.p_m_x[None, :, :, None]
        * np.transpose(scm.p_y_xsm, (1, 0, 2, 3))
    )
    return joint


def observational_conditional(scm: DiscreteSCM, x: int) -> np.ndarray:
    """``P(Y | X = x)`` read off the joint."""
    x = _check_x(scm, x)
    slab = enumerate_joint(scm)[:, x].sum(axis=(0, 1))
    total = slab.sum()
    if total <= 0.0:
        raise UndefinedConditionalError(f"P(X={x}) = 0")
    return slab / total


def split_mass(scm: DiscreteSCM, family: SplitFamily) -> np.ndarray:
    """Marginal probability of each split under the observational joint."""
    p_sm = enumerate_joint(scm).sum(axis=(1, 3))
    return np.bincount(family.assignment.ravel(), weights=p_sm.ravel(), minlength=family.num_splits)


def backdoor_adjust(
    scm: DiscreteSCM, x: int, family: SplitFamily, split_prior: str = "mass"
) -> np.ndarray:
    """Stratified adjustment ``sum_t P(Y | X=x, t) P(t)``.

    ``split_prior="mass"`` weights each split by its observational probability;
    ``"uniform"`` uses ``P(t) = 1/m``. The two agree whenever splits are
    equiprobable.
    """
    x = _check_x(scm, x)
    joint = enumerate_joint(scm)
    n_y = scm.sizes[3]
    if split_prior == "mass":
        prior = split_mass(scm, family)
    elif split_prior == "uniform":
        prior = np.full(family.num_splits, 1.0 / family.num_splits)
    else:
        raise ValueError(f"unknown split_prior {split_prior!r}")
    out = np.zeros(n_y)
    for t in range(family.num_splits):
        in_t = family.assignment == t
        slab = joint[:, x][in_t].sum(axis=0)
        mass = slab.sum()
        if not mass > 0.0:
            raise PositivityError(t, x)
        out += prior[t] * slab / mass
    return out


def _conditionals(scm: DiscreteSCM, x: int) -> tuple[np.ndarray, np.ndarray]:
    """Observational ``P(m | x)`` and ``P(y | x, s, m)`` derived from the joint."""
    joint = enumerate_joint(scm)[:, x]
    p_sm = joint.sum(axis=2)
    p_x = p_sm.sum()
    if p_x <= 0.0:
        raise UndefinedConditionalError(f"P(X={x}) = 0")
    p_m_given_x = p_sm.sum(axis=0) / p_x
    with np.errstate(invalid="ignore", divide="ignore"):
        p_y_given = joint / p_sm[:, :, None]
    return p_m_given_x, p_y_given


def _require_defined(scm: DiscreteSCM, x: int, weight: np.ndarray) -> None:
    # the outcome conditional is only needed where the adjustment puts weight
    p_sxm = enumerate_joint(scm)[:, x].sum(axis=2)
    bad = np.argwhere((weight > 0.0) & ~(p_sxm > 0.0))
    if len(bad):
        s, m = bad[0]
        raise UndefinedConditionalError(f"P(X={x}, S={s}, M={m}) = 0 but the adjustment needs P(Y|X,S,M) there")


def true_effect(scm: DiscreteSCM, x: int) -> np.ndarray:
    """``sum_{s,m} P(Y | x, s, m) P(m | x) P(s)`` with conditionals from the joint."""
    x = _check_x(scm, x)
    p_m_given_x, p_y_given = _conditionals(scm, x)
    weight = scm.p_s[:, None] * p_m_given_x[None, :]
    _require_defined(scm, x, weight)
    return np.einsum("sm,smy->y", weight, np.nan_to_num(p_y_given))


def entangled_conditional(scm: DiscreteSCM, x: int, family: SplitFamily) -> np.ndarray:
    """Mediator conditional ``P~(m | x, s)`` seen through a split family.

    Each split conditions the joint on its strata; within split ``t`` the
    conditional ``P(m | x, s, t)`` is formed, and the splits are mixed with
    their marginal weights ``P(t)`` over those splits where ``(x, s)`` has mass.
    Rows for S-values with ``P(x, s) = 0`` are NaN.
    """
    x = _check_x(scm, x)
    joint = enumerate_joint(scm)[:, x].sum(axis=2)
    n_s, _, n_m, _ = scm.sizes
    prior = split_mass(scm, family)
    num = np.zeros((n_s, n_m))
    den = np.zeros(n_s)
    for t in range(family.num_splits):
        q = np.where(family.assignment == t, joint, 0.0)
        q_s = q.sum(axis=1)
        ok = q_s > 0.0
        num[ok] += prior[t] * q[ok] / q_s[ok, None]
        den[ok] += prior[t]
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / den[:, None]


@dataclass(frozen=True)
class FalseEffect:
    distribution: np.ndarray
    gap: float


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def false_effect(scm: DiscreteSCM, x: int, family: SplitFamily | None = None) -> FalseEffect:
    """``sum_{s,m} P(Y | x, s, m) P~(m | x, s) P(s)`` and its TV gap to the true effect.

    ``family`` defaults to the finest family that mixes S and M.
    """
    x = _check_x(scm, x)
    family = family if family is not None else SplitFamily.finest(scm)
    _, p_y_given = _conditionals(scm, x)
    cond = entangled_conditional(scm, x, family)
    positive_s = scm.p_s > 0.0
    if np.any(np.isnan(cond[positive_s])):
        s = int(np.argwhere(positive_s & np.isnan(cond).any(axis=1))[0, 0])
        raise UndefinedConditionalError(f"P(X={x}, S={s}) = 0")
    weight = np.where(positive_s[:, None], np.nan_to_num(cond) * scm.p_s[:, None], 0.0)
    _require_defined(scm, x, weight)
    dist = np.einsum("sm,smy->y", weight, np.nan_to_num(p_y_given))
    return FalseEffect(dist, total_variation(dist, true_effect(scm, x)))


def interventional_truth(scm: DiscreteSCM, x: int) -> np.ndarray:
    """Graph surgery: drop ``S -> X``, clamp ``X = x`` and marginalise S, M."""
    x = _check_x(scm, x)
    return np.einsum("s,m,smy->y", scm.p_s, scm.p_m_x[x], scm.p_y_xsm[x])


def random_scm(
    rng: np.random.Generator,
    max_domain: int = 4,
    sizes: tuple[int, int, int, int] | None = None,
    concentration: float = 1.0,
) -> DiscreteSCM:
    """Dirichlet-sampled SCM; all entries are strictly positive almost surely."""
    if sizes is None:
        sizes = tuple(int(v) for v in rng.integers(2, max_domain + 1, size=4))
    n_s, n_x, n_m, n_y = sizes

    def dirichlet(*shape):
        return rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])

    return DiscreteSCM(
        p_s=rng.dirichlet(np.full(n_s, concentration)),
        p_x_s=dirichlet(n_s, n_x),
        p_m_x=dirichlet(n_x, n_m),
        p_y_xsm=dirichlet(n_x, n_s, n_m, n_y),
    )


# -- serialization ---------------------------------------------------------

_TABLE_KEYS = {
    "p_s": "P_S",
    "p_x_s": "P_X_given_S",
    "p_m_x": "P_M_given_X",
    "p_y_xsm": "P_Y_given_XSM",
}


def scm_from_dict(doc: Mapping) -> DiscreteSCM:
    missing = [k for k in ("domains", *_TABLE_KEYS.values()) if k not in doc]
    if missing:
        raise SCMValidationError(missing[0], "missing from SCM document")
    domains = doc["domains"]
    try:
        sizes = tuple(int(domains[v]) for v in "SXMY")
    except (KeyError, TypeError, ValueError) as exc:
        raise SCMValidationError("domains", f"need integer sizes for S, X, M, Y ({exc})") from None
    tables = {}
    for attr, key in _TABLE_KEYS.items():
        try:
            tables[attr] = np.array(doc[key], dtype=np.float64)
        except (TypeError, ValueError):
            raise SCMValidationError(key, "not a rectangular numeric table") from None
    scm = DiscreteSCM(**tables)
    if scm.sizes != sizes:
        raise SCMValidationError("domains", f"declared {sizes} but tables imply {scm.sizes}")
    return scm


def scm_to_dict(scm: DiscreteSCM) -> dict:
    doc = {"domains": dict(zip("SXMY", scm.sizes))}
    for attr, key in _TABLE_KEYS.items():
        doc[key] = getattr(scm, attr).tolist()
    return doc


def load_scm(path: str | Path) -> tuple[DiscreteSCM, SplitFamily | None]:
    """Read an SCM document; an optional ``entangled_splits`` [s][m] table is returned too."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SCMValidationError("document", f"invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise SCMValidationError("document", "top level must be an object")
    scm = scm_from_dict(doc)
    family = None
    if "entangled_splits" in doc:
        try:
            family = SplitFamily(np.array(doc["entangled_splits"]))
        except ValueError as exc:
            raise SCMValidationError("entangled_splits", str(exc)) from None
        n_s, _, n_m, _ = scm.sizes
        if family.assignment.shape != (n_s, n_m):
            raise SCMValidationError("entangled_splits", f"expected shape {(n_s, n_m)}")
    return scm, family


# -- consistency report -----------------------------------------------------


@dataclass
class OracleRow:
    x: int
    observational: np.ndarray
    backdoor: np.ndarray | None
    true: np.ndarray
    false: FalseEffect
    truth: np.ndarray
    notes: list[str] = field(default_factory=list)


@dataclass
class OracleReport:
    rows: list[OracleRow]
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def check_scm(scm: DiscreteSCM, family: SplitFamily | None = None, tol: float = 1e-12) -> OracleReport:
    """Evaluate every estimator for every x and collect invariant violations."""
    rows, failures = [], []
    per_s = SplitFamily.per_confounder(scm)
    for x in range(scm.sizes[1]):
        notes = []
        obs = observational_conditional(scm, x)
        truth = interventional_truth(scm, x)
        try:
            bd = backdoor_adjust(scm, x, per_s)
        except PositivityError as exc:
            bd = None
            notes.append(str(exc))
        te = true_effect(scm, x)
        fe = false_effect(scm, x, family)
        for name, dist in (("observational", obs), ("backdoor", bd), ("true", te), ("false", fe.distribution)):
            if dist is not None and abs(dist.sum() - 1.0) > tol:
                failures.append(f"x={x}: {name} distribution sums to {dist.sum():.15f}")
        if np.max(np.abs(te - truth)) > tol:
            failures.append(f"x={x}: true effect deviates from truth by {np.max(np.abs(te - truth)):.3e}")
        if bd is not None and np.max(np.abs(bd - truth)) > tol:
            failures.append(f"x={x}: per-S backdoor deviates from truth by {np.max(np.abs(bd - truth)):.3e}")
        if bd is not None and np.max(np.abs(bd - obs)) <= tol:
            notes.append("observational == backdoor (equal)")
        rows.append(OracleRow(x, obs, bd, te, fe, truth, notes))
    return OracleReport(rows, failures)
