"""Effect-size tables, model specifications and design matrices."""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.linalg import qr

ROLE_COLUMNS = ("y", "v", "se", "study", "cluster", "outcome",
                "events", "trials", "count", "exposure")
_ID_ROLES = ("study", "cluster", "outcome")
_NUMERIC_ROLES = ("y", "v", "se", "events", "trials", "count", "exposure")

FAMILIES = (
    "normal_re", "normal_metareg", "location_scale", "multilevel3", "multivariate",
    "glmm_binomial", "glmm_poisson", "robust_t", "robust_skew_t", "robust_beta",
    "robust_mixture",
)
REML_FAMILIES = ("normal_re", "normal_metareg", "multilevel3", "multivariate")
ROBUST_FAMILIES = ("robust_t", "robust_skew_t", "robust_beta", "robust_mixture")
# families whose marginal likelihood is an explicit Gaussian in y
GAUSSIAN_FAMILIES = REML_FAMILIES + ("location_scale",)

RANK_TOL = 1e-10


class DataError(ValueError):
    """Input data or model specification is unusable."""


@dataclass(frozen=True)
class EffectRow:
    y: float | None
    v: float | None
    study_id: str
    cluster_id: str | None = None
    outcome_id: str | None = None
    events: int | None = None
    trials: int | None = None
    count: int | None = None
    exposure: float | None = None
    moderators: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class ModeratorKind:
    kind: str  # "numeric" | "categorical"
    levels: tuple[str, ...] = ()


@dataclass(frozen=True)
class EffectTable:
    """Column-oriented effect-size dataset.

    Role columns are numpy arrays (or None when absent). Moderators keep their
    original column order; categorical moderators hold string arrays.
    """

    y: np.ndarray | None
    v: np.ndarray | None
    study: np.ndarray
    cluster: np.ndarray | None = None
    outcome: np.ndarray | None = None
    events: np.ndarray | None = None
    trials: np.ndarray | None = None
    count: np.ndarray | None = None
    exposure: np.ndarray | None = None
    moderators: Mapping[str, np.ndarray] = field(default_factory=dict)
    moderator_schema: Mapping[str, ModeratorKind] = field(default_factory=dict)
    variance_source: str = "v"

    def __post_init__(self):
        for name in ("y", "v", "study", "cluster", "outcome", "events", "trials",
                     "count", "exposure"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
                if len(arr) != len(self.study):
                    raise DataError(f"column {name!r} has {len(arr)} rows, expected {len(self.study)}")
        for arr in self.moderators.values():
            np.asarray(arr).setflags(write=False)
        if self.n < 1:
            raise DataError("table has no rows")

    @property
    def n(self) -> int:
        return len(self.study)

    @property
    def k(self) -> int:
        return len(np.unique(self.study))

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.v)

    @property
    def rows(self) -> list[EffectRow]:
        def opt(arr, i, cast):
            return None if arr is None else cast(arr[i])

        out = []
        for i in range(self.n):
            mods = {name: (arr[i] if self.moderator_schema[name].kind == "categorical"
                           else float(arr[i])) for name, arr in self.moderators.items()}
            out.append(EffectRow(
                y=opt(self.y, i, float), v=opt(self.v, i, float), study_id=str(self.study[i]),
                cluster_id=opt(self.cluster, i, str), outcome_id=opt(self.outcome, i, str),
                events=opt(self.events, i, int), trials=opt(self.trials, i, int),
                count=opt(self.count, i, int), exposure=opt(self.exposure, i, float),
                moderators=mods))
        return out

    @classmethod
    def from_arrays(cls, y=None, v=None, *, se=None, study=None, moderators=None, **roles):
        """Build a table in memory; categorical kinds are inferred from dtype."""
        if se is not None:
            if v is not None:
                raise DataError("supply exactly one of v and se")
            se = np.asarray(se, dtype=float)
            v = se ** 2
        n = None
        for arr in (y, v, roles.get("events"), roles.get("count")):
            if arr is not None:
                n = len(arr)
                break
        if study is None:
            study = [str(i + 1) for i in range(n)]
        mods, schema = {}, {}
        for name, values in (moderators or {}).items():
            arr = np.asarray(values)
            if arr.dtype.kind in "biuf":
                mods[name] = arr.astype(float)
                schema[name] = ModeratorKind("numeric")
            else:
                arr = arr.astype(str)
                mods[name] = arr
                schema[name] = ModeratorKind("categorical", tuple(sorted(set(arr.tolist()))))
        conv = {}
        for name, arr in roles.items():
            if arr is None:
                continue
            conv[name] = (np.asarray(arr).astype(str) if name in _ID_ROLES
                          else np.asarray(arr, dtype=float))
        table = cls(
            y=None if y is None else np.asarray(y, dtype=float),
            v=None if v is None else np.asarray(v, dtype=float),
            study=np.asarray(study).astype(str), moderators=mods, moderator_schema=schema,
            variance_source="se" if se is not None else "v", **conv)
        _check_values(table)
        return table

    def subset(self, mask) -> "EffectTable":
        mask = np.asarray(mask)
        kw = {}
        for name in ("y", "v", "study", "cluster", "outcome", "events", "trials",
                     "count", "exposure"):
            arr = getattr(self, name)
            kw[name] = None if arr is None else arr[mask]
        kw["moderators"] = {k: a[mask] for k, a in self.moderators.items()}
        return replace(self, **kw)


@dataclass(frozen=True)
class Formula:
    intercept: bool = True
    terms: tuple[str, ...] = ()

    @classmethod
    def parse(cls, text: str | None) -> "Formula":
        """Parse a bare term list such as ``"1 + dose + region"``.

        ``-1`` or ``0`` drops the intercept; it is included otherwise.
        """
        if text is None or not text.strip():
            return cls()
        text = text.strip()
        if "~" in text:
            text = text.split("~", 1)[1]
        intercept = True
        terms = []
        for sign, tok in re.findall(r"([+-]?)\s*([^+\-\s]+)", text):
            if tok in ("1", "0"):
                if tok == "0" or sign == "-":
                    intercept = False
                continue
            if sign == "-":
                raise DataError(f"cannot remove term {tok!r}; only '-1' is supported")
            if not re.fullmatch(r"[A-Za-z_.][\w.]*", tok):
                raise DataError(f"invalid term {tok!r} in formula {text!r}")
            if tok not in terms:
                terms.append(tok)
        return cls(intercept, tuple(terms))

    def __str__(self):
        parts = ["1" if self.intercept else "-1"] + list(self.terms)
        return " + ".join(parts)

    @property
    def is_intercept_only(self) -> bool:
        return self.intercept and not self.terms


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    column_names: tuple[str, ...]

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class ModelSpec:
    family: str = "normal_re"
    loc_formula: Formula = field(default_factory=Formula)
    scale_formula: Formula | None = None
    method: str = "ml"
    scale_random_effect: bool = False
    sampling_cor: float = 0.5
    quad_nodes: int | None = None
    mixture_g: int = 2

    def __post_init__(self):
        if isinstance(self.loc_formula, str):
            object.__setattr__(self, "loc_formula", Formula.parse(self.loc_formula))
        if isinstance(self.scale_formula, str):
            object.__setattr__(self, "scale_formula", Formula.parse(self.scale_formula))
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}; valid families: {', '.join(FAMILIES)}")
        if self.method not in ("ml", "reml"):
            raise DataError(f"method must be 'ml' or 'reml', got {self.method!r}")
        if self.method == "reml" and self.family not in REML_FAMILIES:
            raise DataError(f"REML is only available for {', '.join(REML_FAMILIES)}")
        if self.family == "location_scale" and self.scale_formula is None:
            object.__setattr__(self, "scale_formula", Formula())
        if self.family != "location_scale" and (self.scale_formula is not None
                                                or self.scale_random_effect):
            raise DataError("a scale formula is only used by the location_scale family")
        if not -1.0 < self.sampling_cor < 1.0:
            raise DataError("sampling_cor must lie in (-1, 1)")
        if self.family == "robust_mixture" and self.mixture_g < 2:
            raise DataError("robust_mixture needs at least 2 components")
        if self.quad_nodes is not None and not 1 <= self.quad_nodes <= 256:
            raise DataError("quad_nodes must be in [1, 256]")

    @property
    def nodes(self) -> int:
        if self.quad_nodes is not None:
            return self.quad_nodes
        if self.family == "robust_beta":
            return 64
        if self.family in ROBUST_FAMILIES:
            return 35
        return 21


# --------------------------------------------------------------------------
# CSV input/output


def _parse_float(text, column, line):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"non-numeric value {text!r} in column {column!r} (line {line})") from None
    return value


def load_csv(path, overrides: Mapping[str, str] | None = None) -> EffectTable:
    """Read an effect-size CSV.

    ``overrides`` maps a role (``y``, ``v``, ``se``, ``study``, ...) to the
    header name used in the file.
    """
    path = Path(path)
    overrides = dict(overrides or {})
    for role in overrides:
        if role not in ROLE_COLUMNS:
            raise DataError(f"unknown column role {role!r}")
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        records = [row for row in reader if any(cell.strip() for cell in row)]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicated column names in header")

    role_of = {}
    for role in ROLE_COLUMNS:
        name = overrides.get(role, role)
        if name in header:
            role_of[name] = role
        elif role in overrides:
            raise DataError(f"missing required column {name!r} (role {role})")
    columns = {h: [] for h in header}
    for lineno, row in enumerate(records, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
        for h, cell in zip(header, row):
            columns[h].append((cell.strip(), lineno))
    if not records:
        raise DataError(f"{path}: no data rows")

    roles = {}
    for name, role in role_of.items():
        cells = columns[name]
        if role in _ID_ROLES:
            if any(c == "" for c, _ in cells):
                raise DataError(f"missing value in column {name!r}")
            roles[role] = np.array([c for c, _ in cells], dtype=str)
        else:
            roles[role] = np.array([_parse_float(c, name, ln) if c != "" else math.nan
                                    for c, ln in cells])

    moderators, schema = {}, {}
    for h in header:
        if h in role_of:
            continue
        cells = [c for c, _ in columns[h]]
        if any(c == "" for c in cells):
            raise DataError(f"missing value in moderator column {h!r}")
        try:
            moderators[h] = np.array([float(c) for c in cells])
            schema[h] = ModeratorKind("numeric")
        except ValueError:
            moderators[h] = np.array(cells, dtype=str)
            schema[h] = ModeratorKind("categorical", tuple(sorted(set(cells))))

    if "v" in roles and "se" in roles:
        raise DataError("supply exactly one of the columns v and se")
    source = "v"
    if "se" in roles:
        se = roles.pop("se")
        if np.any(~np.isfinite(se)) or np.any(se <= 0):
            raise DataError("nonpositive sampling error (se must be > 0)")
        roles["v"] = se ** 2
        source = "se"
    has_counts = "events" in roles or "count" in roles
    if not has_counts:
        for need in ("y", "v"):
            if need not in roles:
                missing = "v or se" if need == "v" else need
                raise DataError(f"missing required column {missing!r}")
    n = len(records)
    study = roles.pop("study", np.array([str(i + 1) for i in range(n)], dtype=str))
    table = EffectTable(y=roles.pop("y", None), v=roles.pop("v", None), study=study,
                        moderators=moderators, moderator_schema=schema,
                        variance_source=source, **roles)
    _check_values(table)
    return table


def _check_values(table: EffectTable):
    if table.v is not None:
        if np.any(~np.isfinite(table.v)) or np.any(table.v <= 0):
            raise DataError("nonpositive sampling error (v must be > 0)")
    if table.y is not None and np.any(~np.isfinite(table.y)):
        raise DataError("missing or non-finite effect size in column 'y'")
    if table.events is not None or table.trials is not None:
        if table.events is None or table.trials is None:
            raise DataError("binomial data need both 'events' and 'trials'")
        ev, tr = table.events, table.trials
        if np.any(~np.isfinite(ev)) or np.any(~np.isfinite(tr)):
            raise DataError("missing value in events/trials")
        if np.any(ev != np.round(ev)) or np.any(tr != np.round(tr)):
            raise DataError("events and trials must be integers")
        if np.any(ev < 0) or np.any(tr <= 0):
            raise DataError("events must be >= 0 and trials > 0")
        if np.any(ev > tr):
            raise DataError("events > trials in at least one row")
    if table.count is not None:
        c = table.count
        if np.any(~np.isfinite(c)) or np.any(c < 0) or np.any(c != np.round(c)):
            raise DataError("counts must be nonnegative integers")
    if table.exposure is not None:
        if np.any(~np.isfinite(table.exposure)) or np.any(table.exposure <= 0):
            raise DataError("exposure must be > 0")


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        if np.isnan(x):
            return ""
        if float(x).is_integer() and abs(x) < 1e15:
            return str(int(x))
        return repr(float(x))
    return str(x)


def write_csv(table: EffectTable, path) -> None:
    """Write a table in the CSV schema read by :func:`load_csv`."""
    cols = []
    if table.y is not None:
        cols.append(("y", table.y))
    if table.v is not None:
        if table.variance_source == "se":
            cols.append(("se", np.sqrt(table.v)))
        else:
            cols.append(("v", table.v))
    cols.append(("study", table.study))
    for role in ("cluster", "outcome", "events", "trials", "count", "exposure"):
        arr = getattr(table, role)
        if arr is not None:
            cols.append((role, arr))
    cols.extend(table.moderators.items())
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([name for name, _ in cols])
        for i in range(table.n):
            w.writerow([_fmt(arr[i]) for _, arr in cols])


# --------------------------------------------------------------------------
# design matrices


def _term_column(table: EffectTable, term: str):
    if term in table.moderators:
        return table.moderators[term], table.moderator_schema[term]
    # derived precision terms, usable without a moderator column of that name
    if term == "se" and table.v is not None:
        return table.se, ModeratorKind("numeric")
    if term == "v" and table.v is not None:
        return np.asarray(table.v), ModeratorKind("numeric")
    if term == "precision" and table.v is not None:
        return 1.0 / table.se, ModeratorKind("numeric")
    raise DataError(f"formula term {term!r} is not a column of the data")


def build_design(table: EffectTable, formula: Formula) -> DesignMatrix:
    cols, names = [], []
    if formula.intercept:
        cols.append(np.ones(table.n))
        names.append("intercept")
    for term in formula.terms:
        values, kind = _term_column(table, term)
        if kind.kind == "numeric":
            cols.append(np.asarray(values, dtype=float))
            names.append(term)
        else:
            for level in kind.levels[1:]:
                cols.append((values == level).astype(float))
                names.append(f"{term}[{level}]")
    if not cols:
        raise DataError("formula has no columns")
    X = np.column_stack(cols)
    _check_rank(X, names)
    X.setflags(write=False)
    return DesignMatrix(X, tuple(names))


def _check_rank(X, names):
    if X.shape[1] > X.shape[0]:
        raise DataError(f"design has {X.shape[1]} columns but only {X.shape[0]} rows")
    _, R, piv = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag[0] == 0:
        raise DataError(f"rank-deficient design: collinear columns {list(names)}")
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < X.shape[1]:
        bad = [names[j] for j in sorted(piv[rank:])]
        raise DataError(f"rank-deficient design: collinear columns {bad}")


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ModelInput:
    """Validated (table, spec, designs) bundle consumed by the likelihoods."""

    table: EffectTable
    spec: ModelSpec
    X: DesignMatrix
    Z: DesignMatrix | None = None
    outcomes: tuple[str, ...] = ()

    @property
    def family(self):
        return self.spec.family

    @property
    def n(self):
        return self.table.n


def count_parameters(spec: ModelSpec, p_loc: int, p_scale: int = 0, n_outcomes: int = 1) -> int:
    fam = spec.family
    if fam in ("normal_re", "normal_metareg", "glmm_binomial", "glmm_poisson"):
        return p_loc + 1
    if fam == "location_scale":
        return p_loc + p_scale + int(spec.scale_random_effect)
    if fam == "multilevel3":
        return p_loc + 3
    if fam == "multivariate":
        return n_outcomes * p_loc + n_outcomes * (n_outcomes + 1) // 2
    if fam == "robust_t":
        return p_loc + 2
    if fam == "robust_skew_t":
        return p_loc + 3
    if fam == "robust_beta":
        return 2
    if fam == "robust_mixture":
        return 3 * spec.mixture_g - 1
    raise DataError(f"unknown family {fam!r}")


def validate(table: EffectTable, spec: ModelSpec) -> ModelInput:
    fam = spec.family
    if fam == "glmm_binomial":
        if table.events is None or table.trials is None:
            raise DataError("glmm_binomial needs 'events' and 'trials' columns")
    elif fam == "glmm_poisson":
        if table.count is None:
            raise DataError("glmm_poisson needs a 'count' column")
    else:
        if table.y is None or table.v is None:
            raise DataError(f"{fam} needs 'y' and 'v' (or 'se') columns")
    if fam == "multilevel3" and table.cluster is None:
        raise DataError("multilevel3 needs a 'cluster' column")
    if fam == "multivariate" and table.outcome is None:
        raise DataError("multivariate needs an 'outcome' column")
    if fam in ROBUST_FAMILIES or fam == "location_scale":
        if len(np.unique(table.study)) != table.n:
            raise DataError(f"{fam} expects one effect per study")
    if fam in ("robust_beta", "robust_mixture") and not spec.loc_formula.is_intercept_only:
        raise DataError(f"{fam} supports an intercept-only location formula")

    X = build_design(table, spec.loc_formula)
    Z = build_design(table, spec.scale_formula) if fam == "location_scale" else None

    outcomes = ()
    if fam == "multivariate":
        outcomes = tuple(sorted(set(table.outcome.tolist())))
        pairs = set()
        for s, o in zip(table.study.tolist(), table.outcome.tolist()):
            if (s, o) in pairs:
                raise DataError(f"study {s!r} has duplicated outcome_id {o!r}")
            pairs.add((s, o))

    q = count_parameters(spec, X.shape[1], 0 if Z is None else Z.shape[1], max(1, len(outcomes)))
    n_obs = table.n
    if fam == "glmm_binomial":
        # each row carries `trials` Bernoulli observations
        n_obs = int(np.sum(table.trials))
    if n_obs < q:
        raise DataError(f"insufficient rows: {n_obs} observations for {q} parameters")
    return ModelInput(table, spec, X, Z, outcomes)
