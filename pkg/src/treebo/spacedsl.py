"""Conditional search-space DSL: parsing, validation, enumeration, sampling.

A space is a forest of hyperparameters. ``choice`` and ``int`` hyperparameters
may carry a ``submodule`` mapping that activates further hyperparameters:
for a choice parent one branch per chosen value, for an int parent the child
group is replicated parent-value times (each copy tagged with an index).
Every root-to-leaf activation path is one flat subspace; all configurations
drawn from a subspace share its token layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np
import yaml

NUMERIC_KINDS = ("int", "float", "powerint2")
KINDS = ("choice",) + NUMERIC_KINDS

# Children of an int-kind parent apply to every admissible value; they are
# stored under this key instead of per-value activation keys.
REPLICATED = "*"


class SpaceError(ValueError):
    """Raised for syntax or semantic errors in a space document."""

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)
        self.line = line
        self.column = column


@dataclass(frozen=True)
class HyperparamSpec:
    """One hyperparameter: kind, admissible range, optional dependent children."""

    name: str
    kind: str
    choices: tuple = ()            # choice kind only, in listing order
    lo: float = 0.0                # numeric kinds: [lo, hi) for int/powerint2, [lo, hi] for float
    hi: float = 0.0
    children: dict = field(default_factory=dict)  # activation key -> tuple[HyperparamSpec]

    @property
    def is_decision(self) -> bool:
        return bool(self.children)

    def admissible_values(self):
        """Finite value set for choice/int/powerint2; floats have none."""
        if self.kind == "choice":
            return list(self.choices)
        if self.kind == "int":
            return list(range(int(self.lo), int(self.hi)))
        if self.kind == "powerint2":
            return [2 ** e for e in range(int(self.lo), int(self.hi))]
        raise SpaceError(f"'{self.name}': float hyperparameters have no finite value set")

    def contains(self, value) -> bool:
        if self.kind == "choice":
            return value in self.choices
        if self.kind == "float":
            return isinstance(value, (int, float)) and self.lo <= value <= self.hi
        if self.kind == "int":
            return isinstance(value, (int, np.integer)) and not isinstance(value, bool) \
                and self.lo <= value < self.hi
        if self.kind == "powerint2":
            return value in self.admissible_values()
        return False


@dataclass(frozen=True)
class Slot:
    """One scalar position of a subspace's token layout."""

    name: str
    spec: HyperparamSpec
    index: int                     # 1..L for replicated vector elements, else 0
    father_name: str | None       # nearest ancestor decision hyperparameter
    decision_value: Any = None     # fixed value if this slot is a decision on the path
    is_decision: bool = False

    @property
    def key(self) -> str:
        return f"{self.name}[{self.index}]" if self.index else self.name


@dataclass
class Subspace:
    """One flat subspace: a full assignment of the structure-determining variables."""

    id: int
    slots: tuple
    decisions: dict                # decision name -> fixed value
    # structural code arrays aligned with slots (filled by the owning space)
    id_codes: np.ndarray = None
    idx_codes: np.ndarray = None
    father_codes: np.ndarray = None

    @property
    def dimension(self) -> int:
        return len(self.slots)

    @property
    def free_params(self):
        return [
            (s.name, s.spec.kind, _range_of(s.spec), s.index, s.father_name)
            for s in self.slots
            if not s.is_decision
        ]


def _range_of(spec):
    if spec.kind == "choice":
        return spec.choices
    return (spec.lo, spec.hi)


@dataclass(frozen=True)
class Token:
    """Structural codes plus normalized value for one hyperparameter slot."""

    id_code: int
    idx_code: int
    father_code: int
    norm_value: float


@dataclass
class Configuration:
    """A sampled point: token sequence plus the raw values that produced it."""

    subspace_id: int
    tokens: tuple
    raw: dict

    def code_arrays(self):
        ids = np.array([t.id_code for t in self.tokens], dtype=np.int64)
        idxs = np.array([t.idx_code for t in self.tokens], dtype=np.int64)
        fathers = np.array([t.father_code for t in self.tokens], dtype=np.int64)
        values = np.array([t.norm_value for t in self.tokens], dtype=np.float64)
        return ids, idxs, fathers, values


class SearchSpace:
    """Parsed conditional space: spec forest, identity codes, enumerated subspaces."""

    def __init__(self, roots, source_text):
        self.roots = tuple(roots)
        self.source_text = source_text
        self.id_codes = {}
        self._assign_identity_codes()
        self.subspaces = enumerate_subspaces(self)
        self._subspace_by_id = {s.id: s for s in self.subspaces}
        self.max_index = max(
            (s.index for sub in self.subspaces for s in sub.slots), default=0
        )
        for sub in self.subspaces:
            sub.id_codes = np.array([self.id_codes[s.name] for s in sub.slots], dtype=np.int64)
            sub.idx_codes = np.array([s.index for s in sub.slots], dtype=np.int64)
            sub.father_codes = np.array(
                [self.id_codes[s.father_name] if s.father_name else 0 for s in sub.slots],
                dtype=np.int64,
            )

    @property
    def n_names(self) -> int:
        return len(self.id_codes)

    def subspace(self, subspace_id: int) -> Subspace:
        try:
            return self._subspace_by_id[subspace_id]
        except KeyError:
            raise SpaceError(
                f"invalid subspace id {subspace_id}; valid ids are 1..{len(self.subspaces)}"
            ) from None

    def _assign_identity_codes(self):
        def visit(spec):
            if spec.name not in self.id_codes:
                self.id_codes[spec.name] = len(self.id_codes) + 1
            for key in spec.children:
                for child in spec.children[key]:
                    visit(child)

        for root in self.roots:
            visit(root)


# ---------------------------------------------------------------------------
# Parsing

class _StrictLoader(yaml.SafeLoader):
    """SafeLoader that rejects duplicate mapping keys instead of merging them."""


def _strict_mapping(loader, node, deep=False):
    seen = {}
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            mark = key_node.start_mark
            raise SpaceError(
                f"duplicate key {key!r}", line=mark.line + 1, column=mark.column + 1
            )
        seen[key] = True
    return yaml.SafeLoader.construct_mapping(loader, node, deep)


_StrictLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _strict_mapping
)


def parse_space(document: str) -> SearchSpace:
    """Parse a space document, validate it, and enumerate its subspaces."""
    try:
        data = yaml.load(document, Loader=_StrictLoader)
    except SpaceError:
        raise
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise SpaceError(
                f"syntax error: {getattr(exc, 'problem', exc)}",
                line=mark.line + 1,
                column=mark.column + 1,
            ) from exc
        raise SpaceError(f"syntax error: {exc}") from exc
    if not isinstance(data, dict) or not data:
        raise SpaceError("document must be a non-empty mapping of hyperparameters")
    roots = [_parse_spec(name, body, path=name, replicated=False) for name, body in data.items()]
    return SearchSpace(roots, document)


def load_space(path) -> SearchSpace:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_space(fh.read())


def builtin_space_path(name: str):
    """Path of a space document shipped with the package."""
    from importlib import resources

    candidate = resources.files("treebo").joinpath("spaces", f"{name}.yaml")
    if not candidate.is_file():
        raise SpaceError(f"unknown builtin space {name!r}")
    return candidate


def load_builtin_space(name: str) -> SearchSpace:
    return parse_space(builtin_space_path(name).read_text(encoding="utf-8"))


def _parse_spec(name, body, path, replicated):
    if not isinstance(name, str):
        name = str(name)
    if not isinstance(body, dict):
        raise SpaceError(f"'{path}': hyperparameter body must be a mapping")
    unknown = set(body) - {"type", "range", "submodule"}
    if unknown:
        raise SpaceError(f"'{path}': unknown keys {sorted(unknown)}")
    kind = body.get("type")
    if kind not in KINDS:
        raise SpaceError(f"'{path}': unknown kind {kind!r}; expected one of {KINDS}")
    if "range" not in body:
        raise SpaceError(f"'{path}': missing range")

    choices, lo, hi = (), 0.0, 0.0
    if kind == "choice":
        choices = _parse_choice_range(body["range"], path)
    else:
        lo, hi = _parse_numeric_range(body["range"], kind, path)

    children = {}
    if "submodule" in body:
        if replicated:
            raise SpaceError(
                f"'{path}': submodules inside a replicated group are not supported"
            )
        sub = body["submodule"]
        if not isinstance(sub, dict) or not sub:
            raise SpaceError(f"'{path}': submodule must be a non-empty mapping")
        if kind == "choice":
            for key, group in sub.items():
                if key not in choices:
                    raise SpaceError(
                        f"'{path}': submodule key {key!r} is not in the choice range"
                    )
                children[key] = _parse_group(group, f"{path}.{key}", replicated=False)
        elif kind == "int":
            children[REPLICATED] = _parse_group(sub, path, replicated=True)
        else:
            raise SpaceError(f"'{path}': only choice and int hyperparameters may carry a submodule")

    return HyperparamSpec(name=name, kind=kind, choices=choices, lo=lo, hi=hi, children=children)


def _parse_group(group, path, replicated):
    if not isinstance(group, dict) or not group:
        raise SpaceError(f"'{path}': submodule branch must be a non-empty mapping")
    return tuple(
        _parse_spec(child_name, child_body, f"{path}.{child_name}", replicated)
        for child_name, child_body in group.items()
    )


def _parse_choice_range(rng, path):
    # A "{a, b, c}" literal set arrives from YAML as a mapping with null values.
    if isinstance(rng, dict):
        if any(v is not None for v in rng.values()):
            raise SpaceError(f"'{path}': choice range must be a literal set like {{a, b}}")
        literals = tuple(rng.keys())
    elif isinstance(rng, (list, tuple)):
        literals = tuple(rng)
    else:
        raise SpaceError(f"'{path}': choice range must be a literal set like {{a, b}}")
    if not literals:
        raise SpaceError(f"'{path}': empty choice range")
    if len(set(literals)) != len(literals):
        raise SpaceError(f"'{path}': duplicate literals in choice range")
    return literals


def _parse_numeric_range(rng, kind, path):
    if isinstance(rng, (list, tuple)):
        if len(rng) != 1:
            raise SpaceError(f"'{path}': numeric range must be a single 'lo...hi' bound")
        rng = rng[0]
    if not isinstance(rng, str) or "..." not in rng:
        raise SpaceError(f"'{path}': numeric range must be written '[lo...hi]'")
    lo_s, _, hi_s = rng.partition("...")
    try:
        if kind == "float":
            lo, hi = float(lo_s), float(hi_s)
        else:
            lo, hi = int(lo_s), int(hi_s)
    except ValueError:
        raise SpaceError(f"'{path}': malformed numeric bound {rng!r}") from None
    if not lo < hi:
        raise SpaceError(f"'{path}': empty range [{lo}...{hi}]")
    return lo, hi


# ---------------------------------------------------------------------------
# Subspace enumeration

def enumerate_subspaces(space_or_roots) -> list:
    """One subspace per joint assignment of the structure-determining variables.

    Depth-first in document order, branching over decision values in range
    order, so ids are stable across re-parses of the same document.
    """
    roots = space_or_roots.roots if isinstance(space_or_roots, SearchSpace) else space_or_roots
    results = []

    def expand(pending, acc):
        # pending: list of (spec, index, father_name) still to place on this path
        if not pending:
            _check_slot_keys(acc)
            decisions = {s.name: s.decision_value for s in acc if s.is_decision}
            results.append(Subspace(id=len(results) + 1, slots=tuple(acc), decisions=decisions))
            return
        (spec, index, father), rest = pending[0], pending[1:]
        if not spec.is_decision:
            slot = Slot(spec.name, spec, index, father)
            expand(rest, acc + [slot])
            return
        if spec.kind == "choice":
            for value in spec.choices:
                slot = Slot(spec.name, spec, index, father, value, True)
                grown = [(c, 0, spec.name) for c in spec.children.get(value, ())]
                expand(grown + rest, acc + [slot])
        else:  # int decision: replicate the child group value times
            group = spec.children[REPLICATED]
            for value in spec.admissible_values():
                slot = Slot(spec.name, spec, index, father, value, True)
                grown = [(c, i, spec.name) for i in range(1, value + 1) for c in group]
                expand(grown + rest, acc + [slot])

    expand([(r, 0, None) for r in roots], [])
    return results


def _check_slot_keys(slots):
    seen = set()
    for s in slots:
        if s.key in seen:
            raise SpaceError(
                f"hyperparameter '{s.key}' occurs twice on one activation path"
            )
        seen.add(s.key)


# ---------------------------------------------------------------------------
# Values: normalization, sampling, serialization

def normalize_value(spec: HyperparamSpec, value) -> float:
    """Map a raw value into [0, 1] (ordinal position for choices)."""
    if spec.kind == "choice":
        try:
            pos = spec.choices.index(value)
        except ValueError:
            raise SpaceError(f"'{spec.name}': value {value!r} not in choice range") from None
        return pos / max(len(spec.choices) - 1, 1)
    if spec.kind == "powerint2":
        if value not in spec.admissible_values():
            raise SpaceError(f"'{spec.name}': value {value!r} not a power of two in range")
        return (math.log2(value) - spec.lo) / (spec.hi - spec.lo)
    if not spec.contains(value):
        raise SpaceError(f"'{spec.name}': value {value!r} outside range [{spec.lo}...{spec.hi}]")
    return (value - spec.lo) / (spec.hi - spec.lo)


def denormalize_value(spec: HyperparamSpec, u: float):
    """Inverse of normalize_value for continuous slots; u is clipped to [0, 1]."""
    u = min(max(u, 0.0), 1.0)
    if spec.kind == "float":
        return spec.lo + u * (spec.hi - spec.lo)
    raise SpaceError(f"'{spec.name}': only float slots denormalize continuously")


def sample_raw(spec: HyperparamSpec, rng) -> Any:
    """One uniform draw from a slot's range (int kinds are right-open)."""
    if spec.kind == "choice":
        return spec.choices[int(rng.integers(len(spec.choices)))]
    if spec.kind == "int":
        return int(rng.integers(int(spec.lo), int(spec.hi)))
    if spec.kind == "powerint2":
        return 2 ** int(rng.integers(int(spec.lo), int(spec.hi)))
    return float(rng.uniform(spec.lo, spec.hi))


def build_config(space: SearchSpace, subspace_id: int, values: dict) -> Configuration:
    """Assemble a Configuration from a complete raw-value mapping."""
    sub = space.subspace(subspace_id)
    tokens = []
    raw = {}
    unused = set(values)
    for slot in sub.slots:
        if slot.is_decision:
            value = values.get(slot.key, slot.decision_value)
            if value != slot.decision_value:
                raise SpaceError(
                    f"'{slot.key}': value {value!r} contradicts subspace {subspace_id} "
                    f"(expects {slot.decision_value!r})"
                )
        else:
            if slot.key not in values:
                raise SpaceError(f"missing value for '{slot.key}' in subspace {subspace_id}")
            value = values[slot.key]
        unused.discard(slot.key)
        norm = normalize_value(slot.spec, value)
        tokens.append(
            Token(
                id_code=space.id_codes[slot.name],
                idx_code=slot.index,
                father_code=space.id_codes[slot.father_name] if slot.father_name else 0,
                norm_value=norm,
            )
        )
        raw[slot.key] = value
    if unused:
        raise SpaceError(f"unknown hyperparameters for subspace {subspace_id}: {sorted(unused)}")
    return Configuration(subspace_id=subspace_id, tokens=tuple(tokens), raw=raw)


def sample(space: SearchSpace, subspace_id: int, rng_seed: int) -> Configuration:
    """Uniform independent draw of every free slot of a subspace."""
    return sample_with_rng(space, subspace_id, np.random.default_rng(rng_seed))


def sample_with_rng(space: SearchSpace, subspace_id: int, rng) -> Configuration:
    """Like sample, but drawing from a caller-managed generator."""
    sub = space.subspace(subspace_id)
    values = {}
    for slot in sub.slots:
        values[slot.key] = slot.decision_value if slot.is_decision else sample_raw(slot.spec, rng)
    return build_config(space, subspace_id, values)


def serialize_config(config: Configuration) -> str:
    """Canonical JSON (sorted keys) of the raw values plus subspace id."""
    return json.dumps(
        {"subspace_id": config.subspace_id, "values": config.raw},
        sort_keys=True,
        separators=(",", ":"),
    )


def deserialize_config(text: str, space: SearchSpace) -> Configuration:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpaceError(f"malformed configuration JSON: {exc}") from exc
    if not isinstance(payload, dict) or "subspace_id" not in payload or "values" not in payload:
        raise SpaceError("configuration JSON must contain 'subspace_id' and 'values'")
    return build_config(space, payload["subspace_id"], payload["values"])
