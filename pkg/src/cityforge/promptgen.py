"""Building prompt enumeration over a descriptor library.

A depth-first walk assigns one option per category in library order and
prunes a branch as soon as the partial assignment contains a forbidden
pair. Survivors are rendered through the library template, passed through
an optional validator and deduplicated on normalized text.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Iterable, Mapping, Sequence

from .errors import ValidationError


@dataclass(frozen=True)
class Category:
    name: str
    options: tuple[str, ...]


@dataclass(frozen=True)
class CompatibilityRule:
    """Forbids category_a = option_a together with category_b = option_b."""

    a: tuple[str, str]
    b: tuple[str, str]

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(self.a))
        object.__setattr__(self, "b", tuple(self.b))
        if self.a[0] == self.b[0]:
            raise ValidationError(f"rule pairs two options of the same category {self.a[0]!r}")

    def violated_by(self, assignment: Mapping[str, str]) -> bool:
        return assignment.get(self.a[0]) == self.a[1] and assignment.get(self.b[0]) == self.b[1]


def _template_slots(template: str) -> list[str]:
    return [f for _, f, _, _ in string.Formatter().parse(template) if f is not None]


@dataclass(frozen=True)
class DescriptorLibrary:
    categories: tuple[Category, ...]
    template: str = ""
    rules: tuple[CompatibilityRule, ...] = ()

    def __post_init__(self):
        cats = tuple(c if isinstance(c, Category) else Category(c[0], tuple(c[1])) for c in self.categories)
        if not cats:
            raise ValidationError("library needs at least one category")
        names = [c.name for c in cats]
        if len(set(names)) != len(names):
            raise ValidationError("category names must be unique")
        for c in cats:
            if not c.options:
                raise ValidationError(f"category {c.name!r} has no options")
            if len(set(c.options)) != len(c.options):
                raise ValidationError(f"category {c.name!r} repeats an option")
        template = self.template or "A building with " + ", ".join(f"{n} {{{n}}}" for n in names) + "."
        slots = _template_slots(template)
        if sorted(slots) != sorted(names):
            raise ValidationError(f"template slots {slots} must name each category exactly once")
        object.__setattr__(self, "categories", cats)
        object.__setattr__(self, "template", template)
        object.__setattr__(self, "rules", tuple(self.rules))
        validate_rules(self, self.rules)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.categories)

    def combinations(self) -> int:
        total = 1
        for c in self.categories:
            total *= len(c.options)
        return total

    def render(self, assignment: Mapping[str, str]) -> str:
        return self.template.format_map(dict(assignment))


def validate_rules(lib: DescriptorLibrary, rules: Iterable[CompatibilityRule]) -> None:
    options = {c.name: set(c.options) for c in lib.categories}
    for rule in rules:
        for cat, opt in (rule.a, rule.b):
            if cat not in options:
                raise ValidationError(f"rule references unknown category {cat!r}")
            if opt not in options[cat]:
                raise ValidationError(f"rule references unknown option {opt!r} in category {cat!r}")


def canonical_key(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


@dataclass(frozen=True)
class PromptRecord:
    assignment: tuple[tuple[str, str], ...]
    rendered: str
    canonical_key: str

    def to_json(self) -> str:
        return json.dumps(
            {"assignment": dict(self.assignment), "prompt": self.rendered, "key": self.canonical_key},
            ensure_ascii=False,
        )


def check_compat(assignment: Mapping[str, str], rules: Iterable[CompatibilityRule]) -> bool:
    """False iff some rule has both of its sides present in the assignment."""
    return not any(rule.violated_by(assignment) for rule in rules)


def enumerate_prompts(
    lib: DescriptorLibrary,
    rules: Sequence[CompatibilityRule] | None = None,
    validator: Callable[[PromptRecord], bool] | None = None,
) -> list[PromptRecord]:
    rules = lib.rules if rules is None else tuple(rules)
    validate_rules(lib, rules)
    out: list[PromptRecord] = []
    cats = lib.categories
    assignment: dict[str, str] = {}

    def visit(depth: int) -> None:
        if depth == len(cats):
            text = lib.render(assignment)
            rec = PromptRecord(tuple((c.name, assignment[c.name]) for c in cats), text, canonical_key(text))
            if validator is None or validator(rec):
                out.append(rec)
            return
        cat = cats[depth]
        for opt in cat.options:
            assignment[cat.name] = opt
            if check_compat(assignment, rules):
                visit(depth + 1)
            del assignment[cat.name]

    visit(0)
    return out


def dedup(records: Iterable[PromptRecord]) -> list[PromptRecord]:
    """Keep the first record per canonical key, preserving order."""
    seen: set[str] = set()
    kept = []
    for rec in records:
        if rec.canonical_key not in seen:
            seen.add(rec.canonical_key)
            kept.append(rec)
    return kept


def library_from_dict(doc: Mapping) -> DescriptorLibrary:
    try:
        cats = tuple(Category(str(c["name"]), tuple(str(o) for o in c["options"])) for c in doc["categories"])
        rules = tuple(CompatibilityRule(tuple(r["a"]), tuple(r["b"])) for r in doc.get("rules", ()))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed descriptor library: {exc}") from None
    return DescriptorLibrary(cats, str(doc.get("template", "")), rules)


def load_library(text: str) -> DescriptorLibrary:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"library is not valid JSON: {exc}") from None
    return library_from_dict(doc)


def bundled_library(name: str = "default") -> DescriptorLibrary:
    """``default`` or ``demo`` library shipped with the package."""
    text = resources.files("cityforge.data").joinpath(f"{name}_library.json").read_text("utf-8")
    return load_library(text)


def to_jsonl(records: Iterable[PromptRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)
