"""Keyword vocabularies shared by the rule backend and the codebook."""

from __future__ import annotations

import functools
import re
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .exceptions import ConfigurationError
from .records import Component

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CAUSE_TYPES = ("human", "equipment")


def phrase_pattern(phrase: str, plural: bool = True) -> str:
    """Regex source matching ``phrase`` on word boundaries.

    Internal whitespace matches any run of whitespace; a trailing ``s``/``es``
    is tolerated when ``plural`` is set.
    """
    body = r"\s+".join(re.escape(part) for part in phrase.lower().split())
    head = r"\b" if phrase[:1].isalnum() else ""
    tail = (r"(?:s|es)?\b" if plural else r"\b") if phrase[-1:].isalnum() else ""
    return head + body + tail


class Vocabulary:
    """Map surface forms found in text to canonical labels.

    At any position the longest form wins, so ``"electric bicycle"`` is
    never reported as ``"bicycle"``.
    """

    def __init__(self, forms: dict[str, list[str]]):
        self.labels = tuple(forms)
        pairs = [(form, label) for label, items in forms.items() for form in items]
        pairs.sort(key=lambda p: -len(p[0]))
        self._labels = [label for _, label in pairs]
        alternatives = [f"(?P<f{i}>{phrase_pattern(form)})" for i, (form, _) in enumerate(pairs)]
        self._regex = re.compile("|".join(alternatives) or r"(?!x)x", re.IGNORECASE)

    def finditer(self, text: str):
        for m in self._regex.finditer(text):
            yield self._labels[int(m.lastgroup[1:])], m

    def first(self, text: str) -> str | None:
        for label, _ in self.finditer(text):
            return label
        return None

    def all(self, text: str) -> list[str]:
        """Distinct labels in order of first appearance."""
        seen: dict[str, None] = {}
        for label, _ in self.finditer(text):
            seen.setdefault(label, None)
        return list(seen)


@dataclass(frozen=True)
class CauseRule:
    label: str
    display: str
    kind: str  # "human" | "equipment"
    regexes: tuple[re.Pattern, ...]

    def matches(self, text: str) -> bool:
        return any(rx.search(text) for rx in self.regexes)


@dataclass(frozen=True)
class RuleSet:
    version: str
    ebike_keywords: tuple[str, ...]
    ebike_regex: re.Pattern
    modes: Vocabulary
    mode_subsumes: dict[str, tuple[str, ...]]
    time: Vocabulary
    weather: Vocabulary
    road: Vocabulary
    adverse: dict[str, re.Pattern]
    causes: tuple[CauseRule, ...]
    components: dict[Component, re.Pattern]
    component_exclude: re.Pattern | None
    failure_regex: re.Pattern
    failure_window: int
    source: str = "<builtin>"

    def cause(self, label: str) -> CauseRule:
        for rule in self.causes:
            if rule.label == label:
                return rule
        raise KeyError(label)

    def field_vocabulary(self, name: str) -> Vocabulary:
        return {"time": self.time, "weather": self.weather, "road": self.road}[name]


def _alternation(phrases, plural=True, prefix=False) -> re.Pattern:
    if prefix:
        parts = [r"\b" + re.escape(p.lower()) for p in phrases]
    else:
        parts = [phrase_pattern(p, plural) for p in sorted(phrases, key=len, reverse=True)]
    return re.compile("|".join(parts) or r"(?!x)x", re.IGNORECASE)


def _build(data: dict, source: str) -> RuleSet:
    try:
        keywords = tuple(data["ebike"]["keywords"])
        causes = []
        for entry in data["causes"]:
            kind = entry["type"]
            if kind not in CAUSE_TYPES:
                raise ConfigurationError(f"{source}: cause {entry['label']!r} has type {kind!r}")
            phrases = list(entry.get("synonyms", [])) + [entry["label"], entry["display"]]
            regexes = [_alternation(phrases)]
            regexes += [re.compile(p, re.IGNORECASE) for p in entry.get("patterns", [])]
            causes.append(CauseRule(entry["label"], entry["display"], kind, tuple(regexes)))
        components = {}
        for name, words in data["components"].items():
            components[Component(name)] = _alternation(words)
        if set(components) != set(Component):
            missing = sorted(c.value for c in set(Component) - set(components))
            raise ConfigurationError(f"{source}: components missing {missing}")
        exclude = data.get("components_exclude", {}).get("phrases", [])
        failure = data["failure_verbs"]
        return RuleSet(
            version=str(data.get("version", "unversioned")),
            ebike_keywords=keywords,
            ebike_regex=_alternation(keywords),
            modes=Vocabulary(data["modes"]["forms"]),
            mode_subsumes={k: tuple(v) for k, v in data["modes"].get("subsumes", {}).items()},
            time=Vocabulary(data["time"]["forms"]),
            weather=Vocabulary(data["weather"]["forms"]),
            road=Vocabulary(data["road"]["forms"]),
            adverse={k: _alternation(v, prefix=True) for k, v in data["adverse"].items()},
            causes=tuple(causes),
            components=components,
            component_exclude=_alternation(exclude, plural=False) if exclude else None,
            failure_regex=_alternation(failure["words"], plural=False),
            failure_window=int(failure.get("window", 6)),
            source=source,
        )
    except (KeyError, TypeError, ValueError, re.error) as exc:
        raise ConfigurationError(f"{source}: invalid rules file ({exc})") from exc


def load_rules(path=None) -> RuleSet:
    """Load a rules file; ``None`` gives the packaged default."""
    if path is None:
        return default_rules()
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read rules file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return _build(data, str(path))


@functools.lru_cache(maxsize=None)
def default_rules() -> RuleSet:
    text = resources.files("ebike_agents").joinpath("data/rules.toml").read_text("utf-8")
    return _build(tomllib.loads(text), "<builtin rules.toml>")
