"""Four-stage extraction: e-bike classification, factor extraction, cause
determination and component linkage.

Each stage is available from a deterministic keyword backend
(:class:`RuleBackend`) and from a chat-completion backend
(:class:`LLMBackend`). :func:`run_pipeline` runs the stages over a corpus,
sending only records classified as e-bike incidents past the first stage.
"""

from __future__ import annotations

import enum
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

from .codebook import build_predictor_vector, cause_type_of, match_causes
from .exceptions import (ConfigurationError, ExtractionError, ProtocolError,
                         RecordExcluded, TransportError)
from .records import SENTINEL, CauseType, Component, StructuredIncident
from .rules import RuleSet, default_rules

logger = logging.getLogger(__name__)

UNCLEAR = "Unclear"


class EbikeLabel(str, enum.Enum):
    yes = "yes"
    no = "no"


@dataclass(frozen=True)
class ExtractedFactors:
    modes: tuple[str, ...] = ()
    time_raw: str = SENTINEL
    weather_raw: str = SENTINEL
    road_raw: str = SENTINEL
    cause_raw: str = SENTINEL

    def __post_init__(self):
        deduped = tuple(dict.fromkeys(self.modes))
        object.__setattr__(self, "modes", deduped)

    @property
    def modes_count(self) -> int:
        return len(self.modes)


@dataclass(frozen=True)
class CauseDetermination:
    cause_label: str
    cause_type: CauseType
    matched: tuple[str, ...] = ()


@dataclass(frozen=True)
class ComponentLinkage:
    related: frozenset = frozenset()
    caused_by: frozenset = frozenset()

    def __post_init__(self):
        if not self.caused_by <= self.related:
            extra = sorted(c.value for c in self.caused_by - self.related)
            raise ValueError(f"causal components not linked to the incident: {extra}")


class Backend(Protocol):
    name: str

    def classify(self, narrative: str) -> EbikeLabel: ...

    def factors(self, narrative: str) -> ExtractedFactors: ...

    def cause(self, narrative: str, factors: ExtractedFactors) -> CauseDetermination: ...

    def components(self, narrative: str) -> ComponentLinkage: ...


def _require_text(narrative):
    if narrative is None or not str(narrative).strip():
        raise ValueError("narrative is empty")


def classify_ebike(narrative: str, backend: Backend) -> EbikeLabel:
    _require_text(narrative)
    return EbikeLabel(backend.classify(narrative))


def extract_factors(narrative: str, backend: Backend) -> ExtractedFactors:
    _require_text(narrative)
    return backend.factors(narrative)


def determine_cause(narrative: str, factors: ExtractedFactors, backend: Backend) -> CauseDetermination:
    _require_text(narrative)
    return backend.cause(narrative, factors)


def detect_component_links(narrative: str, backend: Backend) -> ComponentLinkage:
    _require_text(narrative)
    return backend.components(narrative)


def _determination(labels, rules: RuleSet) -> CauseDetermination:
    labels = tuple(labels)
    if not labels:
        return CauseDetermination(UNCLEAR, CauseType.Unclear)
    return CauseDetermination(labels[0], cause_type_of(labels, rules), labels)


# ----------------------------------------------------------------- rules

_SENTENCE_END = re.compile(r"[.!?;]")
_WORD = re.compile(r"\w+")


class RuleBackend:
    """Keyword backend; every method is a pure function of its input."""

    name = "rules"

    def __init__(self, rules: RuleSet | None = None):
        self.rules = rules or default_rules()

    def classify(self, narrative):
        return EbikeLabel.yes if self.rules.ebike_regex.search(narrative) else EbikeLabel.no

    def _modes(self, narrative):
        found = self.rules.modes.all(narrative)
        absorbed = {m for owner in found for m in self.rules.mode_subsumes.get(owner, ())}
        return tuple(m for m in found if m not in absorbed)

    def _cause_raw(self, narrative):
        best = None
        for rule in self.rules.causes:
            for rx in rule.regexes:
                m = rx.search(narrative)
                if m and (best is None or m.start() < best.start()):
                    best = m
        return best.group(0).lower() if best else SENTINEL

    def factors(self, narrative):
        def first(name):
            return self.rules.field_vocabulary(name).first(narrative) or SENTINEL

        return ExtractedFactors(
            modes=self._modes(narrative),
            time_raw=first("time"),
            weather_raw=first("weather"),
            road_raw=first("road"),
            cause_raw=self._cause_raw(narrative),
        )

    def cause(self, narrative, factors):
        return _determination(match_causes(narrative, self.rules), self.rules)

    def _blank_exclusions(self, text):
        rx = self.rules.component_exclude
        if rx is None:
            return text
        # keep offsets stable so sentence and window logic see the same text
        return rx.sub(lambda m: " " * len(m.group(0)), text)

    def _near_failure(self, text, end):
        # Only verbs after the keyword count: "the seat detached from the
        # frame" blames the seat, not the frame.
        window = self.rules.failure_window
        for m in self.rules.failure_regex.finditer(text, end):
            gap = text[end:m.start()]
            if _SENTENCE_END.search(gap) or len(_WORD.findall(gap)) > window:
                return False
            return True
        return False

    def components(self, narrative):
        text = self._blank_exclusions(narrative)
        related, caused = set(), set()
        for component, rx in self.rules.components.items():
            for m in rx.finditer(text):
                related.add(component)
                if self._near_failure(text, m.end()):
                    caused.add(component)
                    break
        return ComponentLinkage(frozenset(related), frozenset(caused))


# ------------------------------------------------------------------- llm

_PROMPT_NAMES = ("classify", "modes", "time", "weather", "road", "cause",
                 "components", "component_cause", "reprompt")

_FORMATS = {
    "yesno": 'Answer with exactly one word: "yes" or "no".',
    "text": f"Reply with the requested words only, or exactly: {SENTINEL}.",
    "components": ("Reply with component names from the list separated by commas, "
                   'or exactly "none".'),
}

_YES_NO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_SENTINEL_HINTS = re.compile(
    r"no certain information|not (?:mentioned|specified|stated|provided)|\bunknown\b"
    r"|^\s*(?:none|n/?a|nothing)\s*\.?\s*$",
    re.IGNORECASE,
)
_LIST_SPLIT = re.compile(r"\s*(?:[,;\n]|\band\b)\s*", re.IGNORECASE)


def load_prompts(directory=None) -> dict[str, str]:
    """Read the prompt templates; ``directory`` overrides the packaged set."""
    out = {}
    for name in _PROMPT_NAMES:
        try:
            if directory is None:
                ref = resources.files("ebike_agents").joinpath(f"data/prompts/{name}.txt")
                out[name] = ref.read_text("utf-8")
            else:
                out[name] = (Path(directory) / f"{name}.txt").read_text("utf-8")
        except OSError as exc:
            raise ConfigurationError(f"missing prompt template {name!r}: {exc}") from exc
    return out


def render_prompt(template: str, **values) -> str:
    # plain replacement so braces inside narratives are left alone
    for key, value in values.items():
        template = template.replace("{" + key + "}", value)
    return template


def _clean(reply: str) -> str:
    text = reply.strip().strip("`").strip()
    text = text.strip("\"'[]() ").rstrip(".").strip("\"' ")
    return text


def parse_yes_no(reply: str) -> EbikeLabel | None:
    answers = {m.group(1).lower() for m in _YES_NO.finditer(reply or "")}
    if len(answers) != 1:
        return None
    return EbikeLabel(answers.pop())


def parse_text_field(reply: str) -> str | None:
    """Normalized field value, the sentinel, or ``None`` when unreadable."""
    if reply is None or not reply.strip():
        return None
    if _SENTINEL_HINTS.search(reply):
        return SENTINEL
    text = _clean(reply)
    if not text:
        return None
    return text.lower()


def parse_list(reply: str) -> list[str] | None:
    value = parse_text_field(reply)
    if value is None:
        return None
    if value == SENTINEL:
        return []
    items = [_clean(part).lower() for part in _LIST_SPLIT.split(value)]
    return list(dict.fromkeys(item for item in items if item))


def parse_components(reply: str) -> set | None:
    if reply is None or not reply.strip():
        return None
    if re.fullmatch(r"\s*[\"']?(none|no components?)[\"']?\s*\.?\s*", reply, re.IGNORECASE):
        return set()
    out = set()
    for part in _LIST_SPLIT.split(reply.strip().rstrip(".")):
        part = _clean(part)
        if not part:
            continue
        try:
            out.add(Component.parse(part))
        except ValueError:
            return None
    return out


class LLMBackend:
    """Zero-shot prompt backend over an :class:`~ebike_agents.llm_gateway.LLMGateway`.

    Every unreadable reply triggers one stricter reprompt; a second failure
    raises :class:`ExtractionError`.
    """

    name = "llm"

    def __init__(self, gateway, model_name: str = "gpt-4", prompt_dir=None,
                 rules: RuleSet | None = None, max_tokens: int = 128):
        self.gateway = gateway
        self.model_name = model_name
        self.prompts = load_prompts(prompt_dir)
        self.rules = rules or default_rules()
        self.max_tokens = max_tokens

    def _complete(self, prompt):
        from .llm_gateway import CompletionRequest

        request = CompletionRequest(prompt, self.model_name, 0.0, self.max_tokens)
        return self.gateway.complete(request).text

    def _ask(self, template, parser, fmt, **values):
        prompt = render_prompt(self.prompts[template], **values)
        reply = self._complete(prompt)
        parsed = parser(reply)
        if parsed is not None:
            return parsed
        strict = prompt.rstrip() + "\n\n" + render_prompt(self.prompts["reprompt"], format=_FORMATS[fmt])
        reply = self._complete(strict)
        parsed = parser(reply)
        if parsed is None:
            raise ExtractionError(f"unreadable reply to {template!r} prompt: {reply[:120]!r}")
        return parsed

    def classify(self, narrative):
        return self._ask("classify", parse_yes_no, "yesno", narrative=narrative)

    def factors(self, narrative):
        modes = self._ask("modes", parse_list, "text", narrative=narrative)
        values = {name: self._ask(name, parse_text_field, "text", narrative=narrative)
                  for name in ("time", "weather", "road", "cause")}
        return ExtractedFactors(
            modes=tuple(modes),
            time_raw=values["time"],
            weather_raw=values["weather"],
            road_raw=values["road"],
            cause_raw=values["cause"],
        )

    def cause(self, narrative, factors):
        if factors.cause_raw == SENTINEL:
            return _determination((), self.rules)
        return _determination(match_causes(factors.cause_raw, self.rules), self.rules)

    def components(self, narrative):
        related = self._ask("components", parse_components, "components", narrative=narrative)
        caused = set()
        for component in Component.ordered(related):
            answer = self._ask("component_cause", parse_yes_no, "yesno",
                               narrative=narrative, component=component.display_name)
            if answer is EbikeLabel.yes:
                caused.add(component)
        return ComponentLinkage(frozenset(related), frozenset(caused))


# -------------------------------------------------------------- pipeline

@dataclass(frozen=True)
class RunSummary:
    total: int = 0
    ebike_yes: int = 0
    ebike_no: int = 0
    extraction_errors: int = 0
    excluded: int = 0
    backend: str = ""
    rules_version: str = ""

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "ebike_yes": self.ebike_yes,
            "ebike_no": self.ebike_no,
            "extraction_errors": self.extraction_errors,
            "excluded": self.excluded,
            "backend": self.backend,
            "rules_version": self.rules_version,
        }

    def __str__(self):
        return (f"total={self.total} ebike_yes={self.ebike_yes} ebike_no={self.ebike_no} "
                f"extraction_errors={self.extraction_errors} excluded={self.excluded}")


_RECORD_ERRORS = (ExtractionError, ProtocolError, TransportError, ValueError)


def _base_record(report) -> StructuredIncident:
    return StructuredIncident(
        record_id=report.record_id,
        year=report.year,
        state=report.state,
        age_years=report.age_years,
        gender_raw=report.gender_raw,
        severity_code=report.severity_code,
    )


def process_report(report, backend: Backend, rules: RuleSet | None = None) -> StructuredIncident:
    """Run all stages on one report; failures are recorded on the result."""
    rules = rules or default_rules()
    record = _base_record(report)
    try:
        label = classify_ebike(report.narrative, backend)
        record.is_ebike = label.value
        if label is EbikeLabel.no:
            return record
        factors = extract_factors(report.narrative, backend)
        cause = determine_cause(report.narrative, factors, backend)
        links = detect_component_links(report.narrative, backend)
    except _RECORD_ERRORS as exc:
        record.status = "error"
        record.error = f"{type(exc).__name__}: {exc}"
        logger.warning("record %s: %s", report.record_id, record.error)
        return record

    record.modes = list(factors.modes)
    record.modes_count = factors.modes_count
    record.time_raw = factors.time_raw
    record.weather_raw = factors.weather_raw
    record.road_raw = factors.road_raw
    record.cause_raw = factors.cause_raw
    record.cause_label = cause.cause_label
    record.cause_type = cause.cause_type.value
    record.components_related = [c.value for c in Component.ordered(links.related)]
    record.components_caused = [c.value for c in Component.ordered(links.caused_by)]
    try:
        record.predictors = build_predictor_vector(record, rules).to_dict()
    except RecordExcluded as exc:
        record.excluded_reason = str(exc)
    return record


def run_pipeline(reports: Sequence, backend: Backend, jobs: int = 1,
                 rules: RuleSet | None = None):
    """Process ``reports`` with up to ``jobs`` workers.

    Returns ``(records, summary)`` with records in input order.
    """
    if jobs < 1:
        raise ConfigurationError(f"jobs must be at least 1, got {jobs}")
    rules = rules or getattr(backend, "rules", None) or default_rules()
    reports = list(reports)
    if jobs == 1 or len(reports) < 2:
        records = [process_report(r, backend, rules) for r in reports]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(lambda r: process_report(r, backend, rules), reports))
    summary = RunSummary(
        total=len(records),
        ebike_yes=sum(r.is_ebike == "yes" for r in records),
        ebike_no=sum(r.is_ebike == "no" for r in records),
        extraction_errors=sum(r.status == "error" for r in records),
        excluded=sum(r.excluded_reason is not None for r in records),
        backend=getattr(backend, "name", type(backend).__name__),
        rules_version=rules.version,
    )
    return records, summary
