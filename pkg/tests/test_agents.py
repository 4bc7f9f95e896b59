import json
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import EXAMPLE_NARRATIVES, StubTransport, ok, rule_oracle
from ebike_agents.agents import (ComponentLinkage, EbikeLabel, ExtractedFactors, LLMBackend,
                                 RuleBackend, classify_ebike, detect_component_links,
                                 determine_cause, extract_factors, parse_components, parse_list,
                                 parse_text_field, parse_yes_no, render_prompt, run_pipeline)
from ebike_agents.exceptions import ExtractionError
from ebike_agents.ingest import IncidentReport, load_reports, write_structured
from ebike_agents.llm_gateway import HttpResponse, LLMGateway, ResponseCache, RetryPolicy
from ebike_agents.records import SENTINEL, CauseType, Component

RULES = RuleBackend()


# -------------------------------------------------------------- rule backend

@pytest.mark.parametrize("text, label", [
    (EXAMPLE_NARRATIVES["modes"], "yes"),
    ("Child fell from a kick scooter in the driveway", "no"),
    ("EBIKE caught fire", "yes"),
    ("rode a Pedal-Assist bike", "yes"),
    ("electric bikes were parked", "yes"),
    ("the rider's bike pedal broke", "no"),
])
def test_classify(text, label):
    assert classify_ebike(text, RULES) is EbikeLabel(label)


def test_empty_narrative_is_precondition_error():
    for op in (classify_ebike, extract_factors, detect_component_links):
        with pytest.raises(ValueError):
            op("  ", RULES)


def test_prompt_examples():
    assert extract_factors(EXAMPLE_NARRATIVES["modes"], RULES).modes == ("electric bicycle",)
    assert extract_factors(EXAMPLE_NARRATIVES["time"], RULES).time_raw == "afternoon"
    assert extract_factors(EXAMPLE_NARRATIVES["weather"], RULES).weather_raw == "rainy"
    cause_text = EXAMPLE_NARRATIVES["cause"]
    factors = extract_factors(cause_text, RULES)
    assert factors.cause_raw == "crash"
    cause = determine_cause(cause_text, factors, RULES)
    assert cause.cause_label in ("LostControl", "CollisionOrCrash")
    assert cause.cause_type is CauseType.HumanRelated


def test_absent_information_gives_sentinel():
    f = extract_factors("Rider bruised elbow at home", RULES)
    assert (f.time_raw, f.weather_raw, f.road_raw, f.cause_raw) == (SENTINEL,) * 4
    assert f.modes == () and f.modes_count == 0


def test_modes_deduplicated_and_subsumed():
    f = extract_factors("He crashed his e-bike. The bike and a car and another car were damaged.", RULES)
    assert f.modes == ("electric bicycle", "car")
    assert f.modes_count == 2
    assert ExtractedFactors(modes=("car", "car", "bus")).modes_count == 2


@pytest.mark.parametrize("text, label, kind", [
    ("battery exploded while charging", "BatteryIssue", CauseType.EquipmentRelated),
    ("brake cable snapped and he collided with a car", "CollisionOrCrash", CauseType.Both),
    ("rider fainted", "Unclear", CauseType.Unclear),
    ("was speeding and lost control", "LostControl", CauseType.HumanRelated),
])
def test_determine_cause(text, label, kind):
    cause = determine_cause(text, extract_factors(text, RULES), RULES)
    assert (cause.cause_label, cause.cause_type) == (label, kind)


@pytest.mark.parametrize("text, related, caused", [
    ("the brake pads failed on a descent", {"BrakeSystem"}, {"BrakeSystem"}),
    ("gripped the handlebar and braked hard, hit a pothole", {"SteeringSystem", "BrakeSystem"}, set()),
    ("rider fainted", set(), set()),
    ("The chain snapped. He then hit the frame.", {"DriveSystem", "Frame"}, {"DriveSystem"}),
    ("the seat detached from the frame", {"SaddleSeat", "Frame"}, {"SaddleSeat"}),
    ("the brake. It failed much later", {"BrakeSystem"}, set()),
    ("riding a pedal-assist bike with a seat belt", set(), set()),
])
def test_component_links(text, related, caused):
    links = detect_component_links(text, RULES)
    assert {c.value for c in links.related} == related
    assert {c.value for c in links.caused_by} == caused


def test_linkage_invariant_enforced():
    with pytest.raises(ValueError):
        ComponentLinkage(frozenset(), frozenset({Component.Frame}))


WORDS = ["brake", "chain", "seat", "frame", "snapped", "failed", "broke", "came off", "the", "rider",
         "fell", ".", "pedal", "wheel", "fork", "lamp", "caught fire", "pedal-assist", "wet", "night"]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(WORDS), max_size=25))
def test_caused_subset_of_related_and_pure(words):
    text = " ".join(words) or "x"
    a = detect_component_links(text, RULES)
    assert a.caused_by <= a.related
    assert a == detect_component_links(text, RuleBackend())
    assert extract_factors(text, RULES) == extract_factors(text, RULES)


# ------------------------------------------------------------ fixture corpus

def test_fixture_corpus_labels(narratives_csv, expected_labels):
    records, summary = run_pipeline(load_reports(narratives_csv).reports, RULES)
    assert len(records) == len(expected_labels) == 40
    assert (summary.ebike_yes, summary.ebike_no, summary.extraction_errors) == (32, 8, 0)
    for rec in records:
        want = expected_labels[rec.record_id]
        assert rec.is_ebike == want["is_ebike"], rec.record_id
        if rec.is_ebike == "no":
            assert rec.modes == [] and rec.cause_raw is None and rec.predictors is None
            continue
        got = {
            "modes": rec.modes, "time_raw": rec.time_raw, "weather_raw": rec.weather_raw,
            "road_raw": rec.road_raw, "cause_raw": rec.cause_raw, "cause_label": rec.cause_label,
            "cause_type": rec.cause_type, "components_related": rec.components_related,
            "components_caused": rec.components_caused,
            "predictors": None if rec.predictors is None else list(rec.predictors.values()),
            "excluded_reason": rec.excluded_reason,
        }
        assert got == {k: v for k, v in want.items() if k != "is_ebike"}, rec.record_id


class CountingBackend(RuleBackend):
    def __init__(self):
        super().__init__()
        self.calls = []
        self._lock = threading.Lock()

    def _log(self, stage, text):
        with self._lock:
            self.calls.append((stage, text))

    def classify(self, narrative):
        self._log("classify", narrative)
        return super().classify(narrative)

    def factors(self, narrative):
        self._log("factors", narrative)
        return super().factors(narrative)

    def cause(self, narrative, factors):
        self._log("cause", narrative)
        return super().cause(narrative, factors)

    def components(self, narrative):
        self._log("components", narrative)
        return super().components(narrative)


def test_gating(narratives_csv):
    reports = load_reports(narratives_csv).reports
    backend = CountingBackend()
    records, summary = run_pipeline(reports, backend, jobs=4)
    no_texts = {r.narrative for r, rec in zip(reports, records) if rec.is_ebike == "no"}
    downstream = [(s, t) for s, t in backend.calls if s != "classify"]
    assert not [t for _, t in downstream if t in no_texts]
    assert sum(s == "classify" for s, _ in backend.calls) == len(reports)
    for stage in ("factors", "cause", "components"):
        assert sum(s == stage for s, _ in backend.calls) == summary.ebike_yes


def test_order_and_cardinality_with_workers(narratives_csv):
    reports = load_reports(narratives_csv).reports
    serial, _ = run_pipeline(reports, RULES, jobs=1)
    parallel, _ = run_pipeline(reports, RULES, jobs=8)
    assert [r.record_id for r in parallel] == [r.record_id for r in reports]
    assert [r.to_dict() for r in parallel] == [r.to_dict() for r in serial]


def test_error_records_are_emitted():
    reports = [IncidentReport("A", 2020, "", "", 30, "Male", 3),
               IncidentReport("B", 2020, "", "ebike crash", 30, "Male", 3)]
    records, summary = run_pipeline(reports, RULES)
    assert [r.record_id for r in records] == ["A", "B"]
    assert records[0].status == "error" and "empty" in records[0].error
    assert summary.extraction_errors == 1 and summary.total == 2


def test_all_no_corpus():
    reports = [IncidentReport(str(i), 2020, "", "a dog bit a jogger", 30, "Male", 2) for i in range(5)]
    records, summary = run_pipeline(reports, RULES)
    assert summary.ebike_no == 5
    for r in records:
        assert r.is_ebike == "no" and r.modes_count == 0 and r.components_related == []


# ---------------------------------------------------------------- llm backend

@pytest.mark.parametrize("reply, expected", [
    ("yes", "yes"), ("No.", "no"), ("YES, it mentions an e-bike", "yes"),
    ("The answer is no", "no"), ("maybe", None), ("yes or no", None), ("", None),
])
def test_parse_yes_no(reply, expected):
    got = parse_yes_no(reply)
    assert (got.value if got else None) == expected


def test_parse_fields():
    assert parse_text_field("'afternoon'") == "afternoon"
    assert parse_text_field(SENTINEL + ".") == SENTINEL
    assert parse_text_field("Not mentioned") == SENTINEL
    assert parse_text_field("None") == SENTINEL
    assert parse_text_field("   ") is None
    assert parse_list("'electric bicycle', 'car' and truck") == ["electric bicycle", "car", "truck"]
    assert parse_list(SENTINEL) == []
    assert parse_components("Brake System, Wheel/Tire") == {Component.BrakeSystem, Component.WheelTire}
    assert parse_components("none") == set()
    assert parse_components("the kickstand") is None


def test_render_prompt_leaves_other_braces():
    assert render_prompt('x "{narrative}"', narrative="a {b} c") == 'x "a {b} c"'


def llm_backend(responder, cache_path=None):
    gw = LLMGateway("http://stub", "key", cache=ResponseCache(cache_path),
                    policy=RetryPolicy(requests_per_minute=0, max_in_flight=4),
                    transport=StubTransport(responder))
    return LLMBackend(gw)


def test_llm_backend_matches_rules_on_fixture(narratives_csv):
    reports = load_reports(narratives_csv).reports
    llm_records, summary = run_pipeline(reports, llm_backend(rule_oracle), jobs=4)
    rule_records, _ = run_pipeline(reports, RULES)
    assert summary.extraction_errors == 0
    for a, b in zip(llm_records, rule_records):
        assert (a.is_ebike, a.modes, a.time_raw, a.weather_raw, a.road_raw) == \
               (b.is_ebike, b.modes, b.time_raw, b.weather_raw, b.road_raw), a.record_id
        assert (a.components_related, a.components_caused) == (b.components_related, b.components_caused)
        if a.cause_raw not in (None, SENTINEL):
            assert a.cause_type != "Unclear"


def test_llm_gating(narratives_csv):
    reports = load_reports(narratives_csv).reports
    backend = llm_backend(rule_oracle)
    records, _ = run_pipeline(reports, backend)
    no_texts = [r.narrative for r, rec in zip(reports, records) if rec.is_ebike == "no"]
    for body in backend.gateway.transport.calls:
        prompt = body["messages"][0]["content"]
        if "related to an e-bike" not in prompt:
            assert not any(t in prompt for t in no_texts)


def test_llm_reprompt_then_error():
    replies = iter(["perhaps", "yes"])
    backend = llm_backend(lambda body: ok(next(replies)))
    assert backend.classify("ebike crash") is EbikeLabel.yes
    assert "could not be read" in backend.gateway.transport.calls[1]["messages"][0]["content"]

    backend = llm_backend(lambda body: ok("I am not sure"))
    with pytest.raises(ExtractionError):
        backend.classify("ebike crash")
    assert len(backend.gateway.transport.calls) == 2


def test_llm_errors_recorded_per_record():
    def responder(body):
        prompt = body["messages"][0]["content"]
        if "related to an e-bike" in prompt:
            return ok("yes")
        return ok("")  # unreadable everywhere else

    reports = [IncidentReport("A", 2020, "", "ebike crash", 30, "Male", 3)]
    records, summary = run_pipeline(reports, llm_backend(responder))
    assert records[0].status == "error" and "ExtractionError" in records[0].error
    assert summary.extraction_errors == 1


def test_llm_transport_failure_recorded():
    reports = [IncidentReport("A", 2020, "", "ebike crash", 30, "Male", 3)]
    backend = llm_backend(lambda body: HttpResponse(400, "bad request"))
    records, summary = run_pipeline(reports, backend)
    assert records[0].status == "error" and "TransportError" in records[0].error


def test_warm_cache_run_is_identical(narratives_csv, tmp_path):
    reports = load_reports(narratives_csv).reports
    cache = tmp_path / "cache.jsonl"
    first, _ = run_pipeline(reports, llm_backend(rule_oracle, cache), jobs=4)
    offline = llm_backend(lambda body: HttpResponse(503, "offline"), cache)
    second, _ = run_pipeline(reports, offline, jobs=3)
    assert offline.gateway.transport.calls == []
    write_structured(first, tmp_path / "a.jsonl")
    write_structured(second, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])["record_id"] == "N01"
