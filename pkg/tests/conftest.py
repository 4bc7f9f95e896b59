import json
import re
import threading
from pathlib import Path

import pytest

from ebike_agents.agents import RuleBackend
from ebike_agents.llm_gateway import HttpResponse
from ebike_agents.records import SENTINEL, Component

FIXTURES = Path(__file__).parent / "fixtures"

# (class, TP, FP, FN, expected precision, recall, F1 at two decimals)
CAUSED_BY_TABLE = [
    ("Brake System", 23, 1, 8, 0.96, 0.74, 0.84),
    ("Pedal", 91, 0, 23, 1.00, 0.80, 0.89),
    ("Wheel/Tire", 37, 3, 3, 0.93, 0.93, 0.93),
    ("Seat", 1, 0, 2, 1.00, 0.33, 0.50),
    ("Front Fork", 11, 1, 4, 0.92, 0.73, 0.81),
    ("Visibility Issues", 4, 2, 0, 0.67, 1.00, 0.80),
    ("Drive Belt/Chain", 4, 1, 0, 0.80, 1.00, 0.89),
    ("Bicycle Frame", 5, 0, 2, 1.00, 0.71, 0.83),
    ("Steering System", 6, 0, 4, 1.00, 0.60, 0.75),
]

# Reference log-likelihoods for the model comparison.
LL_NULL = -460.975
LL_FULL = -415.278
LL_RESTRICTED = -424.859
N_OBS = 306

EXAMPLE_NARRATIVES = {
    "modes": ("A 66-year-old male riding an electric bicycle eastbound on a road was seriously "
              "injured after colliding with a southbound vehicle at the intersection."),
    "time": ("73-year-old male died after crashing his electric bicycle. He was riding his bike "
             "when he hit a speed bump. He went airborne, then landed and crashed. He was taken "
             "to mc where he was pronounced dead later that afternoon."),
    "weather": ("2 people on the bike and truck driver were headed in the same direction on a "
                "road when it rained."),
    "cause": ("A 39-year-old male has died in a bicycle crash. He was riding an electric bike "
              "when he lost control and hit a bridge railing."),
}


@pytest.fixture
def narratives_csv():
    return FIXTURES / "narratives.csv"


@pytest.fixture
def expected_labels():
    return json.loads((FIXTURES / "expected_labels.json").read_text())


def completion_body(text):
    return json.dumps({"choices": [{"message": {"role": "assistant", "content": text}}]})


class StubTransport:
    """Scripted transport: ``responder(body) -> HttpResponse | Exception``."""

    def __init__(self, responder):
        self.responder = responder
        self.calls = []
        self._lock = threading.Lock()

    def post(self, url, headers, body, timeout):
        with self._lock:
            self.calls.append(body)
        out = self.responder(body)
        if isinstance(out, BaseException):
            raise out
        return out


def ok(text):
    return HttpResponse(200, completion_body(text))


class FakeClock:
    def __init__(self):
        self.now = 0.0
        self.sleeps = []

    def __call__(self):
        return self.now

    def sleep(self, seconds):
        self.sleeps.append(seconds)
        self.now += seconds


_RULES = RuleBackend()


def rule_oracle(body):
    """Answer each prompt the way the rule backend would."""
    prompt = body["messages"][0]["content"]
    text = re.search(r'(?i)incident: "(.*?)"(?:\n|$)', prompt, re.S).group(1)
    if "related to an e-bike" in prompt:
        return ok(_RULES.classify(text).value)
    links = _RULES.components(text)
    if "components related" in prompt:
        names = [c.display_name for c in Component.ordered(links.related)]
        return ok(", ".join(names) or "none")
    if "caused by a problem" in prompt:
        name = re.search(r"e-bike's (.*?)\?", prompt).group(1)
        return ok("yes" if Component.parse(name) in links.caused_by else "no")
    f = _RULES.factors(text)
    if "transportation modes" in prompt:
        return ok(", ".join(f.modes) or SENTINEL)
    for key, value in (("time information", f.time_raw), ("weather information", f.weather_raw),
                       ("road condition", f.road_raw), ("incident cause", f.cause_raw)):
        if key in prompt:
            return ok(value)
    return HttpResponse(500, "unexpected prompt")


# criterion number -> (passed, title, seconds); filled by the acceptance suite
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, title, seconds = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  "
                                    f"{title} ({seconds:.2f} s)")
