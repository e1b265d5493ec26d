import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)


TINY_OVERRIDES = [
    "model.id_dim=16", "model.audio_dim=16", "model.au_dim=4",
    "tcsan.group=4", "tcsan.out=16", "tcsan.heads=2", "tcsan.layers=2",
    "model.enc_channels=4,4,8,8", "model.audio_channels=4,4,8,8,8",
    "model.a2au_conv=4", "model.a2au_hidden=8", "model.a2au_fc=8",
    "model.auclf_channels=4,4", "model.auclf_hidden=8,8", "model.per_channels=4,4,8,8",
    "pretrain.steps=6", "pretrain.batch=8", "train.log_every=0",
]


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

import pytest

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    """Attach a measured-value note to the current criterion's summary line."""
    notes = []
    request.node.user_properties.append(("details", notes))
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    if rep.failed or (rep.when == "call" and rep.skipped):
        entry["ok"] = False
    if rep.when == "call":
        for key, notes in item.user_properties:
            if key == "details":
                entry["details"] += notes


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        extra = f"  [{'; '.join(e['details'])}]" if e["details"] else ""
        terminalreporter.write_line(f"criterion {number:>2} {status}: {e['title']}{extra}")
