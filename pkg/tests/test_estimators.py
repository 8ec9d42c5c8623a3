import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.metrics import accuracy_score
from sklearn.pipeline import make_pipeline

from buildmend.estimators import UNCLASSIFIED, DiagnosticExtractor, FirstFatalErrorClassifier
from buildmend.logparse import DiagnosticRecord

from conftest import FIXTURES, LOG_DIR

GOLDEN = json.loads((FIXTURES / "classify" / "golden.json").read_text())


def golden_records():
    return [DiagnosticRecord(e["diagnostic"]["tool"], e["diagnostic"]["file"], e["diagnostic"]["line"], None,
                             e["diagnostic"]["message"], e["diagnostic"]["severity"], [], [], "test", 0)
            for e in GOLDEN if e["phase"] in ("compilation", "linking")]


def test_extractor_returns_first_fatal():
    logs = [(LOG_DIR / "toy_ci.log").read_bytes(), b"all good\n"]
    out = DiagnosticExtractor().fit(logs).transform(logs)
    assert out.shape == (2,) and "LED_BLUE" in out[0].message and out[1] is None


def test_classifier_on_logs():
    logs = [(LOG_DIR / "toy_ci.log").read_text(), "nothing failed here"]
    pred = FirstFatalErrorClassifier().fit(logs).predict(logs)
    assert list(pred) == ["hardware-dependency", UNCLASSIFIED]


def test_classifier_matches_rules_on_golden():
    entries = [e for e in GOLDEN if e["phase"] in ("compilation", "linking")]
    X = golden_records()
    y = [e["expected"] for e in entries]
    model = FirstFatalErrorClassifier().fit(X, y)
    assert accuracy_score(y, model.predict(X)) >= 0.9
    assert set(model.classes_) >= set(y)


def test_not_fitted_and_bad_input():
    with pytest.raises(NotFittedError):
        FirstFatalErrorClassifier().predict(["x"])
    with pytest.raises(ValueError):
        FirstFatalErrorClassifier().fit("a single log")
    with pytest.raises(ValueError):
        FirstFatalErrorClassifier().fit(["a"], ["x", "y"])


def test_clone_and_params():
    est = FirstFatalErrorClassifier(rules_dir=None)
    assert clone(est).get_params() == est.get_params()


def test_pipeline_and_numpy_input():
    logs = np.array([(LOG_DIR / "toy_ci.log").read_text()], dtype=object)
    pipe = make_pipeline(DiagnosticExtractor(), FirstFatalErrorClassifier())
    pred = pipe.fit(logs).predict(logs)
    assert list(pred) == ["hardware-dependency"]
