"""scikit-learn compatible wrappers around log parsing and classification.

Both estimators are stateless apart from the registries they load in ``fit``,
so they drop into pipelines and cross-validation helpers unchanged."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .classify import CATEGORIES, ClassifyContext, RuleSet, classify, infer_build_phase
from .core import RawLog
from .errors import NoFatalErrorError, PreconditionError, UnclassifiedError
from .logparse import DiagnosticRecord, PatternRegistry, detect_build_system, extract_diagnostics, first_fatal, normalize

UNCLASSIFIED = "unclassified"


def _as_sequence(X, name="X"):
    if isinstance(X, (str, bytes, RawLog, DiagnosticRecord)):
        raise ValueError(f"{name} must be a sequence of samples, not a single sample")
    try:
        items = list(X.ravel()) if isinstance(X, np.ndarray) else list(X)
    except TypeError as exc:
        raise ValueError(f"{name} must be iterable") from exc
    return items


def _as_raw(item) -> RawLog:
    if isinstance(item, RawLog):
        return item
    if isinstance(item, bytes):
        return RawLog(item)
    if isinstance(item, str):
        return RawLog(item.encode("utf-8"))
    raise ValueError(f"cannot interpret {type(item).__name__} as a build log")


class DiagnosticExtractor(TransformerMixin, BaseEstimator):
    """Maps raw build logs to their first fatal diagnostic (None when there is none)."""

    def __init__(self, patterns_dir=None):
        self.patterns_dir = patterns_dir

    def fit(self, X, y=None):
        _as_sequence(X)
        self.registry_ = (PatternRegistry.from_directory(self.patterns_dir) if self.patterns_dir
                          else PatternRegistry.builtin())
        self.n_patterns_ = len(self.registry_)
        return self

    def _first(self, item):
        norm = normalize(_as_raw(item))
        diags = extract_diagnostics(norm, detect_build_system(norm), self.registry_)
        try:
            return first_fatal(diags), norm
        except (PreconditionError, NoFatalErrorError):
            return None, norm

    def transform(self, X):
        check_is_fitted(self, "registry_")
        items = _as_sequence(X)
        out = np.empty(len(items), dtype=object)
        for i, item in enumerate(items):
            out[i] = self._first(item)[0]
        return out


class FirstFatalErrorClassifier(ClassifierMixin, BaseEstimator):
    """Predicts the error category of each build log (or pre-extracted diagnostic).

    Samples the rules cannot place are predicted as ``"unclassified"``."""

    def __init__(self, rules_dir=None, patterns_dir=None):
        self.rules_dir = rules_dir
        self.patterns_dir = patterns_dir

    def fit(self, X, y=None):
        items = _as_sequence(X)
        if y is not None and len(_as_sequence(y, "y")) != len(items):
            raise ValueError("X and y have different lengths")
        self.rules_ = RuleSet.from_directory(self.rules_dir) if self.rules_dir else RuleSet.builtin()
        self.extractor_ = DiagnosticExtractor(self.patterns_dir).fit(items)
        self.classes_ = np.array(CATEGORIES + (UNCLASSIFIED,), dtype=object)
        return self

    def _predict_one(self, item) -> str:
        if isinstance(item, DiagnosticRecord):
            diag = item
            phase = {"linker": "linking", "configure": "configuration"}.get(diag.tool, "compilation")
        else:
            diag, norm = self.extractor_._first(item)
            if diag is None:
                return UNCLASSIFIED
            phase = infer_build_phase(diag, norm)
        try:
            return classify(diag, phase, ClassifyContext(), self.rules_).category
        except UnclassifiedError:
            return UNCLASSIFIED

    def predict(self, X):
        check_is_fitted(self, "rules_")
        items = _as_sequence(X)
        return np.array([self._predict_one(item) for item in items], dtype=object)
