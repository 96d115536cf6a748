"""Manifest text cleaning, the 4-column dataset, splits, and a synthetic corpus."""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    BadLabel,
    CategoryOnBenign,
    DatasetError,
    MissingColumn,
    StratumTooSmall,
    UnknownCategory,
)

CATEGORIES = (
    "adware",
    "spyware",
    "ransomware",
    "clicker",
    "dropper",
    "downloader",
    "riskware",
    "sms-sender",
    "horse-trojan",
    "backdoor",
    "banker",
)
COLUMNS = ("id", "text", "label", "category")


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    text: str
    label: int
    category: str | None = None

    def __post_init__(self):
        check_record(self.id, self.label, self.category)

    @property
    def class_name(self) -> str:
        return self.category if self.category else ("malware" if self.label else "benign")


def check_record(id_, label, category, row=None):
    if not id_:
        raise DatasetError("empty id", row)
    if label not in (0, 1):
        raise BadLabel(f"label must be 0 or 1, got {label!r}", row)
    if category is not None:
        if category not in CATEGORIES:
            raise UnknownCategory(f"unknown category {category!r}", row)
        if label != 1:
            raise CategoryOnBenign(f"benign record carries category {category!r}", row)


# ---------------------------------------------------------------- cleaning

@dataclass(frozen=True)
class CleaningConfig:
    """Lexicon plus the fixed character policies.

    Punctuation becomes whitespace; digits and letter case are always kept,
    so those two policies are read-only properties rather than fields.
    """

    lexicon: frozenset = field(default_factory=frozenset)

    @property
    def punctuation_policy(self) -> str:
        return "replace-with-space"

    @property
    def digit_policy(self) -> str:
        return "preserve"

    @property
    def case_policy(self) -> str:
        return "preserve"


def parse_lexicon(text: str) -> frozenset:
    terms = set()
    for line in text.splitlines():
        term = line.split("#", 1)[0].strip()
        if term:
            terms.add(term)
    return frozenset(terms)


def load_lexicon(path) -> frozenset:
    return parse_lexicon(Path(path).read_text(encoding="utf-8"))


def default_config() -> CleaningConfig:
    text = resources.files("apkbert").joinpath("data/lexicon.txt").read_text(encoding="utf-8")
    return CleaningConfig(lexicon=parse_lexicon(text))


def clean_text(raw: str, config: CleaningConfig | None = None) -> str:
    if config is None:
        config = CleaningConfig()
    spaced = "".join(ch if ch.isalpha() or ch.isdigit() else " " for ch in raw)
    return " ".join(tok for tok in spaced.split() if tok not in config.lexicon)


# ---------------------------------------------------------------- CSV io

def read_dataset(path) -> list[DatasetRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MissingColumn(f"dataset header lacks {', '.join(missing)}")
        records = []
        for row in reader:
            line = reader.line_num
            raw_label = (row["label"] or "").strip()
            try:
                label = int(raw_label)
            except ValueError:
                raise BadLabel(f"label must be 0 or 1, got {raw_label!r}", line) from None
            category = (row["category"] or "").strip() or None
            check_record(row["id"], label, category, line)
            records.append(DatasetRecord(row["id"], row["text"], label, category))
    return records


def write_dataset(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in records:
            writer.writerow([r.id, r.text, r.label, r.category or ""])


# ---------------------------------------------------------------- splitting

def _stratum(r: DatasetRecord):
    return (r.label, r.category or "")


def split_train_test(records, test_fraction: float = 0.2, seed: int = 0):
    """Stratified split on (label, category); both parts keep input order."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    records = list(records)
    if not records:
        raise ValueError("cannot split an empty record list")
    strata: dict = {}
    for i, r in enumerate(records):
        strata.setdefault(_stratum(r), []).append(i)
    rng = np.random.default_rng(seed)
    test_idx = set()
    for key in sorted(strata):
        members = strata[key]
        if len(members) < 2:
            warnings.warn(f"stratum {key} has {len(members)} record(s); kept in train", StratumTooSmall)
            continue
        n_test = min(int(np.floor(len(members) * test_fraction + 0.5)), len(members) - 1)
        chosen = rng.permutation(len(members))[:n_test]
        test_idx.update(members[j] for j in chosen)
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test


# ---------------------------------------------------------------- synthetic corpus

SYNTH_CLASSES = ("benign",) + CATEGORIES

_BOILERPLATE = (
    "manifest package android name permission uses INTERNET ACCESS NETWORK STATE "
    "application label icon theme activity intent filter action MAIN category "
    "LAUNCHER service receiver provider exported true false sdk minSdkVersion "
    "targetSdkVersion versionCode versionName allowBackup supportsRtl meta data "
    "value string mipmap style AppTheme WAKE LOCK VIBRATE RECEIVE BOOT COMPLETED"
).split()
_SIG_KINDS = ("Activity", "Service", "Receiver", "Provider", "Permission", "Action", "Api", "Meta")


@dataclass(frozen=True)
class VocabProfile:
    signature_per_class: int = 12
    boilerplate: int = 60
    min_tokens: int = 24
    max_tokens: int = 48
    signature_share: float = 0.25


def _camel(name: str) -> str:
    return "".join(part.capitalize() for part in name.split("-"))


def signature_tokens(profile: VocabProfile | None = None) -> dict[str, list[str]]:
    """Class name -> that class's private tokens (disjoint across classes)."""
    profile = profile or VocabProfile()
    return {
        c: [f"{_camel(c)}{_SIG_KINDS[k % len(_SIG_KINDS)]}{k}" for k in range(profile.signature_per_class)]
        for c in SYNTH_CLASSES
    }


def boilerplate_tokens(profile: VocabProfile | None = None) -> list[str]:
    profile = profile or VocabProfile()
    base = list(_BOILERPLATE[: profile.boilerplate])
    base += [f"Common{k}" for k in range(profile.boilerplate - len(base))]
    return base


def synthesize_corpus(n_per_class: int, vocab_profile: VocabProfile | None = None,
                      noise_rate: float = 0.0, seed: int = 0) -> list[DatasetRecord]:
    """Manifest-like records for benign plus the 11 categories.

    Each record mixes shared boilerplate with its class's signature tokens
    (at least one is always planted), after which every token is replaced by
    a uniform draw from the global vocabulary with probability ``noise_rate``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if not 0.0 <= noise_rate < 1.0:
        raise ValueError("noise_rate must lie in [0, 1)")
    profile = vocab_profile or VocabProfile()
    sigs = signature_tokens(profile)
    boiler = boilerplate_tokens(profile)
    vocab = boiler + [t for c in SYNTH_CLASSES for t in sigs[c]]
    rng = np.random.default_rng(seed)
    records = []
    for cls in SYNTH_CLASSES:
        own = sigs[cls]
        for i in range(n_per_class):
            length = int(rng.integers(profile.min_tokens, profile.max_tokens + 1))
            is_sig = rng.random(length) < profile.signature_share
            is_sig[int(rng.integers(length))] = True
            sig_pick = rng.integers(len(own), size=length)
            boil_pick = rng.integers(len(boiler), size=length)
            tokens = [own[s] if flag else boiler[b] for flag, s, b in zip(is_sig, sig_pick, boil_pick)]
            noisy = rng.random(length) < noise_rate
            noise_pick = rng.integers(len(vocab), size=length)
            tokens = [vocab[n] if flip else t for t, flip, n in zip(tokens, noisy, noise_pick)]
            rid = hashlib.sha256(f"synth:{seed}:{cls}:{i}".encode()).hexdigest()
            label = 0 if cls == "benign" else 1
            records.append(DatasetRecord(rid, " ".join(tokens), label, None if label == 0 else cls))
    return records
