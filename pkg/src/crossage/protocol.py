"""Trial protocol construction: cross-age positives, cohort-constrained
negatives, named presets, statistics, and trial-list serialization.

Trial list format follows the VoxCeleb convention, one trial per line:
``<label> <enroll> <test>`` with label 1 (target) / 0 (nontarget) and
utterance keys written as ``speaker/segment/utterance``.
"""

import math
import random
import warnings
from dataclasses import dataclass

from .metadata import speaker_age_spans

POSITIVE_RULES = ("random", "cross_segment", "cross_age", "intra_segment")
NEGATIVE_RULES = ("random", "same_nationality_gender", "same_nationality",
                  "same_gender")


class ProtocolError(ValueError):
    """Raised when a protocol cannot be built or parsed."""


@dataclass(frozen=True)
class Trial:
    label: str  # "target" | "nontarget"
    enroll: str  # speaker/segment/utterance key
    test: str
    age_gap: float = None

    @property
    def is_target(self) -> bool:
        return self.label == "target"


@dataclass(frozen=True)
class ProtocolSpec:
    positive_rule: str = "random"
    negative_rule: str = "random"
    min_gap: float = 0.0  # cross_age positives only
    min_speaker_max_gap: float = 0.0  # speaker eligibility (strict >)
    min_cohort_size: int = 5
    positives_per_speaker: int = 40
    negatives_per_speaker: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.positive_rule not in POSITIVE_RULES:
            raise ProtocolError(f"unknown positive rule {self.positive_rule!r}")
        if self.negative_rule not in NEGATIVE_RULES:
            raise ProtocolError(f"unknown negative rule {self.negative_rule!r}")
        if self.positive_rule == "cross_age" and self.min_gap <= 0:
            raise ProtocolError("cross_age positives require min_gap > 0")
        if self.min_cohort_size < 2:
            raise ProtocolError("min_cohort_size must be >= 2")


@dataclass(frozen=True)
class TrialProtocol:
    trials: tuple
    speakers: frozenset
    spec: ProtocolSpec = None

    def __len__(self):
        return len(self.trials)


@dataclass(frozen=True)
class ProtocolStats:
    n_speakers: int
    n_trials: int
    positive_gap_mean: float
    positive_gap_std: float
    negative_gap_mean: float
    negative_gap_std: float


# Vox-CA presets: (positive min age gap, speaker eligibility threshold).
_CA_LEVELS = {5: 7.0, 10: 12.0, 15: 17.0, 20: 22.0}

PRESETS = (["vox-ca5", "vox-ca10", "vox-ca15", "vox-ca20",
            "only-ca5", "only-ca10", "only-ca15", "only-ca20"]
           + ["only-n", "only-g", "only-i", "our-e", "our-h"])


def preset_spec(name, seed=0, positives_per_speaker=40,
                negatives_per_speaker=40) -> ProtocolSpec:
    """Build the ProtocolSpec for a named preset."""
    name = name.lower()
    common = dict(seed=seed, positives_per_speaker=positives_per_speaker,
                  negatives_per_speaker=negatives_per_speaker)
    for gap, elig in _CA_LEVELS.items():
        if name == f"vox-ca{gap}":
            return ProtocolSpec(positive_rule="cross_age",
                                negative_rule="same_nationality_gender",
                                min_gap=float(gap), min_speaker_max_gap=elig,
                                **common)
        if name == f"only-ca{gap}":
            return ProtocolSpec(positive_rule="cross_age",
                                negative_rule="random",
                                min_gap=float(gap), min_speaker_max_gap=elig,
                                **common)
    if name == "only-n":
        return ProtocolSpec(negative_rule="same_nationality", **common)
    if name == "only-g":
        return ProtocolSpec(negative_rule="same_gender", **common)
    if name == "only-i":
        return ProtocolSpec(positive_rule="intra_segment", **common)
    if name == "our-e":
        return ProtocolSpec(**common)
    if name == "our-h":
        return ProtocolSpec(negative_rule="same_nationality_gender", **common)
    raise ProtocolError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")


def eligible_speakers(spans, min_speaker_max_gap):
    """Speakers whose max segment-age gap strictly exceeds the threshold."""
    return {s.speaker_id for s in spans if s.max_gap > min_speaker_max_gap}


def _speaker_rng(seed, speaker_id, stream):
    # str seeding hashes with sha512 internally, so this is platform-stable
    return random.Random(f"{seed}|{stream}|{speaker_id}")


def _by_speaker(records):
    per = {}
    for rec in records:
        per.setdefault(rec.speaker_id, []).append(rec)
    return per


def enumerate_positive_pairs(utts, segment_ages, rule, min_gap=0.0):
    """All qualifying same-speaker (enroll, test) record pairs for one speaker."""
    pairs = []
    for i in range(len(utts)):
        for j in range(i + 1, len(utts)):
            a, b = utts[i], utts[j]
            same_segment = a.segment_id == b.segment_id
            gap = abs(segment_ages[a.segment_key] - segment_ages[b.segment_key])
            if rule == "intra_segment" and not same_segment:
                continue
            if rule == "cross_segment" and same_segment:
                continue
            if rule == "cross_age" and (same_segment or gap < min_gap):
                continue
            pairs.append((a, b))
    return pairs


def build_positive_trials(records, segment_ages, spec, speakers=None):
    """Sample same-speaker trials per the spec's positive rule.

    Speakers are processed in sorted order with per-speaker sub-seeds, so the
    output depends only on (records, spec). Speakers with no qualifying pair
    are skipped with a warning.
    """
    per_speaker = _by_speaker(records)
    if speakers is None:
        speakers = set(per_speaker)
    trials = []
    skipped = 0
    for speaker_id in sorted(speakers):
        utts = sorted(per_speaker.get(speaker_id, ()), key=lambda r: r.key)
        pairs = enumerate_positive_pairs(utts, segment_ages,
                                         spec.positive_rule, spec.min_gap)
        if not pairs:
            skipped += 1
            continue
        rng = _speaker_rng(spec.seed, speaker_id, "pos")
        n = min(spec.positives_per_speaker, len(pairs))
        for a, b in rng.sample(pairs, n):
            gap = abs(segment_ages[a.segment_key] - segment_ages[b.segment_key])
            trials.append(Trial("target", a.key, b.key, gap))
    if skipped:
        warnings.warn(f"{skipped} speaker(s) had no qualifying positive pair")
    if not trials:
        raise ProtocolError("no positive trials could be built")
    return trials


def _cohort_key(rec, rule):
    if rule == "same_nationality_gender":
        return (rec.nationality, rec.gender)
    if rule == "same_nationality":
        return (rec.nationality,)
    if rule == "same_gender":
        return (rec.gender,)
    return ()


def build_negative_trials(records, segment_ages, spec, enrolled_speakers,
                          per_speaker_counts=None):
    """Sample cross-speaker trials anchored on each enrolled speaker.

    For ``same_nationality_gender`` only cohorts with at least
    ``spec.min_cohort_size`` speakers participate. ``per_speaker_counts``
    overrides the per-speaker trial count (used to balance negatives against
    positives).
    """
    per_speaker = _by_speaker(records)
    cohort_speakers = {}
    for speaker_id, utts in per_speaker.items():
        cohort_speakers.setdefault(_cohort_key(utts[0], spec.negative_rule),
                                   set()).add(speaker_id)

    trials = []
    any_cohort = False
    for speaker_id in sorted(enrolled_speakers):
        utts = sorted(per_speaker.get(speaker_id, ()), key=lambda r: r.key)
        if not utts:
            continue
        cohort = cohort_speakers[_cohort_key(utts[0], spec.negative_rule)]
        if spec.negative_rule == "same_nationality_gender" and \
                len(cohort) < spec.min_cohort_size:
            continue
        others = sorted(cohort - {speaker_id})
        if not others:
            continue
        any_cohort = True
        rng = _speaker_rng(spec.seed, speaker_id, "neg")
        n = spec.negatives_per_speaker
        if per_speaker_counts is not None:
            n = per_speaker_counts.get(speaker_id, 0)
        for _ in range(n):
            a = rng.choice(utts)
            b_spk = rng.choice(others)
            b = rng.choice(sorted(per_speaker[b_spk], key=lambda r: r.key))
            gap = abs(segment_ages[a.segment_key] - segment_ages[b.segment_key])
            trials.append(Trial("nontarget", a.key, b.key, gap))
    if not any_cohort:
        raise ProtocolError(
            f"no cohort satisfies the {spec.negative_rule!r} rule "
            f"with min_cohort_size={spec.min_cohort_size}")
    return trials


def build_protocol(records, segment_ages, spec) -> TrialProtocol:
    """Compose positive and negative builders into a full protocol.

    Negatives are balanced to the per-speaker positive counts.
    """
    spans = speaker_age_spans(segment_ages)
    enrolled = eligible_speakers(spans, spec.min_speaker_max_gap)
    if not enrolled:
        raise ProtocolError("no speaker meets the eligibility threshold "
                            f"({spec.min_speaker_max_gap} years)")
    positives = build_positive_trials(records, segment_ages, spec, enrolled)
    pos_counts = {}
    for t in positives:
        spk = t.enroll.split("/")[0]
        pos_counts[spk] = pos_counts.get(spk, 0) + 1
    negatives = build_negative_trials(records, segment_ages, spec,
                                      set(pos_counts), pos_counts)
    trials = tuple(positives + negatives)
    speakers = frozenset(t.enroll.split("/")[0] for t in positives)
    return TrialProtocol(trials=trials, speakers=speakers, spec=spec)


def build_preset(records, segment_ages, name, seed=0, **kwargs) -> TrialProtocol:
    return build_protocol(records, segment_ages,
                          preset_spec(name, seed=seed, **kwargs))


def _mean_std(values):
    # population standard deviation
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)


def protocol_stats(protocol) -> ProtocolStats:
    """Speaker/trial counts and age-gap mean/std split by label.

    Stats for an absent class are reported as None, not zero. Standard
    deviations are population (divide by N).
    """
    if not protocol.trials:
        raise ProtocolError("empty protocol")
    pos = [t.age_gap for t in protocol.trials if t.is_target]
    neg = [t.age_gap for t in protocol.trials if not t.is_target]
    pmean, pstd = _mean_std(pos) if pos else (None, None)
    nmean, nstd = _mean_std(neg) if neg else (None, None)
    return ProtocolStats(
        n_speakers=len(protocol.speakers), n_trials=len(protocol.trials),
        positive_gap_mean=pmean, positive_gap_std=pstd,
        negative_gap_mean=nmean, negative_gap_std=nstd,
    )


def format_stats(stats, name="protocol") -> str:
    """Human-readable stats table. Age-gap spread is population std."""
    def fmt(mean, std):
        if mean is None:
            return "absent"
        return f"{mean:.2f} +/- {std:.2f}"
    lines = [
        f"# statistics for {name} (std is population std)",
        f"speakers      {stats.n_speakers}",
        f"trials        {stats.n_trials}",
        f"positive gap  {fmt(stats.positive_gap_mean, stats.positive_gap_std)}",
        f"negative gap  {fmt(stats.negative_gap_mean, stats.negative_gap_std)}",
    ]
    return "\n".join(lines) + "\n"


def stats_keyvalues(stats) -> dict:
    return {
        "n_speakers": stats.n_speakers,
        "n_trials": stats.n_trials,
        "positive_gap_mean": stats.positive_gap_mean,
        "positive_gap_std": stats.positive_gap_std,
        "negative_gap_mean": stats.negative_gap_mean,
        "negative_gap_std": stats.negative_gap_std,
    }


def write_trials(protocol, path):
    with open(path, "w", encoding="utf-8") as f:
        for t in protocol.trials:
            f.write(f"{1 if t.is_target else 0} {t.enroll} {t.test}\n")


def read_trials(path, segment_ages=None) -> TrialProtocol:
    """Parse a trial list; age gaps are restored when segment_ages is given."""
    trials = []
    speakers = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ProtocolError(f"{path}:{lineno}: malformed trial line {line!r}")
            label = "target" if parts[0] == "1" else "nontarget"
            gap = None
            if segment_ages is not None:
                e_spk, e_seg, _ = parts[1].split("/")
                t_spk, t_seg, _ = parts[2].split("/")
                gap = abs(segment_ages[(e_spk, e_seg)] - segment_ages[(t_spk, t_seg)])
            trials.append(Trial(label, parts[1], parts[2], gap))
            if label == "target":
                speakers.add(parts[1].split("/")[0])
    return TrialProtocol(trials=tuple(trials), speakers=frozenset(speakers))
