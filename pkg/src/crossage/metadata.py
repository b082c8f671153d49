"""Utterance metadata handling: loading, segment ages, age groups, speaker spans.

The metadata table is a UTF-8 CSV with header
``speaker_id,segment_id,utterance_id,age,nationality,gender``; the ``age``
column holds either a single value or a ``;``-joined list of per-face
estimates, which is averaged on load.
"""

import csv
import math
import random
from dataclasses import dataclass

GENDERS = ("male", "female")

# Age-group bins over floor(age): [0,20], [21,30], ..., [61,70], [71,100].
AGE_GROUP_UPPER_BOUNDS = (20, 30, 40, 50, 60, 70, 100)
N_AGE_GROUPS = 7


class MetadataError(ValueError):
    """Raised for malformed or inconsistent metadata."""


@dataclass(frozen=True)
class UtteranceRecord:
    speaker_id: str
    segment_id: str
    utterance_id: str
    age: float
    nationality: str
    gender: str

    @property
    def key(self) -> str:
        return f"{self.speaker_id}/{self.segment_id}/{self.utterance_id}"

    @property
    def segment_key(self) -> tuple:
        return (self.speaker_id, self.segment_id)


@dataclass(frozen=True)
class SpeakerAgeSpan:
    speaker_id: str
    min_age: float
    max_age: float

    @property
    def max_gap(self) -> float:
        return self.max_age - self.min_age


def _parse_age(field: str) -> float:
    parts = [p for p in field.split(";") if p.strip() != ""]
    if not parts:
        raise ValueError("empty age field")
    values = [float(p) for p in parts]
    age = sum(values) / len(values)
    if not math.isfinite(age) or age < 0:
        raise ValueError(f"age must be a finite non-negative number, got {field!r}")
    return age


def validate_records(records):
    """Check uniqueness of utterance keys and per-speaker attribute consistency."""
    seen = set()
    speaker_attrs = {}
    for rec in records:
        triple = (rec.speaker_id, rec.segment_id, rec.utterance_id)
        if triple in seen:
            raise MetadataError(f"duplicate utterance key {rec.key}")
        seen.add(triple)
        attrs = (rec.nationality, rec.gender)
        prev = speaker_attrs.setdefault(rec.speaker_id, attrs)
        if prev != attrs:
            raise MetadataError(
                f"speaker {rec.speaker_id} has conflicting attributes: "
                f"{prev} vs {attrs}"
            )
        if rec.gender not in GENDERS:
            raise MetadataError(
                f"speaker {rec.speaker_id}: gender must be one of {GENDERS}, "
                f"got {rec.gender!r}"
            )
        if not math.isfinite(rec.age) or rec.age < 0:
            raise MetadataError(f"utterance {rec.key}: invalid age {rec.age}")


def load_metadata(path):
    """Load a metadata CSV into a list of UtteranceRecord.

    Raises MetadataError with the offending line number on malformed rows,
    duplicate keys, or inconsistent speaker attributes.
    """
    expected = ["speaker_id", "segment_id", "utterance_id", "age",
                "nationality", "gender"]
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise MetadataError(f"{path}: empty file") from None
        if header != expected:
            raise MetadataError(f"{path}: bad header {header}, expected {expected}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise MetadataError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            try:
                age = _parse_age(row[3])
            except ValueError as e:
                raise MetadataError(f"{path}:{lineno}: {e}") from None
            records.append(UtteranceRecord(
                speaker_id=row[0], segment_id=row[1], utterance_id=row[2],
                age=age, nationality=row[4], gender=row[5],
            ))
    validate_records(records)
    return records


def write_metadata(records, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["speaker_id", "segment_id", "utterance_id", "age",
                         "nationality", "gender"])
        for rec in records:
            writer.writerow([rec.speaker_id, rec.segment_id, rec.utterance_id,
                             repr(rec.age), rec.nationality, rec.gender])


def compute_segment_ages(records):
    """Segment age = arithmetic mean of the segment's utterance ages.

    Returns a dict mapping (speaker_id, segment_id) -> age.
    """
    if not records:
        raise MetadataError("empty metadata table")
    sums = {}
    counts = {}
    for rec in records:
        key = rec.segment_key
        sums[key] = sums.get(key, 0.0) + rec.age
        counts[key] = counts.get(key, 0) + 1
    return {key: sums[key] / counts[key] for key in sums}


def write_segment_ages(records, segment_ages, path):
    """Export per-utterance rows with a trailing segment_age column."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["speaker_id", "segment_id", "utterance_id", "age",
                         "nationality", "gender", "segment_age"])
        for rec in records:
            writer.writerow([rec.speaker_id, rec.segment_id, rec.utterance_id,
                             repr(rec.age), rec.nationality, rec.gender,
                             repr(segment_ages[rec.segment_key])])


def assign_age_group(age) -> int:
    """Map an age in years to one of the 7 group indices.

    Real-valued ages are floored first; bins are [0,20], [21,30], [31,40],
    [41,50], [51,60], [61,70], [71,100], with ages above 100 clamped into
    the last bin.
    """
    if not math.isfinite(age) or age < 0:
        raise ValueError(f"age must be finite and non-negative, got {age}")
    years = math.floor(age)
    for group, upper in enumerate(AGE_GROUP_UPPER_BOUNDS):
        if years <= upper:
            return group
    return N_AGE_GROUPS - 1


def speaker_age_spans(segment_ages):
    """Per-speaker min/max segment age; max_gap is their difference."""
    if not segment_ages:
        raise MetadataError("empty segment-age table")
    spans = {}
    for (speaker_id, _), age in segment_ages.items():
        lo, hi = spans.get(speaker_id, (math.inf, -math.inf))
        spans[speaker_id] = (min(lo, age), max(hi, age))
    return [SpeakerAgeSpan(spk, lo, hi)
            for spk, (lo, hi) in sorted(spans.items())]


# speaker max-age-gap tiers used by the synthetic generator: each spans one
# eligibility band of the four cross-age presets (> 7, 12, 17, 22 years)
_SPAN_TIERS = ((8.0, 12.0), (13.0, 17.0), (18.0, 22.0), (23.0, None))


def generate_synthetic_metadata(seed, n_speakers, segments_per_speaker=4,
                                utterances_per_segment=3, age_low=20.0,
                                age_high=60.0, cross_age_fraction=0.6):
    """Deterministic synthetic metadata for tests and toy experiments.

    The first five speakers share one nationality-gender cohort so that
    cohort-constrained negatives are always possible. A ``cross_age_fraction``
    of speakers get age spans cycled through four tiers, one per cross-age
    eligibility band, so every gap threshold is populated and eligible-speaker
    counts strictly shrink as the threshold grows.
    """
    if n_speakers < 5:
        raise ValueError("need at least 5 speakers to guarantee a full cohort")
    if segments_per_speaker < 1 or utterances_per_segment < 1:
        raise ValueError("counts must be >= 1")
    if age_high - age_low <= _SPAN_TIERS[-1][0]:
        raise ValueError("age range too narrow for the widest span tier")

    rng = random.Random(seed)
    nationalities = ["USA", "UK", "India", "Germany"]
    records = []
    n_cross = round(n_speakers * cross_age_fraction)
    for i in range(n_speakers):
        speaker_id = f"spk{i:04d}"
        if i < 5:
            nationality, gender = nationalities[0], "male"
        else:
            nationality = rng.choice(nationalities)
            gender = rng.choice(GENDERS)
        if i < n_cross:
            span_lo, span_hi = _SPAN_TIERS[i % len(_SPAN_TIERS)]
            if span_hi is None:
                span_hi = age_high - age_low
            span = rng.uniform(span_lo, min(span_hi, age_high - age_low))
            lo = rng.uniform(age_low, age_high - span)
            hi = lo + span
        else:
            lo = rng.uniform(age_low, age_high - 2.0)
            hi = rng.uniform(lo, min(lo + 4.0, age_high))
        for s in range(segments_per_speaker):
            # endpoints pinned so the speaker's span is exactly [lo, hi]
            if s == 0:
                base = lo
            elif s == 1 and segments_per_speaker > 1:
                base = hi
            else:
                base = rng.uniform(lo, hi)
            for u in range(utterances_per_segment):
                records.append(UtteranceRecord(
                    speaker_id=speaker_id,
                    segment_id=f"seg{s:03d}",
                    utterance_id=f"utt{u:03d}",
                    age=base,
                    nationality=nationality,
                    gender=gender,
                ))
    validate_records(records)
    return records
