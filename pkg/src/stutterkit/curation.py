"""Dataset curation: clip cleaning, multi-stutter pairing, class balancing,
and speaker-exclusive split materialization.

The pipeline takes an annotated clip inventory (three annotator votes per
label), keeps only clips with a single unanimous retained label, then
concatenates same-episode/same-speaker clip pairs into 6-second two-label
training examples. NoStutteredWords pairs are downsampled per speaker to the
rounded mean size of that speaker's disfluent combination groups, and the
result is partitioned into train/val/test by named speaker groups.
"""

from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .featurizer import SAMPLE_RATE, AudioClip, pad_or_truncate, save_wav
from .labels import DISFLUENT_LABELS, LABELS, NO_STUTTER, bits_from_labels

N_ANNOTATORS = 3
MIN_DURATION_S = 3.0
PART_SAMPLES = 48000  # each half of a synthesized pair: 3 s @ 16 kHz
TARGET_SAMPLES = 2 * PART_SAMPLES

# Rare non-disfluent annotations dropped outright (each under 1% of the
# corpora this pipeline was designed around).
PRUNED_LABELS = ("NaturalPause", "HardToUnderstand", "Speechless", "BadAudioQuality", "Music")

SPEAKER_GROUPS = ("4-DS", "DS-Set 1", "DS-Set 2", "FB")


class SampleRateMismatch(Exception):
    """Clip audio is not sampled at 16 kHz."""


class SpeakerLeak(Exception):
    """A speaker appears in more than one partition (or group)."""


@dataclass
class ClipRecord:
    """One annotated source clip. annotator_votes maps label name to the
    number of annotators (0..3) who applied it."""

    clip_id: str
    episode_id: str
    speaker_id: str
    duration_s: float
    annotator_votes: dict[str, int]
    source: str = "SEP28k"
    n_speakers_in_clip: int = 1
    label: str | None = None  # single unanimous label, set by clean()

    def __post_init__(self) -> None:
        if self.duration_s <= 0:
            raise ValueError(f"clip {self.clip_id!r}: duration must be positive")
        for name, votes in self.annotator_votes.items():
            if not 0 <= int(votes) <= N_ANNOTATORS:
                raise ValueError(
                    f"clip {self.clip_id!r}: votes for {name!r} must be in 0..{N_ANNOTATORS}"
                )


@dataclass
class MultiStutterClip:
    """A 6 s synthesized example: two 3 s same-speaker/same-episode clips
    concatenated left-then-right, labeled with the union of the parts."""

    left_clip_id: str
    right_clip_id: str
    samples: np.ndarray
    labels: tuple[int, ...]
    combination_key: str
    speaker_id: str
    episode_id: str

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (TARGET_SAMPLES,):
            raise ValueError(
                f"pair {self.left_clip_id}+{self.right_clip_id}: expected exactly "
                f"{TARGET_SAMPLES} samples, got {self.samples.shape}"
            )

    @property
    def pair_id(self) -> str:
        return f"{self.left_clip_id}__{self.right_clip_id}"


@dataclass(frozen=True)
class SplitPlan:
    """Named assignment of speaker groups to the three partitions."""

    name: str
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


PLANS: dict[str, SplitPlan] = {
    p.name: p
    for p in (
        SplitPlan("SEP-28k-E", ("4-DS",), ("DS-Set 1",), ("DS-Set 2",)),
        SplitPlan("SEP-28k-T", ("DS-Set 1",), ("DS-Set 2",), ("4-DS",)),
        SplitPlan("SEP-28k-D", ("DS-Set 2",), ("DS-Set 1",), ("4-DS",)),
        SplitPlan("SEP-28k-E-merged", ("4-DS", "DS-Set 1"), ("DS-Set 2",), ("FB",)),
        SplitPlan("SEP-28k-T-merged", ("DS-Set 1", "DS-Set 2"), ("4-DS",), ("FB",)),
    )
}


# ---------------------------------------------------------------------------
# Cleaning


def _unanimous(record: ClipRecord) -> tuple[list[str], list[str]]:
    """(retained, other) labels with a full 3/3 vote."""
    retained = [l for l in LABELS if record.annotator_votes.get(l, 0) == N_ANNOTATORS]
    other = [
        l
        for l, v in record.annotator_votes.items()
        if v == N_ANNOTATORS and l not in LABELS
    ]
    return retained, other


def clean(
    records: list[ClipRecord],
    prune_mode: str = "fixed",
    rare_threshold: float = 0.01,
) -> tuple[list[ClipRecord], dict[str, int]]:
    """Filter an inventory down to usable single-label clips.

    Keeps a clip iff exactly one of the six retained labels is unanimous,
    its duration is at least 3 s, and it contains a single speaker. Returns
    (kept records with .label set, rejection-reason counts). prune_mode
    "fixed" rejects the five named rare labels; "frequency" instead computes
    the rare set as unanimous non-retained labels appearing in fewer than
    rare_threshold of the input records.
    """
    if prune_mode not in ("fixed", "frequency"):
        raise ValueError(f"prune_mode must be 'fixed' or 'frequency', got {prune_mode!r}")
    if prune_mode == "frequency":
        other_counts: Counter[str] = Counter()
        for r in records:
            _, other = _unanimous(r)
            other_counts.update(other)
        n = max(len(records), 1)
        pruned = {l for l, c in other_counts.items() if c / n < rare_threshold}
    else:
        pruned = set(PRUNED_LABELS)

    kept: list[ClipRecord] = []
    report: Counter[str] = Counter()
    for r in records:
        retained, other = _unanimous(r)
        if len(retained) == 1:
            if r.duration_s < MIN_DURATION_S:
                report["too_short"] += 1
            elif r.n_speakers_in_clip > 1:
                report["multiple_speakers"] += 1
            else:
                kept.append(replace(r, label=retained[0]))
                continue
        elif len(retained) > 1:
            report["multiple_unanimous"] += 1
        elif any(l in pruned for l in other):
            report["pruned_label"] += 1
        elif other:
            report["unretained_label"] += 1
        else:
            report["no_unanimity"] += 1
    return kept, dict(report)


# ---------------------------------------------------------------------------
# Pairing

AudioLike = AudioClip | tuple[np.ndarray, int]


def _clip_samples(clip_id: str, audio: AudioLike) -> np.ndarray:
    if isinstance(audio, AudioClip):
        samples, rate = audio.samples, audio.sample_rate
    else:
        samples, rate = np.asarray(audio[0], dtype=np.float64), int(audio[1])
    if rate != SAMPLE_RATE:
        raise SampleRateMismatch(f"clip {clip_id!r} sampled at {rate} Hz, need {SAMPLE_RATE}")
    return samples


def _compatible(a: ClipRecord, b: ClipRecord) -> bool:
    if a.label == b.label:
        return a.label == NO_STUTTER
    return a.label in DISFLUENT_LABELS and b.label in DISFLUENT_LABELS


def pair(records: list[ClipRecord], audio: dict[str, AudioLike]) -> list[MultiStutterClip]:
    """Every ordered pair (A, B), A != B, from the same episode AND speaker
    whose labels are distinct disfluencies or both NoStutteredWords. Each
    part contributes its first 3 s (zero-padded if shorter), so every output
    is exactly 96,000 samples. Output sorted by (episode, left id, right id).
    """
    by_group: dict[tuple[str, str], list[ClipRecord]] = defaultdict(list)
    for r in records:
        if r.label is None:
            raise ValueError(f"clip {r.clip_id!r} has no unanimous label; run clean() first")
        by_group[(r.episode_id, r.speaker_id)].append(r)

    half: dict[str, np.ndarray] = {}

    def part(r: ClipRecord) -> np.ndarray:
        if r.clip_id not in half:
            half[r.clip_id] = pad_or_truncate(_clip_samples(r.clip_id, audio[r.clip_id]), PART_SAMPLES)
        return half[r.clip_id]

    out: list[MultiStutterClip] = []
    for (episode_id, speaker_id), group in by_group.items():
        for a in group:
            for b in group:
                if a.clip_id == b.clip_id or not _compatible(a, b):
                    continue
                names = (a.label,) if a.label == b.label else (a.label, b.label)
                out.append(
                    MultiStutterClip(
                        left_clip_id=a.clip_id,
                        right_clip_id=b.clip_id,
                        samples=np.concatenate([part(a), part(b)]),
                        labels=bits_from_labels(names),
                        combination_key=f"{a.label}_{b.label}_",
                        speaker_id=speaker_id,
                        episode_id=episode_id,
                    )
                )
    out.sort(key=lambda c: (c.episode_id, c.left_clip_id, c.right_clip_id))
    return out


NO_STUTTER_KEY = f"{NO_STUTTER}_{NO_STUTTER}_"


# ---------------------------------------------------------------------------
# Balancing


def no_stutter_targets(pairs: list[MultiStutterClip]) -> dict[str, int]:
    """Per-speaker retention target: the rounded mean of that speaker's
    disfluent combination-group sizes (0 when a speaker has none)."""
    counts: dict[str, Counter[str]] = defaultdict(Counter)
    for p in pairs:
        if p.combination_key != NO_STUTTER_KEY:
            counts[p.speaker_id][p.combination_key] += 1
    speakers = {p.speaker_id for p in pairs}
    return {
        s: int(round(float(np.mean(list(counts[s].values()))))) if counts[s] else 0
        for s in speakers
    }


def balance_no_stutter(
    pairs: list[MultiStutterClip],
    seed: int = 0,
    targets: dict[str, int] | None = None,
) -> list[MultiStutterClip]:
    """Downsample each speaker's NoStutteredWords pairs to the target count
    (uniform without replacement, seeded); disfluent pairs pass through.
    Original pair order is preserved."""
    if targets is None:
        targets = no_stutter_targets(pairs)
    ns_indices: dict[str, list[int]] = defaultdict(list)
    for i, p in enumerate(pairs):
        if p.combination_key == NO_STUTTER_KEY:
            ns_indices[p.speaker_id].append(i)
    rng = np.random.default_rng(seed)
    keep = set(range(len(pairs)))
    for speaker in sorted(ns_indices):
        idx = ns_indices[speaker]
        target = targets.get(speaker, 0)
        if target < len(idx):
            chosen = rng.choice(len(idx), size=target, replace=False)
            dropped = set(idx) - {idx[j] for j in chosen}
            keep -= dropped
    return [pairs[i] for i in sorted(keep)]


# ---------------------------------------------------------------------------
# Splitting


def build_splits(
    pairs: list[MultiStutterClip],
    speaker_groups: dict[str, list[str]],
    plan: SplitPlan,
) -> dict[str, list[MultiStutterClip]]:
    """Partition pairs by the plan's group assignments.

    speaker_groups maps group name -> speaker ids. Raises SpeakerLeak when a
    speaker sits in two groups or (for a degenerate plan) would land in two
    partitions; raises ValueError for pairs whose speaker is in no group.
    """
    group_of: dict[str, str] = {}
    for group, speakers in speaker_groups.items():
        for s in speakers:
            if s in group_of and group_of[s] != group:
                raise SpeakerLeak(f"speaker {s!r} assigned to both {group_of[s]!r} and {group!r}")
            group_of[s] = group
    partition_of: dict[str, str] = {}
    for split_name, groups in (("train", plan.train), ("val", plan.val), ("test", plan.test)):
        for g in groups:
            if g not in speaker_groups:
                raise ValueError(f"plan {plan.name!r} references unknown group {g!r}")
            for s in speaker_groups[g]:
                if s in partition_of and partition_of[s] != split_name:
                    raise SpeakerLeak(
                        f"speaker {s!r} appears in both {partition_of[s]!r} and {split_name!r}"
                    )
                partition_of[s] = split_name
    manifests: dict[str, list[MultiStutterClip]] = {"train": [], "val": [], "test": []}
    for p in pairs:
        if p.speaker_id not in group_of:
            raise ValueError(f"pair speaker {p.speaker_id!r} is in no speaker group")
        split = partition_of.get(p.speaker_id)
        if split is not None:  # groups outside the plan are simply unused
            manifests[split].append(p)
    return manifests


def combination_count_report(manifests: dict[str, list[MultiStutterClip]]) -> dict:
    """Per-split pair counts keyed by combination, plus totals."""
    report: dict = {}
    for split, clips in manifests.items():
        counts = Counter(c.combination_key for c in clips)
        report[split] = {k: counts[k] for k in sorted(counts)}
        report[split]["total"] = len(clips)
    return report


# ---------------------------------------------------------------------------
# Manifest / audio I/O

INVENTORY_FIELDS = [
    "clip_id", "episode_id", "speaker_id", "duration_s", "n_speakers", "source",
    *[f"votes_{l}" for l in LABELS],
    "votes_other_json",
]

SPLIT_FIELDS = ["path", *LABELS, "combination_key", "speaker_id"]


def read_inventory(path: str | Path) -> list[ClipRecord]:
    """Parse the annotated-clip CSV (see INVENTORY_FIELDS for the header)."""
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = set(INVENTORY_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"inventory {path} missing columns: {sorted(missing)}")
        for row in reader:
            votes = {l: int(row[f"votes_{l}"]) for l in LABELS}
            other = row.get("votes_other_json", "").strip()
            if other:
                votes.update({k: int(v) for k, v in json.loads(other).items()})
            records.append(
                ClipRecord(
                    clip_id=row["clip_id"],
                    episode_id=row["episode_id"],
                    speaker_id=row["speaker_id"],
                    duration_s=float(row["duration_s"]),
                    annotator_votes=votes,
                    source=row["source"],
                    n_speakers_in_clip=int(row["n_speakers"]),
                )
            )
    return records


def write_split(
    out_dir: str | Path, split_name: str, clips: list[MultiStutterClip]
) -> Path:
    """Write one split: WAV files under <out_dir>/<split>/audio plus a CSV
    manifest (relative path, six label bits, combination key, speaker)."""
    split_dir = Path(out_dir) / split_name
    audio_dir = split_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = split_dir / "manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(SPLIT_FIELDS)
        for c in clips:
            rel = f"audio/{c.pair_id}.wav"
            save_wav(audio_dir / f"{c.pair_id}.wav", c.samples)
            writer.writerow([rel, *c.labels, c.combination_key, c.speaker_id])
    return manifest_path


def read_split(manifest_path: str | Path) -> list[dict]:
    """Rows of a split manifest; 'path' is resolved relative to the manifest."""
    base = Path(manifest_path).parent
    rows = []
    with open(manifest_path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            rows.append(
                {
                    "path": base / row["path"],
                    "labels": tuple(int(row[l]) for l in LABELS),
                    "combination_key": row["combination_key"],
                    "speaker_id": row["speaker_id"],
                }
            )
    return rows


def write_count_report(path: str | Path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
