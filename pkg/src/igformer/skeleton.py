"""Skeleton ingestion: NTU and SBU parsers, temporal padding, body-part maps,
joint-noise augmentation, and the canonical on-disk sample format.

Canonical sample file layout (little-endian throughout):
    magic b"IGF1" | uint32 J | uint32 T | int32 label |
    uint32 len(source_id) | source_id utf-8 |
    person A coords as T*J*3 float64 | person B coords likewise
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError

log = logging.getLogger("igformer")

CANONICAL_MAGIC = b"IGF1"
PART_ORDER = ("left_arm", "right_arm", "left_leg", "right_leg", "torso")

# Joint groupings follow the sensors' published joint orderings
# (Kinect-v2 for 25 joints, the 15-joint two-person capture layout).
_PARTS_25 = {
    "torso": (0, 1, 2, 3, 20),
    "left_arm": (4, 5, 6, 7, 21, 22),
    "right_arm": (8, 9, 10, 11, 23, 24),
    "left_leg": (12, 13, 14, 15),
    "right_leg": (16, 17, 18, 19),
}
_PARTS_15 = {
    "torso": (0, 1, 2),
    "left_arm": (3, 4, 5),
    "right_arm": (6, 7, 8),
    "left_leg": (9, 10, 11),
    "right_leg": (12, 13, 14),
}


@dataclass
class SkeletonSequence:
    """One person's joint trajectory, coords shaped (T, J, 3).

    Units are meters for NTU captures and the normalized units of the
    source file for SBU.
    """

    coords: np.ndarray
    person_index: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[2] != 3:
            raise ConfigError(f"coords must be (T, J, 3), got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise ConfigError("sequence needs at least one frame")
        if not np.isfinite(self.coords).all():
            raise ConfigError("coords contain NaN or Inf")

    @property
    def T(self):
        return self.coords.shape[0]

    @property
    def J(self):
        return self.coords.shape[1]


@dataclass
class InteractionSample:
    """A labeled pair of skeleton sequences sharing T and J."""

    person_a: SkeletonSequence
    person_b: SkeletonSequence
    label: int
    source_id: str = ""

    def __post_init__(self):
        if self.person_a.T != self.person_b.T or self.person_a.J != self.person_b.J:
            raise ConfigError(
                f"persons disagree on (T, J): ({self.person_a.T}, {self.person_a.J}) "
                f"vs ({self.person_b.T}, {self.person_b.J})")


@dataclass
class BodyPartMap:
    """Ordered named joint groups forming a partition of {0..J-1}."""

    parts: tuple  # ((name, (joint indices...)), ...)
    joint_count: int = field(default=0)

    def __post_init__(self):
        parts = tuple((name, tuple(int(i) for i in idx)) for name, idx in self.parts)
        object.__setattr__(self, "parts", parts)
        if self.joint_count == 0:
            self.joint_count = 1 + max(i for _, idx in parts for i in idx)
        seen = set()
        for name, idx in parts:
            if not idx:
                raise ConfigError(f"part {name!r} is empty")
            for i in idx:
                if not 0 <= i < self.joint_count:
                    raise ConfigError(f"part {name!r} index {i} out of range 0..{self.joint_count - 1}")
                if i in seen:
                    raise ConfigError(f"joint {i} assigned to more than one part")
                seen.add(i)
        if len(seen) != self.joint_count:
            missing = sorted(set(range(self.joint_count)) - seen)
            raise ConfigError(f"joints {missing} belong to no part")

    @property
    def B(self):
        return len(self.parts)

    def indices(self):
        return [np.asarray(idx, dtype=np.intp) for _, idx in self.parts]


def builtin_part_map(J):
    """The five-part body map (left arm, right arm, left leg, right leg, torso)."""
    table = {25: _PARTS_25, 15: _PARTS_15}.get(J)
    if table is None:
        raise ConfigError(f"no built-in part map for J={J}; supply a partition config file")
    return BodyPartMap(tuple((name, table[name]) for name in PART_ORDER), joint_count=J)


def load_part_map(text, J=0):
    """Parse a partition config: one `name: i, j, k` line per part, fixed part order."""
    parts = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ParseError("expected '<part-name>: i, j, ...'", line=lineno)
        name, _, rest = line.partition(":")
        name = name.strip()
        try:
            idx = tuple(int(tok) for tok in rest.replace(",", " ").split())
        except ValueError as exc:
            raise ParseError(f"bad joint index: {exc}", line=lineno) from None
        parts.append((name, idx))
    names = tuple(name for name, _ in parts)
    if names != PART_ORDER:
        raise ConfigError(f"parts must appear in order {PART_ORDER}, got {names}")
    return BodyPartMap(tuple(parts), joint_count=J)


def pad_repeat(seq, target_T=256):
    """Cyclically repeat frames up to target_T; longer sequences are truncated."""
    if target_T < 1:
        raise ConfigError("target frame count must be >= 1")
    t = seq.T
    if t == target_T:
        return seq
    idx = np.arange(target_T) % t
    return SkeletonSequence(seq.coords[idx], person_index=seq.person_index)


def pad_sample(sample, target_T=256):
    return InteractionSample(pad_repeat(sample.person_a, target_T),
                             pad_repeat(sample.person_b, target_T),
                             label=sample.label, source_id=sample.source_id)


def add_joint_noise(seq, sigma_m, rng_seed=0):
    """Add i.i.d. zero-mean Gaussian noise of std sigma_m to every coordinate."""
    if sigma_m < 0:
        raise ConfigError("noise sigma must be >= 0")
    if sigma_m == 0:
        return seq
    rng = np.random.default_rng(rng_seed)
    noisy = seq.coords + rng.normal(scale=sigma_m, size=seq.coords.shape)
    return SkeletonSequence(noisy, person_index=seq.person_index)


# -- NTU .skeleton text layout ------------------------------------------------

class _Lines:
    def __init__(self, data):
        if isinstance(data, bytes):
            data = data.decode("utf-8", errors="strict")
        self._lines = data.splitlines()
        self._pos = 0

    @property
    def lineno(self):
        return self._pos

    def next(self, what):
        while self._pos < len(self._lines):
            line = self._lines[self._pos]
            self._pos += 1
            if line.strip():
                return line
        raise ParseError(f"unexpected end of file while reading {what}", line=self._pos)

    def next_int(self, what):
        line = self.next(what)
        try:
            return int(line.split()[0])
        except ValueError:
            raise ParseError(f"expected integer {what}, got {line.strip()!r}",
                             line=self.lineno) from None


def parse_ntu(data):
    """Parse an NTU `.skeleton` file into per-body sequences.

    Layout: frame count; per frame a body count; per body one 10-value
    metadata line (first value is the body ID), a joint-count line that
    must read 25, and 25 joint lines whose first three values are x, y, z
    in meters. Returns (list of SkeletonSequence, frame_count); bodies
    absent from a frame keep zero coordinates there. When more than two
    bodies appear, the two with the longest presence are kept (ties break
    toward the smaller body ID).
    """
    lines = _Lines(data)
    frame_count = lines.next_int("frame count")
    if frame_count < 1:
        raise ParseError(f"frame count must be >= 1, got {frame_count}", line=lines.lineno)
    coords = {}    # body id -> (T, 25, 3)
    presence = {}  # body id -> frames present
    first_seen = {}
    for f in range(frame_count):
        body_count = lines.next_int("body count")
        for _ in range(body_count):
            meta = lines.next("body metadata").split()
            if len(meta) != 10:
                raise ParseError(f"body metadata needs 10 values, got {len(meta)}",
                                 line=lines.lineno)
            body_id = meta[0]
            joint_count = lines.next_int("joint count")
            if joint_count != 25:
                raise ParseError(f"joint count must be 25, got {joint_count}",
                                 line=lines.lineno)
            if body_id not in coords:
                coords[body_id] = np.zeros((frame_count, 25, 3))
                presence[body_id] = 0
                first_seen[body_id] = len(first_seen)
            presence[body_id] += 1
            for j in range(25):
                vals = lines.next("joint line").split()
                if len(vals) != 12:
                    raise ParseError(f"joint line needs 12 values, got {len(vals)}",
                                     line=lines.lineno)
                try:
                    coords[body_id][f, j] = [float(v) for v in vals[:3]]
                except ValueError as exc:
                    raise ParseError(f"non-numeric coordinate: {exc}",
                                     line=lines.lineno) from None
    if not coords:
        raise ParseError("file contains no bodies")
    ranked = sorted(coords, key=lambda b: (-presence[b], b))[:2]
    ranked.sort(key=lambda b: first_seen[b])
    bodies = [SkeletonSequence(coords[b], person_index=i) for i, b in enumerate(ranked)]
    return bodies, frame_count


def ntu_to_sample(bodies, label, source_id=""):
    """Pair up parsed NTU bodies; a lone body is duplicated with a warning."""
    if not bodies:
        raise ConfigError("no bodies to build a sample from")
    if len(bodies) == 1:
        log.warning("sample %s has a single body; duplicating it as person B", source_id)
        a = bodies[0]
        b = SkeletonSequence(a.coords.copy(), person_index=1)
        return InteractionSample(a, b, label=label, source_id=source_id)
    return InteractionSample(bodies[0], bodies[1], label=label, source_id=source_id)


# -- SBU rows -----------------------------------------------------------------

def parse_sbu(data, label=0, source_id=""):
    """Parse SBU rows: frame index then 90 values (2 persons x 15 joints x 3).

    Fields may be separated by commas and/or whitespace; every row must
    carry exactly 91 fields. Coordinates stay in the file's normalized units.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="strict")
    rows = []
    for lineno, raw in enumerate(data.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.replace(",", " ").split()
        if len(fields) != 91:
            raise ParseError(f"row has {len(fields)} fields, expected 91", line=lineno)
        try:
            rows.append([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise ParseError(f"non-numeric value: {exc}", line=lineno) from None
    if not rows:
        raise ParseError("file contains no skeleton rows")
    data = np.asarray(rows).reshape(len(rows), 2, 15, 3)
    return InteractionSample(SkeletonSequence(data[:, 0], person_index=0),
                             SkeletonSequence(data[:, 1], person_index=1),
                             label=label, source_id=source_id)


# -- canonical interchange format ----------------------------------------------

def write_canonical(sample):
    """Serialize an InteractionSample to canonical bytes."""
    sid = sample.source_id.encode("utf-8")
    buf = io.BytesIO()
    buf.write(CANONICAL_MAGIC)
    buf.write(struct.pack("<IIiI", sample.person_a.J, sample.person_a.T,
                          sample.label, len(sid)))
    buf.write(sid)
    buf.write(sample.person_a.coords.astype("<f8").tobytes())
    buf.write(sample.person_b.coords.astype("<f8").tobytes())
    return buf.getvalue()


def read_canonical(data):
    """Parse canonical bytes back into an InteractionSample (bit-exact coords)."""
    if data[:4] != CANONICAL_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected {CANONICAL_MAGIC!r}")
    j, t, label, sid_len = struct.unpack_from("<IIiI", data, 4)
    off = 4 + 16
    source_id = data[off:off + sid_len].decode("utf-8")
    off += sid_len
    block = t * j * 3 * 8
    if len(data) != off + 2 * block:
        raise ParseError(f"payload length {len(data) - off} != expected {2 * block}")
    a = np.frombuffer(data, dtype="<f8", count=t * j * 3, offset=off).reshape(t, j, 3)
    b = np.frombuffer(data, dtype="<f8", count=t * j * 3, offset=off + block).reshape(t, j, 3)
    return InteractionSample(SkeletonSequence(a.copy(), person_index=0),
                             SkeletonSequence(b.copy(), person_index=1),
                             label=label, source_id=source_id)
