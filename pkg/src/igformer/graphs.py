"""Distance-based sparse interaction graphs.

Built once per sample from raw coordinates: per-part centroids, temporal
downsampling aligned with the tokenizer's convolution windows, cross-person
Euclidean distances, and per-row k-nearest thresholding (ties at the k-th
smallest distance are all kept). Token order is the tokenizer's time-major
order, so graph row t*B + p describes body part p over the same temporal
span as BPT token (t, p).

Sidecar file layout (little-endian):
    magic b"IGFD" | uint32 M | uint32 k |
    DSIG a->b as packbits(M*M row-major) | DSIG b->a likewise
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError
from .spm import time_major_permutation

SIDECAR_MAGIC = b"IGFD"


@dataclass
class DistanceGraphConfig:
    """Neighbor count plus the window geometry it must share with the tokenizer."""

    k: int = 15

    def validate(self, M):
        if not 1 <= self.k <= M:
            raise ConfigError(f"k={self.k} outside 1..{M}")


@dataclass
class InteractionGraphs:
    """Per-direction distance matrices and their binarized k-NN graphs, all M x M."""

    A_ab: np.ndarray
    A_ba: np.ndarray
    dsig_ab: np.ndarray
    dsig_ba: np.ndarray
    k: int

    @property
    def M(self):
        return self.dsig_ab.shape[0]

    def swapped(self):
        """The same graphs seen from the other person's side."""
        return InteractionGraphs(self.A_ba, self.A_ab, self.dsig_ba, self.dsig_ab, self.k)


def part_centroids(seq, part_map):
    """Per-frame arithmetic mean of each part's joint coordinates: B arrays (T, 3)."""
    out = []
    for (name, _), idx in zip(part_map.parts, part_map.indices()):
        if idx.size == 0:
            raise ConfigError(f"part {name!r} has no joints")
        out.append(seq.coords[:, idx, :].mean(axis=1))
    return out


def downsample_to_steps(traj, cfg):
    """Average a (T, 3) trajectory over the tokenizer's conv windows -> (L, 3).

    Window j covers padded frames [j*stride, j*stride + P); only in-range
    original frames contribute (clipped windows, no zero frames).
    """
    t = traj.shape[0]
    if t != cfg.T:
        raise ConfigError(f"trajectory has {t} frames, config expects {cfg.T}")
    steps = np.empty((cfg.L, traj.shape[1]))
    for j in range(cfg.L):
        lo = max(0, j * cfg.stride - cfg.padding)
        hi = min(t, j * cfg.stride - cfg.padding + cfg.P)
        if hi <= lo:
            raise ConfigError(f"window {j} falls entirely outside the sequence")
        steps[j] = traj[lo:hi].mean(axis=0)
    return steps


def token_trajectory(seq, part_map, cfg):
    """(M, 3) centroid-per-token matrix in time-major token order."""
    centroids = part_centroids(seq, part_map)
    per_part = np.concatenate([downsample_to_steps(c, cfg) for c in centroids])
    return per_part[time_major_permutation(part_map.B, cfg.L)]


def pairwise_distance(tokens_a, tokens_b):
    """A[a, b] = Euclidean distance between token a of one person and b of the other."""
    diff = tokens_a[:, None, :] - tokens_b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def knn_threshold(A, k):
    """Row-wise k-NN binarization: 1 where A[a, b] <= k-th smallest of row a."""
    m = A.shape[1]
    if not 1 <= k <= m:
        raise ConfigError(f"k={k} outside 1..{m}")
    kth = np.partition(A, k - 1, axis=1)[:, k - 1:k]
    return (A <= kth).astype(np.float64)


def build_interaction_graphs(sample, part_map, spm_cfg, k):
    """Distance matrices and k-NN graphs for both directions of one sample."""
    ta = token_trajectory(sample.person_a, part_map, spm_cfg)
    tb = token_trajectory(sample.person_b, part_map, spm_cfg)
    a_ab = pairwise_distance(ta, tb)
    a_ba = a_ab.T.copy()
    cfg = DistanceGraphConfig(k=k)
    cfg.validate(a_ab.shape[0])
    return InteractionGraphs(a_ab, a_ba, knn_threshold(a_ab, k), knn_threshold(a_ba, k), k)


# -- sidecar ---------------------------------------------------------------

def _pack(matrix):
    return np.packbits(matrix.astype(bool).reshape(-1)).tobytes()


def write_sidecar(graphs):
    buf = io.BytesIO()
    buf.write(SIDECAR_MAGIC)
    buf.write(struct.pack("<II", graphs.M, graphs.k))
    buf.write(_pack(graphs.dsig_ab))
    buf.write(_pack(graphs.dsig_ba))
    return buf.getvalue()


def read_sidecar(data):
    """Returns (M, k, dsig_ab, dsig_ba); distance matrices are not stored."""
    if data[:4] != SIDECAR_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected {SIDECAR_MAGIC!r}")
    m, k = struct.unpack_from("<II", data, 4)
    nbytes = (m * m + 7) // 8
    if len(data) != 12 + 2 * nbytes:
        raise ParseError(f"sidecar length {len(data)} != expected {12 + 2 * nbytes}")
    def unpack(off):
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off))
        return bits[:m * m].reshape(m, m).astype(np.float64)
    return m, k, unpack(12), unpack(12 + nbytes)


def graphs_from_sidecar(data):
    """Graphs restored from a sidecar; distance matrices are None (not stored)."""
    m, k, ab, ba = read_sidecar(data)
    return InteractionGraphs(None, None, ab, ba, k)
