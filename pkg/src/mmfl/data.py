"""Synthetic multi-modal multi-label data and client partitioning.

Every sample has a latent vector drawn around its group's mean. Labels are
signs of fixed random hyperplanes through latent space, and each modality
renders the latent through its own fixed random linear map, a tanh, and
Gaussian noise. All modalities of one sample therefore describe the same
latent, which is what makes cross-modal alignment meaningful.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyDataset, FormatError, InvalidSpec, TooFewGroups
from .wire import pack_container, unpack_container

DATA_MAGIC = b"FMD1"
DATA_VERSION = 1


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    channels: int
    noise: float = 0.1
    # number of latent directions the modality observes; None means all
    view_rank: int | None = None


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 2400
    n_labels: int = 5
    latent_dim: int = 8
    n_groups: int = 12
    group_skew: float = 0.7
    image_size: int = 4
    modalities: tuple[ModalitySpec, ...] = (ModalitySpec("modA", 2), ModalitySpec("modB", 6))
    group_separation: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 0 or self.n_labels < 2 or self.latent_dim < 1 or self.n_groups < 1:
            raise InvalidSpec(f"invalid sizes in {self}")
        if not 0 <= self.group_skew <= 1:
            raise InvalidSpec(f"group_skew must lie in [0, 1], got {self.group_skew}")
        if self.image_size < 1 or not self.modalities:
            raise InvalidSpec("need a positive image size and at least one modality")
        for m in self.modalities:
            if m.channels < 1 or m.noise < 0:
                raise InvalidSpec(f"invalid modality {m}")
            if m.view_rank is not None and not 1 <= m.view_rank <= self.latent_dim:
                raise InvalidSpec(f"view_rank of {m.name} must lie in [1, {self.latent_dim}]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        if "modalities" in d:
            d["modalities"] = tuple(ModalitySpec(**m) for m in d["modalities"])
        return cls(**d)


@dataclass
class MultiModalDataset:
    spec: DatasetSpec
    ids: np.ndarray
    groups: np.ndarray
    images: list[np.ndarray]
    labels: np.ndarray
    latents: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "MultiModalDataset":
        index = np.asarray(index, dtype=np.int64)
        return MultiModalDataset(
            spec=self.spec,
            ids=self.ids[index],
            groups=self.groups[index],
            images=[img[index] for img in self.images],
            labels=self.labels[index],
            latents=self.latents[index],
        )


def _label_bias(proj: np.ndarray, rng: np.random.Generator) -> float:
    for _ in range(1000):
        b = rng.normal(0.0, 1.0)
        prevalence = (proj + b > 0).mean() if proj.size else 0.5
        if 0.05 <= prevalence <= 0.95:
            return b
    raise InvalidSpec("could not place a label hyperplane with prevalence in [0.05, 0.95]")


def generate_dataset(spec: DatasetSpec = DatasetSpec()) -> MultiModalDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, d, L, G = spec.n_samples, spec.latent_dim, spec.n_labels, spec.n_groups
    scale = spec.group_skew * spec.group_separation
    group_means = scale * rng.standard_normal((G, d))
    groups = rng.permutation(np.arange(n) % G)
    latents = group_means[groups] + rng.standard_normal((n, d))

    planes = rng.standard_normal((L, d))
    planes /= np.linalg.norm(planes, axis=1, keepdims=True)
    biases = np.array([_label_bias(latents @ planes[k], rng) for k in range(L)])

    labels = (latents @ planes.T + biases > 0)
    for _ in range(1000):
        empty = np.flatnonzero(~labels.any(axis=1))
        if empty.size == 0:
            break
        latents[empty] = group_means[groups[empty]] + rng.standard_normal((empty.size, d))
        labels[empty] = latents[empty] @ planes.T + biases > 0
    else:
        raise InvalidSpec("could not draw samples with at least one positive label")

    images = []
    hw = spec.image_size ** 2
    for m in spec.modalities:
        mixing = rng.standard_normal((m.channels * hw, d)) / np.sqrt(d)
        if m.view_rank is not None and m.view_rank < d:
            basis, _ = np.linalg.qr(rng.standard_normal((d, m.view_rank)))
            mixing = mixing @ basis @ basis.T * np.sqrt(d / m.view_rank)
        clean = np.tanh(latents @ mixing.T)
        noisy = clean + m.noise * rng.standard_normal(clean.shape)
        images.append(noisy.reshape(n, m.channels, spec.image_size, spec.image_size).astype(np.float32))

    return MultiModalDataset(
        spec=spec,
        ids=np.arange(n, dtype=np.int64),
        groups=groups.astype(np.int64),
        images=images,
        labels=labels.astype(np.uint8),
        latents=latents.astype(np.float32),
    )


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------


@dataclass
class ClientData:
    client_id: int
    modality: int
    ids: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Partition:
    scenario: int
    clients: list[ClientData]
    test: MultiModalDataset
    modality_names: list[str] = field(default_factory=list)


def default_modality_of(K: int, P: int) -> tuple[int, ...]:
    """Contiguous blocks: the first ceil(K/P) clients hold modality 0, and so on."""
    if K < P or P < 1:
        raise InvalidSpec(f"need K >= P >= 1, got K={K}, P={P}")
    return tuple(int(i * P // K) for i in range(K))


def _stratified_test_split(ds: MultiModalDataset, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    test = []
    for g in np.unique(ds.groups):
        members = np.flatnonzero(ds.groups == g)
        k = int(round(fraction * members.size))
        test.append(rng.permutation(members)[:k])
    test_idx = np.sort(np.concatenate(test)) if test else np.zeros(0, dtype=np.int64)
    train_idx = np.setdiff1d(np.arange(len(ds)), test_idx)
    return train_idx, test_idx


def partition(
    ds: MultiModalDataset,
    K: int = 6,
    modality_of: Sequence[int] | None = None,
    scenario: int = 1,
    seed: int = 0,
    test_fraction: float = 0.2,
    min_client_size: int = 1,
) -> Partition:
    """Split ``ds`` into a multi-modal test set and single-modality clients.

    Scenario 1 deals shuffled samples round-robin; scenario 2 hands out whole
    groups, each to the currently smallest client. For every modality the
    training samples are divided over that modality's clients, so each sample
    is seen by exactly one client per modality.
    """
    if scenario not in (1, 2):
        raise InvalidSpec(f"scenario must be 1 or 2, got {scenario}")
    if not 0 < test_fraction < 1:
        raise InvalidSpec("test_fraction must lie in (0, 1)")
    P = len(ds.images)
    modality_of = tuple(modality_of) if modality_of is not None else default_modality_of(K, P)
    if len(modality_of) != K or set(modality_of) != set(range(P)):
        raise InvalidSpec(f"modality_of {modality_of} must cover all {P} modalities with {K} clients")

    train_idx, test_idx = _stratified_test_split(ds, test_fraction, np.random.default_rng([seed, 7919]))
    rng = np.random.default_rng([seed, scenario])
    assignment: dict[int, np.ndarray] = {}
    for m in range(P):
        members = [i for i in range(K) if modality_of[i] == m]
        if scenario == 1:
            order = rng.permutation(train_idx)
            for j, cid in enumerate(members):
                assignment[cid] = np.sort(order[j::len(members)])
        else:
            train_groups = ds.groups[train_idx]
            present = np.unique(train_groups)
            if present.size < len(members):
                raise TooFewGroups(f"{present.size} groups cannot fill {len(members)} clients of modality {m}")
            sizes = {g: int((train_groups == g).sum()) for g in present}
            order = sorted(rng.permutation(present), key=lambda g: -sizes[g])
            load = {cid: 0 for cid in members}
            owned: dict[int, list[int]] = {cid: [] for cid in members}
            for g in order:
                cid = min(members, key=lambda c: (load[c], c))
                owned[cid].append(g)
                load[cid] += sizes[g]
            for cid in members:
                assignment[cid] = np.sort(train_idx[np.isin(train_groups, owned[cid])])

    clients = []
    for cid in range(K):
        idx = assignment[cid]
        if idx.size < max(min_client_size, 1):
            raise EmptyDataset(f"client {cid} received {idx.size} samples (< {max(min_client_size, 1)})")
        m = modality_of[cid]
        clients.append(ClientData(cid, m, ds.ids[idx], ds.images[m][idx], ds.labels[idx]))
    names = [m.name for m in ds.spec.modalities]
    return Partition(scenario, clients, ds.subset(test_idx), names)


def label_distribution(labels: np.ndarray) -> np.ndarray:
    counts = np.asarray(labels, dtype=np.float64).sum(axis=0)
    total = counts.sum()
    return counts / total if total > 0 else np.full(counts.shape, 1.0 / counts.size)


def label_divergence(part: Partition) -> float:
    """Mean pairwise total-variation distance between client label distributions."""
    dists = [label_distribution(c.labels) for c in part.clients]
    pairs = [0.5 * np.abs(a - b).sum() for a, b in combinations(dists, 2)]
    return float(np.mean(pairs)) if pairs else 0.0


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def write_dataset(ds: MultiModalDataset, path) -> None:
    """Write ``ds`` as an FMD1 container (see README for the layout)."""
    blocks, chunks, offset = [], [], 0
    arrays = [(f"images/{m.name}", "f32", img) for m, img in zip(ds.spec.modalities, ds.images)]
    arrays += [("labels", "u8", ds.labels), ("latents", "f32", ds.latents)]
    for name, code, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        stride = len(raw) // len(ds) if len(ds) else 0
        blocks.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset,
                       "len": len(raw), "stride": stride})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": DATA_VERSION,
        "spec": ds.spec.to_dict(),
        "samples": [{"id": int(i), "group": int(g)} for i, g in zip(ds.ids, ds.groups)],
        "blocks": blocks,
        "crc32": zlib.crc32(payload),
    }
    Path(path).write_bytes(pack_container(DATA_MAGIC, header, payload))


def read_dataset(path) -> MultiModalDataset:
    blob = Path(path).read_bytes()
    header, payload = unpack_container(blob, DATA_MAGIC, error=FormatError)
    if header.get("version") != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {header.get('version')!r}")
    try:
        spec = DatasetSpec.from_dict(header["spec"])
        samples = header["samples"]
        blocks = {b["name"]: b for b in header["blocks"]}
        crc = header["crc32"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"incomplete dataset header: {exc}") from None
    if sum(b["len"] for b in blocks.values()) != len(payload):
        raise FormatError(f"payload is {len(payload)} bytes, header describes more or less")
    if zlib.crc32(payload) != crc:
        raise FormatError("payload checksum mismatch")

    def block(name):
        if name not in blocks:
            raise FormatError(f"missing block {name!r}")
        b = blocks[name]
        dt = _DTYPES[b["dtype"]]
        count = int(np.prod(b["shape"], dtype=np.int64))
        if count * dt.itemsize != b["len"] or b["offset"] + b["len"] > len(payload):
            raise FormatError(f"block {name!r} size does not match its shape")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=b["offset"]).reshape(b["shape"])
        return arr.astype(np.float32 if b["dtype"] == "f32" else np.uint8)

    return MultiModalDataset(
        spec=spec,
        ids=np.array([s["id"] for s in samples], dtype=np.int64),
        groups=np.array([s["group"] for s in samples], dtype=np.int64),
        images=[block(f"images/{m.name}") for m in spec.modalities],
        labels=block("labels"),
        latents=block("latents"),
    )
