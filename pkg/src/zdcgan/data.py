"""Dataset model for proton-ZDC responses: synthetic generation, binary on-disk
format, group-aware train/test splitting and the preprocessing statistics
(diversity weight, reference intensity, shower center) consumed by the losses.

A response is a 56x30 image of non-negative pixel values. Samples sharing a
bit-identical 9-component conditioning vector form a "group"; all per-group
statistics are computed over group members in ascending index order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

HEIGHT = 56
WIDTH = 30
COND_DIM = 9
N_PIXELS = HEIGHT * WIDTH
FORMAT_VERSION = 1

# Ranges used when drawing conditioning vectors; mass and charge also feed the
# smooth maps deriving blob size and per-group diversity (see synth_dataset).
MASS_RANGE = (0.1, 1.0)
CHARGE_RANGE = (-1.5, 1.5)


class DatasetFormatError(ValueError):
    """On-disk dataset or stats file failed validation."""


def validate_conditions(conditions: np.ndarray) -> np.ndarray:
    """Check a (n, 9) array of conditioning vectors: finite, energy > 0."""
    arr = np.asarray(conditions)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != COND_DIM:
        raise ValueError(f"conditions must have {COND_DIM} components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("conditions contain non-finite values")
    if np.any(arr[:, 0] <= 0):
        raise ValueError("energy (component 0) must be > 0")
    return arr


def validate_responses(responses: np.ndarray) -> np.ndarray:
    """Check a (n, 56, 30) array of responses: finite, non-negative."""
    arr = np.asarray(responses)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3 or arr.shape[1:] != (HEIGHT, WIDTH):
        raise ValueError(f"responses must be shaped (n, {HEIGHT}, {WIDTH}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("responses contain non-finite values")
    if np.any(arr < 0):
        raise ValueError("responses contain negative pixel values")
    return arr


@dataclass(frozen=True)
class SynthProfile:
    """Knobs of the synthetic response generator.

    energy_range draws log-uniform energies; intensity_scale maps energy to the
    base pixel sum of a group. blob_sigma_range must be strictly positive
    (spatial spread of the Gaussian blob); jitter_scale and
    intensity_noise_scale may be zero, in which case every group's responses
    are identical.
    """

    energy_range: tuple[float, float] = (0.5, 8.0)
    intensity_scale: float = 150.0
    blob_sigma_range: tuple[float, float] = (1.5, 3.5)
    jitter_scale: float = 1.0
    intensity_noise_scale: float = 0.3
    margin: float = 3.0

    def validate(self) -> None:
        lo, hi = self.energy_range
        if not (0 < lo <= hi):
            raise ValueError("energy_range must be positive and ordered")
        slo, shi = self.blob_sigma_range
        if not (0 < slo <= shi):
            raise ValueError("blob_sigma_range must be strictly positive and ordered")
        if self.intensity_scale <= 0:
            raise ValueError("intensity_scale must be > 0")
        if self.jitter_scale < 0 or self.intensity_noise_scale < 0:
            raise ValueError("noise scales must be >= 0")
        if not (0 <= self.margin < min(HEIGHT, WIDTH) / 2):
            raise ValueError("margin out of range")

    @staticmethod
    def from_dict(d: dict) -> "SynthProfile":
        d = dict(d)
        for key in ("energy_range", "blob_sigma_range"):
            if key in d:
                d[key] = tuple(d[key])
        return SynthProfile(**d)


@dataclass
class Sample:
    condition: np.ndarray  # (9,)
    response: np.ndarray   # (56, 30)
    group_id: int


@dataclass
class Dataset:
    """Ordered samples plus the table of condition groups.

    groups maps group_id -> ascending sample indices sharing a bit-identical
    conditioning vector. Every sample index belongs to exactly one group.
    """

    conditions: np.ndarray          # (n, 9) float32
    responses: np.ndarray           # (n, 56, 30) float32
    group_ids: np.ndarray           # (n,) int64
    groups: dict[int, np.ndarray]   # group_id -> (m,) int64 indices
    seed: int | None = None
    profile: SynthProfile | None = None

    def __len__(self) -> int:
        return self.conditions.shape[0]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def sample(self, i: int) -> Sample:
        return Sample(self.conditions[i], self.responses[i], int(self.group_ids[i]))

    def validate(self) -> None:
        validate_conditions(self.conditions)
        validate_responses(self.responses)
        seen = np.zeros(len(self), dtype=np.int64)
        for gid, idx in self.groups.items():
            seen[idx] += 1
            if np.any(self.group_ids[idx] != gid):
                raise ValueError(f"group {gid} index list disagrees with group_ids")
            cond = self.conditions[idx]
            if not np.all(cond == cond[0]):
                raise ValueError(f"group {gid} has non-identical conditioning vectors")
        if np.any(seen != 1):
            raise ValueError("every sample index must appear in exactly one group")


@dataclass
class GroupStats:
    """Preprocessing products of one condition group.

    diversity_weight_raw is the sum over pixels of the population standard
    deviation across group members; diversity_weight is that value divided by
    the dataset size, clamped into [0, 1]. intensity and center come from the
    group's reference sample (its lowest member index).
    """

    diversity_weight_raw: float
    diversity_weight: float
    intensity: float
    center: tuple[float, float]
    reference_index: int


@dataclass
class DatasetStats:
    per_group: dict[int, GroupStats]
    normalization_constant: float

    def to_dict(self) -> dict:
        return {
            "normalization_constant": self.normalization_constant,
            "per_group": {
                str(gid): {
                    "diversity_weight_raw": gs.diversity_weight_raw,
                    "diversity_weight": gs.diversity_weight,
                    "intensity": gs.intensity,
                    "center": list(gs.center),
                    "reference_index": gs.reference_index,
                }
                for gid, gs in self.per_group.items()
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetStats":
        per_group = {
            int(gid): GroupStats(
                diversity_weight_raw=float(gs["diversity_weight_raw"]),
                diversity_weight=float(gs["diversity_weight"]),
                intensity=float(gs["intensity"]),
                center=(float(gs["center"][0]), float(gs["center"][1])),
                reference_index=int(gs["reference_index"]),
            )
            for gid, gs in d["per_group"].items()
        }
        return DatasetStats(per_group, float(d["normalization_constant"]))


def intensity(x: np.ndarray) -> float:
    """Total pixel sum of one response."""
    x = validate_responses(x)[0]
    return float(np.sum(x, dtype=np.float64))


def intensities(responses: np.ndarray) -> np.ndarray:
    """Pixel sums of a batch of responses, shape (n,)."""
    arr = np.asarray(responses, dtype=np.float64)
    return arr.reshape(arr.shape[0], -1).sum(axis=1)


def find_max_pixel(x: np.ndarray) -> tuple[float, float]:
    """(row, col) of the highest-value pixel; ties go to the smallest
    row-major linear index."""
    x = np.asarray(x)
    if x.shape != (HEIGHT, WIDTH):
        raise ValueError(f"expected ({HEIGHT}, {WIDTH}) response, got {x.shape}")
    flat = int(np.argmax(x))
    return (float(flat // WIDTH), float(flat % WIDTH))


def find_max_pixels(responses: np.ndarray) -> np.ndarray:
    """Per-response argmax coordinates, shape (n, 2) float64."""
    arr = np.asarray(responses)
    flat = np.argmax(arr.reshape(arr.shape[0], -1), axis=1)
    return np.stack([flat // WIDTH, flat % WIDTH], axis=1).astype(np.float64)


def synth_dataset(
    seed: int,
    n_groups: int,
    samples_per_group: int,
    profile: SynthProfile | None = None,
) -> Dataset:
    """Deterministic synthetic ZDC-like dataset.

    Each group draws one conditioning vector
    [energy, mass, charge, pos_x, pos_y, pos_z, mom_x, mom_y, mom_z] and
    derives, through fixed smooth maps:
      * shower center: grid midpoint + 0.32*extent * tanh(0.9*pos + 0.35*mom)
        per axis, clipped to the grid interior (profile.margin);
      * base intensity: intensity_scale * energy (monotone in energy);
      * blob sigma: linear in mass over blob_sigma_range;
      * diversity factor u = min(1, |charge|), scaling both the per-sample
        center jitter (std jitter_scale*u) and the multiplicative log-normal
        intensity noise (sigma intensity_noise_scale*u), so low- and
        high-diversity groups coexist.
    Responses are Gaussian blobs rendered on the 56x30 grid; all pixels >= 0.
    """
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    if samples_per_group < 2:
        raise ValueError("samples_per_group must be >= 2 (per-group variance undefined otherwise)")
    profile = profile if profile is not None else SynthProfile()
    profile.validate()

    rng = np.random.default_rng(seed)
    n = n_groups * samples_per_group
    conditions = np.empty((n, COND_DIM), dtype=np.float32)
    responses = np.empty((n, HEIGHT, WIDTH), dtype=np.float32)
    group_ids = np.repeat(np.arange(n_groups, dtype=np.int64), samples_per_group)

    rows = np.arange(HEIGHT, dtype=np.float64)[:, None]
    cols = np.arange(WIDTH, dtype=np.float64)[None, :]
    e_lo, e_hi = profile.energy_range
    s_lo, s_hi = profile.blob_sigma_range
    m_lo, m_hi = MASS_RANGE

    for g in range(n_groups):
        energy = math.exp(rng.uniform(math.log(e_lo), math.log(e_hi)))
        mass = rng.uniform(*MASS_RANGE)
        charge = rng.uniform(*CHARGE_RANGE)
        pos = rng.uniform(-1.0, 1.0, size=3)
        mom = rng.uniform(-1.0, 1.0, size=3)
        cond = np.array([energy, mass, charge, *pos, *mom], dtype=np.float32)

        center_k = HEIGHT / 2 + 0.32 * HEIGHT * math.tanh(0.9 * pos[0] + 0.35 * mom[0])
        center_l = WIDTH / 2 + 0.32 * WIDTH * math.tanh(0.9 * pos[1] + 0.35 * mom[1])
        center_k = min(max(center_k, profile.margin), HEIGHT - 1 - profile.margin)
        center_l = min(max(center_l, profile.margin), WIDTH - 1 - profile.margin)
        base_intensity = profile.intensity_scale * energy
        sigma = s_lo + (s_hi - s_lo) * (mass - m_lo) / (m_hi - m_lo)
        u = min(1.0, abs(charge))

        base = g * samples_per_group
        for t in range(samples_per_group):
            # Draw order is fixed so the stream is identical across profiles.
            jitter = rng.standard_normal(2) * (profile.jitter_scale * u)
            scale = math.exp(rng.standard_normal() * (profile.intensity_noise_scale * u))
            ck = min(max(center_k + jitter[0], 0.0), HEIGHT - 1.0)
            cl = min(max(center_l + jitter[1], 0.0), WIDTH - 1.0)
            amp = base_intensity * scale / (2 * math.pi * sigma * sigma)
            blob = amp * np.exp(-((rows - ck) ** 2 + (cols - cl) ** 2) / (2 * sigma * sigma))
            conditions[base + t] = cond
            responses[base + t] = blob.astype(np.float32)

    groups = {
        g: np.arange(g * samples_per_group, (g + 1) * samples_per_group, dtype=np.int64)
        for g in range(n_groups)
    }
    return Dataset(conditions, responses, group_ids, groups, seed=seed, profile=profile)


def split(dataset: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split by whole condition groups: ceil(ratio * n_groups) groups go to the
    first half, the remainder to the second. Deterministic given seed."""
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    if not (0.0 < ratio < 1.0):
        raise ValueError("ratio must be in (0, 1)")
    gids = np.array(sorted(dataset.groups), dtype=np.int64)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(gids))
    n_first = math.ceil(ratio * len(gids))
    first = set(gids[perm[:n_first]].tolist())
    return _take_groups(dataset, first), _take_groups(dataset, set(gids.tolist()) - first)


def _take_groups(dataset: Dataset, keep: set[int]) -> Dataset:
    mask = np.isin(dataset.group_ids, list(keep))
    idx = np.nonzero(mask)[0]
    remap = {int(old): new for new, old in enumerate(idx)}
    groups = {
        gid: np.array([remap[int(i)] for i in dataset.groups[gid]], dtype=np.int64)
        for gid in sorted(keep)
    }
    return Dataset(
        conditions=dataset.conditions[idx].copy(),
        responses=dataset.responses[idx].copy(),
        group_ids=dataset.group_ids[idx].copy(),
        groups=groups,
        seed=dataset.seed,
        profile=dataset.profile,
    )


def compute_stats(dataset: Dataset) -> DatasetStats:
    """Per-group diversity weight, reference intensity and reference center.

    The raw diversity weight is sum_ij sqrt(sum_t (x_ij^t - mu_ij)^2 / m) over
    the m group members (population convention); the normalized weight divides
    by the total sample count and clamps into [0, 1]. Reference sample =
    lowest index in the group. Groups of size 1 get raw weight 0.
    """
    if len(dataset) == 0:
        raise ValueError("cannot compute stats on an empty dataset")
    norm = float(len(dataset))
    per_group: dict[int, GroupStats] = {}
    for gid in sorted(dataset.groups):
        idx = np.sort(dataset.groups[gid])
        members = dataset.responses[idx].astype(np.float64)
        mu = members.mean(axis=0)
        var = np.mean((members - mu) ** 2, axis=0)
        raw = float(np.sum(np.sqrt(var)))
        ref = int(idx[0])
        per_group[gid] = GroupStats(
            diversity_weight_raw=raw,
            diversity_weight=min(1.0, raw / norm),
            intensity=intensity(dataset.responses[ref]),
            center=find_max_pixel(dataset.responses[ref]),
            reference_index=ref,
        )
    return DatasetStats(per_group, norm)


def save_stats(stats: DatasetStats, path: str | Path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True))


def load_stats(path: str | Path) -> DatasetStats:
    try:
        return DatasetStats.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"malformed stats file {path}: {e}") from e


def save_dataset(dataset: Dataset, directory: str | Path) -> None:
    """Write manifest.json, conditions.bin, responses.bin and groups.json.

    Binary payloads are float32 little-endian, row-major; the round trip with
    load_dataset is bit-exact.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": FORMAT_VERSION,
        "n_samples": len(dataset),
        "n_groups": dataset.n_groups,
        "height": HEIGHT,
        "width": WIDTH,
        "cond_dim": COND_DIM,
        "dtype": "f32le",
        "seed": dataset.seed,
        "profile": asdict(dataset.profile) if dataset.profile is not None else None,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (d / "conditions.bin").write_bytes(
        np.ascontiguousarray(dataset.conditions, dtype="<f4").tobytes()
    )
    (d / "responses.bin").write_bytes(
        np.ascontiguousarray(dataset.responses, dtype="<f4").tobytes()
    )
    groups = {str(gid): dataset.groups[gid].tolist() for gid in sorted(dataset.groups)}
    (d / "groups.json").write_text(json.dumps(groups, indent=2))


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"cannot read manifest in {d}: {e}") from e
    for key in ("version", "n_samples", "n_groups", "height", "width", "cond_dim", "dtype"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest missing field '{key}'")
    if manifest["height"] != HEIGHT or manifest["width"] != WIDTH:
        raise DatasetFormatError(
            f"manifest shape {manifest['height']}x{manifest['width']} != {HEIGHT}x{WIDTH}"
        )
    if manifest["cond_dim"] != COND_DIM:
        raise DatasetFormatError(f"manifest cond_dim {manifest['cond_dim']} != {COND_DIM}")
    if manifest["dtype"] != "f32le":
        raise DatasetFormatError(f"unsupported dtype {manifest['dtype']!r}")
    n = int(manifest["n_samples"])

    cond_bytes = (d / "conditions.bin").read_bytes()
    if len(cond_bytes) != n * COND_DIM * 4:
        raise DatasetFormatError(
            f"conditions.bin has {len(cond_bytes)} bytes, expected {n * COND_DIM * 4}"
        )
    resp_bytes = (d / "responses.bin").read_bytes()
    if len(resp_bytes) != n * N_PIXELS * 4:
        raise DatasetFormatError(
            f"responses.bin has {len(resp_bytes)} bytes, expected {n * N_PIXELS * 4}"
        )
    conditions = np.frombuffer(cond_bytes, dtype="<f4").reshape(n, COND_DIM).copy()
    responses = np.frombuffer(resp_bytes, dtype="<f4").reshape(n, HEIGHT, WIDTH).copy()
    if not np.all(np.isfinite(conditions)) or not np.all(np.isfinite(responses)):
        raise DatasetFormatError("binary payloads contain non-finite values")
    if np.any(responses < 0):
        raise DatasetFormatError("responses contain negative pixel values")

    try:
        groups_raw = json.loads((d / "groups.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"cannot read groups.json: {e}") from e
    groups = {int(g): np.array(idx, dtype=np.int64) for g, idx in groups_raw.items()}
    if len(groups) != int(manifest["n_groups"]):
        raise DatasetFormatError("group count disagrees with manifest")
    group_ids = np.full(n, -1, dtype=np.int64)
    for gid, idx in groups.items():
        if np.any(idx < 0) or np.any(idx >= n):
            raise DatasetFormatError(f"group {gid} has out-of-range sample indices")
        group_ids[idx] = gid
    if np.any(group_ids < 0):
        raise DatasetFormatError("some samples belong to no group")

    profile = manifest.get("profile")
    ds = Dataset(
        conditions=conditions,
        responses=responses,
        group_ids=group_ids,
        groups=groups,
        seed=manifest.get("seed"),
        profile=SynthProfile.from_dict(profile) if profile else None,
    )
    ds.validate()
    return ds
