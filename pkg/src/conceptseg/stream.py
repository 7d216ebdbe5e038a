"""Synthetic sequential segmentation tasks.

Each task draws blob-lesion scenes, pushes them through a task-specific
intensity transform (the stand-in for an imaging modality) and mixes the
task's active concept directions into an auxiliary channel, so that
concept-side routing has a learnable, stable signal while the intensity
channel shifts freely between tasks.

Generation is lazy and keyed by (stream seed, task index): a task's
arrays can be regenerated bit-identically at any time, which is what
keeps the harness buffer-free (nothing from task j needs to survive past
task j for training task j+1).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .concepts import ConceptMatrix, TaskProfile, synth_concepts
from .errors import ValidationError

DEFAULT_COUNTS = (200, 30, 60)  # 70/10/20-ish split at desk scale
JITTER = 0.15     # per-sample concept-strength wobble
FIELD_RMS = 2.0   # fixed energy of the mixed concept field


@dataclass
class ModalityParams:
    """Monotone-ish intensity warp emulating an acquisition modality."""

    gain: float = 1.0
    bias: float = 0.0
    invert: bool = False
    curve: float = 0.0
    noise: float = 0.05

    def apply(self, scene: np.ndarray, rng: nm.Rng) -> np.ndarray:
        v = -scene if self.invert else scene
        v = self.gain * v + self.curve * v * v + self.bias
        return v + rng.normal(scene.shape, std=self.noise)


@dataclass
class SyntheticTaskSpec:
    name: str
    class_names: list[str]
    profile: dict[str, float]
    modality: ModalityParams
    blob_count: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (3.5, 7.0)
    lesion_contrast: float = 1.2
    n_train: int = DEFAULT_COUNTS[0]
    n_val: int = DEFAULT_COUNTS[1]
    n_test: int = DEFAULT_COUNTS[2]

    def validate(self) -> None:
        if not self.name:
            raise ValidationError("task spec needs a name")
        if not self.class_names:
            raise ValidationError(f"task {self.name!r} declares no classes")
        if not self.profile:
            raise ValidationError(f"task {self.name!r} has an empty concept profile")
        if self.blob_count[0] < 1 or self.blob_count[1] < self.blob_count[0]:
            raise ValidationError(f"task {self.name!r}: bad blob_count {self.blob_count}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValidationError(f"task {self.name!r}: all split counts must be >= 1")

    def to_profile(self) -> TaskProfile:
        return TaskProfile(task_name=self.name, activations=dict(self.profile))


@dataclass
class TaskData:
    """Materialized samples of one task; mask labels are task-local
    (0 background, 1..len(class_names) lesion classes)."""

    spec: SyntheticTaskSpec
    train_images: np.ndarray
    train_masks: np.ndarray
    val_images: np.ndarray
    val_masks: np.ndarray
    test_images: np.ndarray
    test_masks: np.ndarray


def _lowpass_field(flat: np.ndarray, size: int, cutoff: int = 5) -> np.ndarray:
    """Keep only low spatial frequencies of a (size*size,) field."""
    f = np.fft.rfft2(flat.reshape(size, size))
    fy = np.fft.fftfreq(size) * size
    fx = np.fft.rfftfreq(size) * size
    mask = (np.abs(fy)[:, None] <= cutoff) & (fx[None, :] <= cutoff)
    sm = np.fft.irfft2(f * mask, s=(size, size))
    rms = float(np.sqrt((sm * sm).mean()))
    return sm / max(rms, 1e-9)


class TaskStream:
    """Ordered synthetic tasks, generated on demand from the seed."""

    def __init__(self, specs: list[SyntheticTaskSpec], cm: ConceptMatrix,
                 seed: int, image_size: int = 32):
        if not specs:
            raise ValidationError("stream needs at least one task spec")
        names = set()
        for spec in specs:
            spec.validate()
            for c in spec.profile:
                if c not in cm.names:
                    raise ValidationError(
                        f"task {spec.name!r} references unknown concept {c!r}")
            for cls in spec.class_names:
                if cls in names:
                    raise ValidationError(f"class name {cls!r} reused across tasks")
                names.add(cls)
        self.specs = list(specs)
        self.cm = cm
        self.seed = seed
        self.image_size = image_size
        self._patterns = self._concept_patterns()

    def _concept_patterns(self, patch: int = 4) -> np.ndarray:
        """One fixed texture fingerprint per concept.

        Each concept tiles the image with its own row of a Hadamard basis
        at the patch scale, so distinct concepts are exactly orthogonal
        in the patch-phase observable that pooled token features retain.
        A seeded permutation decides which row belongs to which concept.
        """
        size = self.image_size
        cell = patch * patch
        h = np.ones((1, 1))
        while h.shape[0] < cell:
            h = np.block([[h, h], [h, -h]])  # Sylvester construction
        rng = nm.Rng(self.seed, 0xF1E1D)
        rows = 1 + rng.permutation(cell - 1)  # skip the DC row
        if self.cm.M > cell - 1:
            raise ValidationError(
                f"at most {cell - 1} concepts supported per stream, got {self.cm.M}")
        reps = size // patch
        fields = []
        for i in range(self.cm.M):
            micro = h[rows[i]].reshape(patch, patch)
            fields.append(np.tile(micro, (reps, reps)))
        return np.stack(fields, axis=0)  # (M, H, W), unit RMS each

    @property
    def task_count(self) -> int:
        return len(self.specs)

    def spec(self, t: int) -> SyntheticTaskSpec:
        return self.specs[t - 1]

    def profiles(self) -> list[TaskProfile]:
        return [s.to_profile() for s in self.specs]

    def task_data(self, t: int) -> TaskData:
        """Materialize task t (1-based); bit-identical on every call."""
        spec = self.spec(t)
        rng = nm.Rng(self.seed, 0xDA7A, t)
        n_total = spec.n_train + spec.n_val + spec.n_test
        size = self.image_size
        images = np.zeros((n_total, size, size, 2))
        masks = np.zeros((n_total, size, size), dtype=np.int64)
        strengths = np.array([spec.profile.get(c.name, 0.0)
                              for c in self.cm.concepts])
        active = np.nonzero(strengths)[0]
        yy, xx = np.mgrid[0:size, 0:size]
        for i in range(n_total):
            # lesion blobs
            n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
            mask = np.zeros((size, size), dtype=bool)
            for _ in range(n_blobs):
                r = float(rng.uniform(spec.radius[0], spec.radius[1]))
                cy = float(rng.uniform(r, size - r))
                cx = float(rng.uniform(r, size - r))
                mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            # intensity channel: textured background plus lesion contrast
            texture = _lowpass_field(rng.normal((size * size,)), size, cutoff=8)
            scene = 0.3 * texture + spec.lesion_contrast * mask
            images[i, :, :, 0] = spec.modality.apply(scene, rng)
            # concept channel: active directions, slightly stronger inside
            # the lesion, untouched by the modality transform; the mixed
            # field is normalized to a fixed energy so total channel power
            # carries no task identity
            jitter = 1.0 + JITTER * rng.normal((len(active),))
            f = np.zeros((size, size))
            for a_i, m_i in enumerate(active):
                f += strengths[m_i] * jitter[a_i] * self._patterns[m_i]
            rms = float(np.sqrt((f * f).mean()))
            f *= FIELD_RMS / max(rms, 1e-9)
            images[i, :, :, 1] = f * (1.0 + 0.3 * mask) \
                + rng.normal((size, size), std=0.05)
            masks[i][mask] = 1
        s0, s1 = spec.n_train, spec.n_train + spec.n_val
        return TaskData(
            spec=spec,
            train_images=images[:s0], train_masks=masks[:s0],
            val_images=images[s0:s1], val_masks=masks[s0:s1],
            test_images=images[s1:], test_masks=masks[s1:])


def generate_stream(specs: list[SyntheticTaskSpec], cm: ConceptMatrix,
                    seed: int, image_size: int = 32) -> TaskStream:
    """Validate the specs against the concept matrix and build the stream."""
    return TaskStream(specs, cm, seed, image_size)


# -- stock streams -------------------------------------------------------------

# Disease-like concept profiles; several tasks revisit a profile under a
# different modality, which is exactly the reuse structure the growth rule
# is supposed to exploit.
_PROFILES: dict[str, dict[str, float]] = {
    "P1": {"rim_enhancing": 2.6, "deep_white_matter": 1.9, "mass_effect": 1.2},
    "P2": {"periventricular": 2.6, "multifocal_dots": 2.0},
    "P3": {"cortical_band": 2.5, "hypointense_core": 1.9},
    "P4": {"diffuse_halo": 2.6, "midline_shift": 1.8},
    "P5": {"focal_round": 2.6, "hyperintense_core": 1.8},
    "P6": {"subcortical_patch": 2.5, "mass_effect": 1.1},
    "P7": {"vascular_track": 2.5, "multifocal_dots": 1.0},
}

_MODALITIES: list[ModalityParams] = [
    ModalityParams(gain=1.0, bias=0.0, invert=False, curve=0.0, noise=0.05),
    ModalityParams(gain=1.5, bias=0.4, invert=True, curve=0.0, noise=0.05),
    ModalityParams(gain=0.7, bias=-0.5, invert=False, curve=0.45, noise=0.07),
    ModalityParams(gain=1.2, bias=0.2, invert=True, curve=-0.35, noise=0.04),
    ModalityParams(gain=0.9, bias=-0.2, invert=False, curve=0.25, noise=0.09),
    ModalityParams(gain=1.6, bias=-0.4, invert=True, curve=0.3, noise=0.05),
    ModalityParams(gain=0.6, bias=0.5, invert=False, curve=-0.3, noise=0.06),
    ModalityParams(gain=1.3, bias=-0.1, invert=True, curve=0.15, noise=0.08),
    ModalityParams(gain=0.8, bias=0.3, invert=False, curve=0.5, noise=0.05),
    ModalityParams(gain=1.4, bias=0.1, invert=True, curve=-0.2, noise=0.07),
    ModalityParams(gain=1.1, bias=-0.3, invert=False, curve=0.35, noise=0.04),
    ModalityParams(gain=0.75, bias=0.25, invert=True, curve=0.4, noise=0.06),
]


def _task(i: int, profile_key: str, modality_idx: int,
          counts: tuple[int, int, int]) -> SyntheticTaskSpec:
    return SyntheticTaskSpec(
        name=f"task{i:02d}_{profile_key}_m{modality_idx + 1}",
        class_names=[f"lesion_t{i:02d}"],
        profile=dict(_PROFILES[profile_key]),
        modality=_MODALITIES[modality_idx],
        n_train=counts[0], n_val=counts[1], n_test=counts[2])


def default_stream_specs(counts: tuple[int, int, int] = DEFAULT_COUNTS
                         ) -> list[SyntheticTaskSpec]:
    """Twelve tasks over seven profiles; five tasks repeat an earlier
    profile under a new modality."""
    order = ["P1", "P1", "P2", "P1", "P3", "P2", "P4", "P5", "P2", "P6", "P3", "P7"]
    return [_task(i + 1, p, i, counts) for i, p in enumerate(order)]


def four_task_specs(counts: tuple[int, int, int] = DEFAULT_COUNTS
                    ) -> list[SyntheticTaskSpec]:
    """Four fully distinct tasks (profile and modality both novel)."""
    order = ["P1", "P2", "P3", "P4"]
    return [_task(i + 1, p, i, counts) for i, p in enumerate(order)]


def pair_specs(kind: str, counts: tuple[int, int, int] = DEFAULT_COUNTS
               ) -> list[SyntheticTaskSpec]:
    """Two-task probes for the dual-signal decision.

    kind: "repeat" (same profile, same modality), "imageshift" (same
    profile, new modality), "fullshift" (new profile, new modality).
    """
    first = _task(1, "P1", 0, counts)
    if kind == "repeat":
        second = _task(2, "P1", 0, counts)
    elif kind == "imageshift":
        second = _task(2, "P1", 1, counts)
    elif kind == "fullshift":
        second = _task(2, "P4", 1, counts)
    else:
        raise ValidationError(f"unknown pair kind {kind!r}")
    return [first, second]


STOCK_STREAMS = {
    "default12": default_stream_specs,
    "four": four_task_specs,
    "pair_repeat": lambda counts=DEFAULT_COUNTS: pair_specs("repeat", counts),
    "pair_imageshift": lambda counts=DEFAULT_COUNTS: pair_specs("imageshift", counts),
    "pair_fullshift": lambda counts=DEFAULT_COUNTS: pair_specs("fullshift", counts),
}


def stock_stream(name: str, cm: ConceptMatrix | None, seed: int,
                 counts: tuple[int, int, int] = DEFAULT_COUNTS,
                 d_t: int = 32, image_size: int = 32) -> TaskStream:
    """Build a named stream; synthesizes its concept matrix when none given."""
    if name not in STOCK_STREAMS:
        raise ValidationError(
            f"unknown stream {name!r}; available: {sorted(STOCK_STREAMS)}")
    specs = STOCK_STREAMS[name](counts)
    if cm is None:
        cm = synth_concepts([s.to_profile() for s in specs], d_t=d_t, seed=seed)
    return generate_stream(specs, cm, seed, image_size)


# -- stream spec (de)serialization ---------------------------------------------


def save_stream_specs(specs: list[SyntheticTaskSpec], path) -> None:
    payload = {"tasks": []}
    for s in specs:
        d = asdict(s)
        d["modality"] = asdict(s.modality)
        payload["tasks"].append(d)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_stream_specs(path) -> list[SyntheticTaskSpec]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    specs = []
    for d in payload["tasks"]:
        d = dict(d)
        d["modality"] = ModalityParams(**d["modality"])
        d["blob_count"] = tuple(d["blob_count"])
        d["radius"] = tuple(d["radius"])
        specs.append(SyntheticTaskSpec(**d))
    for s in specs:
        s.validate()
    return specs
