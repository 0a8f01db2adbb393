"""Synthetic identity world with hidden ground truth.

A world holds J identities, each with a fixed audio centroid and a visual
centroid correlated with it through an orthonormal mixing map.  Every
utterance is a per-sample offset of its identity's centroids (channel noise);
training observations are produced on demand by adding content noise (crops)
and augmentation noise.  The serialized world file carries only observable
data; identity labels live in a separate truth sidecar so that training code
can be handed views with no path back to the labels.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateTrials,
    InsufficientIdentities,
    InvalidConfig,
    InvalidRate,
    TruthUnavailable,
    UnknownUtterance,
)
from .numkit import Rng

SCHEMA_VERSION = 1

NUM_LONG_VIEWS = 2
NUM_SHORT_VIEWS = 4


@dataclass(frozen=True)
class WorldConfig:
    num_identities: int = 20
    utterances_per_identity: int = 50
    obs_dim_audio: int = 32
    obs_dim_visual: int = 24
    channel_noise_std: float = 1.2
    content_noise_std_long: float = 0.15
    content_noise_std_short: float = 0.45
    augment_noise_std: float = 0.6
    test_noise_std: float = 2.5
    modality_correlation: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.num_identities < 2:
            raise InvalidConfig("need at least 2 identities")
        if self.utterances_per_identity < 1:
            raise InvalidConfig("need at least 1 utterance per identity")
        if self.obs_dim_audio < 1 or self.obs_dim_visual < 1:
            raise InvalidConfig("observation dims must be positive")
        if self.obs_dim_visual > self.obs_dim_audio:
            raise InvalidConfig("visual dim must not exceed audio dim")
        for name in ("channel_noise_std", "content_noise_std_long",
                     "content_noise_std_short", "augment_noise_std",
                     "test_noise_std"):
            if getattr(self, name) < 0.0:
                raise InvalidConfig(f"{name} must be >= 0")
        if self.content_noise_std_short < self.content_noise_std_long:
            raise InvalidConfig("short-view noise must be >= long-view noise")
        if not 0.0 <= self.modality_correlation <= 1.0:
            raise InvalidConfig("modality_correlation must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "num_identities": self.num_identities,
            "utterances_per_identity": self.utterances_per_identity,
            "obs_dim_audio": self.obs_dim_audio,
            "obs_dim_visual": self.obs_dim_visual,
            "channel_noise_std": self.channel_noise_std,
            "content_noise_std_long": self.content_noise_std_long,
            "content_noise_std_short": self.content_noise_std_short,
            "augment_noise_std": self.augment_noise_std,
            "test_noise_std": self.test_noise_std,
            "modality_correlation": self.modality_correlation,
            "seed": self.seed,
        }


@dataclass(frozen=True, eq=False)
class TrainView:
    """What training code is allowed to see: an id and the raw observations."""

    sample_id: str
    audio: np.ndarray
    visual: np.ndarray


@dataclass(frozen=True)
class Trial:
    a: str
    b: str
    target: bool


@dataclass(frozen=True, eq=False)
class CropSet:
    """Exactly 2 long (low-noise) and 4 short (high-noise) views of one sample."""

    long_views: list
    short_views: list

    def __post_init__(self):
        if len(self.long_views) != NUM_LONG_VIEWS:
            raise InvalidConfig(f"need exactly {NUM_LONG_VIEWS} long views")
        if len(self.short_views) != NUM_SHORT_VIEWS:
            raise InvalidConfig(f"need exactly {NUM_SHORT_VIEWS} short views")


@dataclass(eq=False)
class World:
    config: WorldConfig
    sample_ids: list
    audio: np.ndarray            # (N, obs_dim_audio) utterance bases
    visual: np.ndarray           # (N, obs_dim_visual)
    test_audio: np.ndarray       # (N, obs_dim_audio) held-out noisy segments
    trials: list
    identities: np.ndarray | None = None     # (N,) int labels; None without sidecar
    audio_centroids: np.ndarray | None = None
    visual_centroids: np.ndarray | None = None
    mixing: np.ndarray | None = None
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {sid: i for i, sid in enumerate(self.sample_ids)}

    @property
    def num_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def truth_available(self) -> bool:
        return self.identities is not None

    def row(self, sample_id: str) -> int:
        try:
            return self._index[sample_id]
        except KeyError:
            raise UnknownUtterance(f"no such sample: {sample_id}") from None

    def identity_of(self, sample_id: str) -> int:
        if self.identities is None:
            raise TruthUnavailable("world was loaded without its truth sidecar")
        return int(self.identities[self.row(sample_id)])

    def truth_labels(self) -> np.ndarray:
        if self.identities is None:
            raise TruthUnavailable("world was loaded without its truth sidecar")
        return self.identities.copy()

    def train_views(self) -> list:
        """Truth-free handles for the training loop.  No identity field exists."""
        return [
            TrainView(sid, self.audio[i], self.visual[i])
            for i, sid in enumerate(self.sample_ids)
        ]


def _centroid_scale(config: WorldConfig) -> float:
    """Keep identities separable against the worst-case accumulated noise."""
    sigma = np.sqrt(
        config.channel_noise_std ** 2
        + config.content_noise_std_short ** 2
        + config.augment_noise_std ** 2
    )
    return max(1.0, 1.25 * sigma)


def _mixing_matrix(rng: Rng, dim_visual: int, dim_audio: int) -> np.ndarray:
    """Orthonormal rows, so it maps iid standard normals to iid standard normals."""
    g = rng.normal((dim_audio, dim_visual))
    q, r = np.linalg.qr(g)
    # fix the sign convention so the factorization is unique
    q = q * np.sign(np.diag(r))
    return q.T


def gen_world(config: WorldConfig, num_target_trials: int = 200,
              num_nontarget_trials: int = 200) -> World:
    root = Rng(config.seed).child("world")
    j, upi = config.num_identities, config.utterances_per_identity
    da, dv = config.obs_dim_audio, config.obs_dim_visual

    a_raw = root.child("audio-centroids").normal((j, da))
    mixing = _mixing_matrix(root.child("mixing"), dv, da)
    rho = config.modality_correlation
    g = root.child("visual-centroids").normal((j, dv))
    v_raw = rho * (a_raw @ mixing.T) + np.sqrt(1.0 - rho * rho) * g

    scale = _centroid_scale(config)
    audio_centroids = scale * a_raw
    visual_centroids = scale * v_raw

    n = j * upi
    audio = np.empty((n, da))
    visual = np.empty((n, dv))
    test_audio = np.empty((n, da))
    identities = np.empty(n, dtype=np.int64)
    k = 0
    for ident in range(j):
        for u in range(upi):
            ch = root.child("utt", ident, u)
            audio[k] = audio_centroids[ident] + ch.normal((da,), config.channel_noise_std)
            visual[k] = visual_centroids[ident] + ch.normal((dv,), config.channel_noise_std)
            # held-out evaluation segment: a noisy recording of the same
            # utterance, never shown to training
            test_audio[k] = audio[k] + ch.normal((da,), config.test_noise_std)
            identities[k] = ident
            k += 1

    # shuffle so sample order carries no identity information
    perm = root.child("shuffle").permutation(n)
    audio, visual = audio[perm], visual[perm]
    test_audio, identities = test_audio[perm], identities[perm]
    sample_ids = [f"u{i:05d}" for i in range(n)]

    trials = _make_trials(
        sample_ids, identities, num_target_trials, num_nontarget_trials,
        root.child("trials"),
    )
    return World(
        config=config, sample_ids=sample_ids, audio=audio, visual=visual,
        test_audio=test_audio, trials=trials, identities=identities,
        audio_centroids=audio_centroids, visual_centroids=visual_centroids,
        mixing=mixing,
    )


def _make_trials(sample_ids, identities, num_target, num_nontarget, rng: Rng):
    by_identity = {}
    for i, ident in enumerate(identities):
        by_identity.setdefault(int(ident), []).append(i)
    multi = [ids for ids in by_identity.values() if len(ids) >= 2]
    if num_target > 0 and not multi:
        raise DegenerateTrials("no identity has two utterances; cannot form targets")
    if num_nontarget > 0 and len(by_identity) < 2:
        raise DegenerateTrials("need two identities to form non-target trials")

    trials = []
    for _ in range(num_target):
        group = multi[int(rng.integers(0, len(multi)))]
        pick = rng.choice(len(group), size=2, replace=False)
        trials.append(Trial(sample_ids[group[pick[0]]], sample_ids[group[pick[1]]], True))
    idents = sorted(by_identity)
    for _ in range(num_nontarget):
        pair = rng.choice(len(idents), size=2, replace=False)
        ga, gb = by_identity[idents[pair[0]]], by_identity[idents[pair[1]]]
        ia = ga[int(rng.integers(0, len(ga)))]
        ib = gb[int(rng.integers(0, len(gb)))]
        trials.append(Trial(sample_ids[ia], sample_ids[ib], False))
    return trials


# -- observation noise (crops and augmentation) ----------------------------

def crop_views(base: np.ndarray, config: WorldConfig, rng: Rng) -> CropSet:
    """Standard multi-view sampling from one utterance's base observation."""
    long_views = [
        base + rng.normal(base.shape, config.content_noise_std_long)
        for _ in range(NUM_LONG_VIEWS)
    ]
    short_views = [
        base + rng.normal(base.shape, config.content_noise_std_short)
        for _ in range(NUM_SHORT_VIEWS)
    ]
    return CropSet(long_views, short_views)


def cluster_crop_views(anchor: np.ndarray, partners: list, config: WorldConfig,
                       rng: Rng) -> CropSet:
    """Cluster-aware multi-view sampling.

    Long views come from utterances of the anchor's cluster (sampled with
    replacement from partners, which should include the anchor itself), so
    positives span the cluster instead of a single utterance.  Short views
    stay on the anchor.
    """
    if not partners:
        partners = [anchor]
    long_views = []
    for _ in range(NUM_LONG_VIEWS):
        pick = partners[int(rng.integers(0, len(partners)))]
        long_views.append(pick + rng.normal(pick.shape, config.content_noise_std_long))
    short_views = [
        anchor + rng.normal(anchor.shape, config.content_noise_std_short)
        for _ in range(NUM_SHORT_VIEWS)
    ]
    return CropSet(long_views, short_views)


def augment(x: np.ndarray, config: WorldConfig, rng: Rng) -> np.ndarray:
    return x + rng.normal(x.shape, config.augment_noise_std)


def clean_aug_pair(base: np.ndarray, config: WorldConfig, rng: Rng):
    """Two independent low-noise crops; the second additionally augmented."""
    clean = base + rng.normal(base.shape, config.content_noise_std_long)
    other = base + rng.normal(base.shape, config.content_noise_std_long)
    return clean, augment(other, config, rng)


# -- label corruption (noise harness for gate tests) -----------------------

def corrupt_labels(labels: np.ndarray, rate: float, num_classes: int, rng: Rng):
    """Flip exactly round(rate * N) labels to a different class.

    Returns (corrupted, flipped_mask).
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidRate(f"rate must be in [0, 1], got {rate}")
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    n_flip = int(round(rate * n))
    if n_flip > 0 and num_classes < 2:
        raise InsufficientIdentities("cannot flip labels with fewer than 2 classes")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise InvalidRate(f"labels must lie in [0, {num_classes})")
    corrupted = labels.copy()
    mask = np.zeros(n, dtype=bool)
    if n_flip == 0:
        return corrupted, mask
    picks = rng.choice(n, size=n_flip, replace=False)
    for i in picks:
        offset = int(rng.integers(1, num_classes))
        corrupted[i] = (labels[i] + offset) % num_classes
        mask[i] = True
    return corrupted, mask


# -- serialization ---------------------------------------------------------

def save_world(world: World, path: str) -> None:
    """Write the observable world: config, bases, trials.  No identities."""
    doc = {
        "version": SCHEMA_VERSION,
        "config": world.config.to_dict(),
        "sample_ids": world.sample_ids,
        "audio": world.audio.tolist(),
        "visual": world.visual.tolist(),
        "test_audio": world.test_audio.tolist(),
        "trials": [{"a": t.a, "b": t.b, "target": t.target} for t in world.trials],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def save_truth(world: World, path: str) -> None:
    if not world.truth_available:
        raise TruthUnavailable("this world has no truth to save")
    doc = {
        "version": SCHEMA_VERSION,
        "identities": world.identities.tolist(),
        "audio_centroids": world.audio_centroids.tolist(),
        "visual_centroids": world.visual_centroids.tolist(),
        "mixing": world.mixing.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_world(path: str, truth_path: str | None = None) -> World:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("version") != SCHEMA_VERSION:
        raise InvalidConfig(f"unsupported world format: {doc.get('version')}")
    config = WorldConfig(**doc["config"])
    world = World(
        config=config,
        sample_ids=list(doc["sample_ids"]),
        audio=np.asarray(doc["audio"], dtype=np.float64),
        visual=np.asarray(doc["visual"], dtype=np.float64),
        test_audio=np.asarray(doc["test_audio"], dtype=np.float64),
        trials=[Trial(t["a"], t["b"], bool(t["target"])) for t in doc["trials"]],
    )
    if truth_path is not None:
        with open(truth_path, encoding="utf-8") as f:
            tdoc = json.load(f)
        if tdoc.get("version") != SCHEMA_VERSION:
            raise InvalidConfig("unsupported truth format")
        ids = np.asarray(tdoc["identities"], dtype=np.int64)
        if ids.size != world.num_samples:
            raise InvalidConfig("truth sidecar does not match world size")
        world.identities = ids
        world.audio_centroids = np.asarray(tdoc["audio_centroids"], dtype=np.float64)
        world.visual_centroids = np.asarray(tdoc["visual_centroids"], dtype=np.float64)
        world.mixing = np.asarray(tdoc["mixing"], dtype=np.float64)
    return world
