"""Synthetic gold-reward world and Bradley-Terry preference generation.

The gold reward is exactly linear, ``r*(e) = phi_star @ e``, over unit-norm
embeddings. In-distribution embeddings have little variance inside a
"held-out" subspace orthogonal to ``phi_star``; out-of-distribution (OOD)
candidates are pushed into that subspace, so the proxy head is poorly
determined there while the gold reward is not affected by the shift.
OOD candidates never appear in reward-training pools.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .exceptions import EmptySplit, IndexOutOfRange, InvalidConfig

SCHEMA_VERSION = 1
SPLIT_NAMES = ("reward_train", "policy", "validation")


@dataclass(frozen=True)
class WorldConfig:
    dim: int = 16
    n_prompts: int = 200
    candidates_per_prompt: int = 16
    ood_fraction: float = 0.25
    ood_shift: float = 3.0
    noise_rate: float = 0.30
    seed: int = 0
    split_fractions: tuple = (0.5, 0.45, 0.05)
    bt_temperature: float = 0.75
    heldout_dim: int = 9
    heldout_scale: float = 0.13
    ood_jitter: float = 0.3
    # log-prior of OOD candidates under the SFT stand-in policy
    sft_ood_logit: float = -1.0

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        self.validate()

    def validate(self):
        if self.dim < 2:
            raise InvalidConfig("dim must be >= 2")
        if self.n_prompts < 1 or self.candidates_per_prompt < 2:
            raise InvalidConfig("need n_prompts >= 1 and candidates_per_prompt >= 2")
        if not 0.0 <= self.ood_fraction < 1.0:
            raise InvalidConfig("ood_fraction must lie in [0, 1)")
        if self.n_ood_per_pool > self.candidates_per_prompt - 2:
            raise InvalidConfig("each pool needs at least two in-distribution candidates")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise InvalidConfig("noise_rate must lie in [0, 1]")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-12:
            raise InvalidConfig("split_fractions must be three nonnegative numbers summing to 1")
        if not 1 <= self.heldout_dim <= self.dim - 1:
            raise InvalidConfig("heldout_dim must lie in [1, dim - 1]")
        if self.heldout_scale < 0 or self.ood_shift < 0 or self.ood_jitter < 0:
            raise InvalidConfig("heldout_scale, ood_shift and ood_jitter must be nonnegative")
        if self.bt_temperature < 0:
            raise InvalidConfig("bt_temperature must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")

    @property
    def n_ood_per_pool(self) -> int:
        return int(round(self.ood_fraction * self.candidates_per_prompt))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)

    def content_hash(self) -> str:
        return _hash_obj(self.to_dict())


@dataclass(frozen=True)
class CandidatePool:
    prompt_id: int
    embeddings: np.ndarray
    is_ood: np.ndarray


@dataclass
class SyntheticWorld:
    config: WorldConfig
    phi_star: np.ndarray
    heldout_basis: np.ndarray  # (dim, heldout_dim), orthonormal, orthogonal to phi_star
    embeddings: np.ndarray  # (n_prompts, candidates, dim)
    is_ood: np.ndarray  # (n_prompts, candidates) bool
    splits: dict  # split name -> sorted int array of prompt ids

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]

    @property
    def n_prompts(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_candidates(self) -> int:
        return self.embeddings.shape[1]

    @property
    def pools(self) -> list:
        return [self.pool(p) for p in range(self.n_prompts)]

    def pool(self, prompt_id: int) -> CandidatePool:
        self._check_prompt(prompt_id)
        return CandidatePool(int(prompt_id), self.embeddings[prompt_id], self.is_ood[prompt_id])

    def gold_table(self) -> np.ndarray:
        """Gold reward of every candidate, shape (n_prompts, candidates)."""
        return self.embeddings @ self.phi_star

    def sft_logits(self) -> np.ndarray:
        """Log-prior of the SFT stand-in policy per candidate (unnormalized)."""
        return np.where(self.is_ood, self.config.sft_ood_logit, 0.0)

    def _check_prompt(self, prompt_id):
        if not 0 <= int(prompt_id) < self.n_prompts:
            raise IndexOutOfRange(f"prompt {prompt_id} outside [0, {self.n_prompts})")

    def content_hash(self) -> str:
        return _hash_obj(world_to_dict(self))


@dataclass
class PreferenceDataset:
    prompt_ids: np.ndarray
    chosen: np.ndarray
    rejected: np.ndarray
    flipped: np.ndarray
    provenance: dict = field(default_factory=dict)
    # chosen side of one fresh pair per policy/validation prompt; -1 elsewhere
    references: np.ndarray | None = None

    def __post_init__(self):
        self.prompt_ids = np.asarray(self.prompt_ids, dtype=np.int64)
        self.chosen = np.asarray(self.chosen, dtype=np.int64)
        self.rejected = np.asarray(self.rejected, dtype=np.int64)
        self.flipped = np.asarray(self.flipped, dtype=bool)
        n = len(self.prompt_ids)
        if not (len(self.chosen) == len(self.rejected) == len(self.flipped) == n):
            raise InvalidConfig("preference arrays must have equal length")
        if np.any(self.chosen == self.rejected):
            raise InvalidConfig("chosen and rejected must differ")
        if self.references is not None:
            self.references = np.asarray(self.references, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.prompt_ids)

    @property
    def triples(self) -> list:
        return list(zip(self.prompt_ids.tolist(), self.chosen.tolist(), self.rejected.tolist()))

    def swapped(self) -> "PreferenceDataset":
        """Same pairs with chosen and rejected exchanged."""
        return dataclasses.replace(self, chosen=self.rejected.copy(), rejected=self.chosen.copy(),
                                   flipped=~self.flipped)

    def subset(self, index) -> "PreferenceDataset":
        index = np.asarray(index)
        return dataclasses.replace(self, prompt_ids=self.prompt_ids[index], chosen=self.chosen[index],
                                   rejected=self.rejected[index], flipped=self.flipped[index])

    def chosen_embeddings(self, world: SyntheticWorld) -> np.ndarray:
        return world.embeddings[self.prompt_ids, self.chosen]

    def rejected_embeddings(self, world: SyntheticWorld) -> np.ndarray:
        return world.embeddings[self.prompt_ids, self.rejected]

    def validate_against(self, world: SyntheticWorld):
        c = world.n_candidates
        if len(self) and (self.prompt_ids.min() < 0 or self.prompt_ids.max() >= world.n_prompts):
            raise IndexOutOfRange("preference prompt id outside the world")
        for arr in (self.chosen, self.rejected):
            if len(arr) and (arr.min() < 0 or arr.max() >= c):
                raise IndexOutOfRange("preference candidate index outside the pool")


def _normalize_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def gen_world(config: WorldConfig) -> SyntheticWorld:
    """Draw a world; bit-identical for identical configs."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, P, C, h = config.dim, config.n_prompts, config.candidates_per_prompt, config.heldout_dim

    phi_star = rng.standard_normal(d)
    phi_star /= np.linalg.norm(phi_star)
    q, _ = np.linalg.qr(np.column_stack([phi_star, rng.standard_normal((d, d - 1))]))
    basis = q[:, 1:h + 1].copy()
    # re-orthogonalize against phi_star to machine precision
    basis -= np.outer(phi_star, phi_star @ basis)
    basis, _ = np.linalg.qr(basis)

    order = rng.permutation(P)
    n_train = int(round(config.split_fractions[0] * P))
    n_policy = int(round(config.split_fractions[1] * P))
    n_policy = min(n_policy, P - n_train)
    splits = {
        "reward_train": np.sort(order[:n_train]),
        "policy": np.sort(order[n_train:n_train + n_policy]),
        "validation": np.sort(order[n_train + n_policy:]),
    }

    z = rng.standard_normal((P, C, d))
    z -= (1.0 - config.heldout_scale) * (z @ basis) @ basis.T
    emb = _normalize_rows(z)
    is_ood = np.zeros((P, C), dtype=bool)

    n_ood = config.n_ood_per_pool
    if n_ood:
        for p in np.concatenate([splits["policy"], splits["validation"]]):
            slots = np.sort(rng.choice(C, size=n_ood, replace=False))
            direction = _normalize_rows(rng.standard_normal((n_ood, h))) @ basis.T
            jitter = config.ood_jitter * rng.standard_normal((n_ood, d)) / np.sqrt(d)
            emb[p, slots] = _normalize_rows(emb[p, slots] + config.ood_shift * direction + jitter)
            is_ood[p, slots] = True

    return SyntheticWorld(config=config, phi_star=phi_star, heldout_basis=basis,
                          embeddings=emb, is_ood=is_ood, splits=splits)


def gold_reward(world: SyntheticWorld, prompt_id: int, cand_idx: int) -> float:
    world._check_prompt(prompt_id)
    if not 0 <= int(cand_idx) < world.n_candidates:
        raise IndexOutOfRange(f"candidate {cand_idx} outside [0, {world.n_candidates})")
    return float(world.phi_star @ world.embeddings[prompt_id, cand_idx])


def _label_pairs(rng, gold_a, gold_b, temperature, noise_rate):
    """Return (a_chosen, flipped) boolean arrays for pairs (a, b)."""
    if temperature == 0:
        a_chosen = gold_a >= gold_b
    else:
        a_chosen = rng.random(len(gold_a)) < expit((gold_a - gold_b) / temperature)
    flipped = rng.random(len(gold_a)) < noise_rate
    return a_chosen ^ flipped, flipped


def _draw_in_distribution_pairs(rng, world, prompts):
    """Two distinct in-distribution candidates per prompt in ``prompts``."""
    a = np.empty(len(prompts), dtype=np.int64)
    b = np.empty(len(prompts), dtype=np.int64)
    for i, p in enumerate(prompts):
        ind = np.flatnonzero(~world.is_ood[p])
        a[i], b[i] = rng.choice(ind, size=2, replace=False)
    return a, b


def gen_preferences(world: SyntheticWorld, n_pairs: int, noise_rate: float | None = None,
                    seed: int = 0, temperature: float | None = None,
                    with_references: bool = True) -> PreferenceDataset:
    """Bradley-Terry labelled pairs from reward-train prompts, with label flips.

    Candidate ``a`` is preferred with probability ``sigmoid((r*(a) - r*(b)) / temperature)``
    (``temperature=0`` labels by the gold ordering); each label is then flipped
    with probability ``noise_rate``. When ``with_references`` is set, one more
    pair is labelled the same way for every policy/validation prompt and its
    chosen side is stored as that prompt's reference response.
    """
    noise_rate = world.config.noise_rate if noise_rate is None else float(noise_rate)
    temperature = world.config.bt_temperature if temperature is None else float(temperature)
    if not 0.0 <= noise_rate <= 1.0:
        raise InvalidConfig("noise_rate must lie in [0, 1]")
    if temperature < 0:
        raise InvalidConfig("temperature must be nonnegative")
    train = world.splits["reward_train"]
    if len(train) == 0:
        raise EmptySplit("reward_train split has no prompts")
    rng = np.random.default_rng(seed)
    gold = world.gold_table()

    prompts = rng.choice(train, size=n_pairs)
    a, b = _draw_in_distribution_pairs(rng, world, prompts)
    a_chosen, flipped = _label_pairs(rng, gold[prompts, a], gold[prompts, b], temperature, noise_rate)
    chosen = np.where(a_chosen, a, b)
    rejected = np.where(a_chosen, b, a)

    references = None
    if with_references:
        references = np.full(world.n_prompts, -1, dtype=np.int64)
        rp = np.concatenate([world.splits["policy"], world.splits["validation"]])
        if len(rp):
            ra, rb = _draw_in_distribution_pairs(rng, world, rp)
            ra_chosen, _ = _label_pairs(rng, gold[rp, ra], gold[rp, rb], temperature, noise_rate)
            references[rp] = np.where(ra_chosen, ra, rb)

    provenance = {
        "seed": int(seed),
        "n_pairs": int(n_pairs),
        "noise_rate": noise_rate,
        "temperature": temperature,
        "world_config_hash": world.config.content_hash(),
    }
    return PreferenceDataset(prompts, chosen, rejected, flipped, provenance, references)


def reference_embedding(world: SyntheticWorld, references, prompts) -> np.ndarray:
    """Mean embedding of the reference responses over ``prompts``."""
    references = np.asarray(references)
    prompts = np.asarray(prompts)
    if np.any(references[prompts] < 0):
        raise IndexOutOfRange("some prompts have no reference response")
    return world.embeddings[prompts, references[prompts]].mean(axis=0)


# --- serialization -------------------------------------------------------

def _hash_obj(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def world_to_dict(world: SyntheticWorld) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "kind": "world",
        "config": world.config.to_dict(),
        "phi_star": world.phi_star.tolist(),
        "heldout_basis": world.heldout_basis.tolist(),
        "splits": {k: v.tolist() for k, v in world.splits.items()},
        "pools": [
            {"prompt_id": p, "embeddings": world.embeddings[p].tolist(),
             "is_ood": world.is_ood[p].tolist()}
            for p in range(world.n_prompts)
        ],
    }


def world_from_dict(d: dict) -> SyntheticWorld:
    _check_version(d, "world")
    pools = sorted(d["pools"], key=lambda x: x["prompt_id"])
    return SyntheticWorld(
        config=WorldConfig.from_dict(d["config"]),
        phi_star=np.array(d["phi_star"], dtype=float),
        heldout_basis=np.array(d["heldout_basis"], dtype=float),
        embeddings=np.array([p["embeddings"] for p in pools], dtype=float),
        is_ood=np.array([p["is_ood"] for p in pools], dtype=bool),
        splits={k: np.array(d["splits"][k], dtype=np.int64) for k in SPLIT_NAMES},
    )


def prefs_to_dict(data: PreferenceDataset) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "kind": "preferences",
        "provenance": data.provenance,
        "triples": [list(t) for t in data.triples],
        "flipped": data.flipped.tolist(),
        "references": None if data.references is None else data.references.tolist(),
    }


def prefs_from_dict(d: dict) -> PreferenceDataset:
    _check_version(d, "preferences")
    triples = np.array(d["triples"], dtype=np.int64).reshape(-1, 3)
    return PreferenceDataset(triples[:, 0], triples[:, 1], triples[:, 2], d["flipped"],
                             dict(d.get("provenance", {})), d.get("references"))


def _check_version(d, kind):
    if d.get("version") != SCHEMA_VERSION or d.get("kind") != kind:
        raise InvalidConfig(f"not a version-{SCHEMA_VERSION} {kind} file")


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def save_world(world: SyntheticWorld, path):
    dump_json(world_to_dict(world), path)


def load_world(path) -> SyntheticWorld:
    with open(path) as fh:
        return world_from_dict(json.load(fh))


def save_prefs(data: PreferenceDataset, path):
    dump_json(prefs_to_dict(data), path)


def load_prefs(path) -> PreferenceDataset:
    with open(path) as fh:
        return prefs_from_dict(json.load(fh))
