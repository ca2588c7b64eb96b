"""A small structure-conditioned base predictor and a synthetic protein-family generator.

The base model sees only local geometry (nearest-CA distances plus the virtual angle
and dihedral), so it is confident where geometry pins the residue and diffuse where
it does not. Synthetic families hide a per-position latent that only the family's
sequences reveal, which is exactly the information structural neighbors carry.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import AMINO_ACIDS, NUM_AA, Backbone, Sequence
from .matcher import discretize, virtual_angles, virtual_dihedrals

NUM_NEIGHBORS = 8
FEATURE_WIDTH = 2 * NUM_NEIGHBORS + 2  # distances, presence flags, angle, dihedral


def featurize_backbone(b: Backbone) -> np.ndarray:
    """Raw (unstandardised) per-residue features, shape (L, 18).

    Columns 0-7 hold the distances to the 8 nearest other CA atoms (ascending,
    0 when the chain has fewer residues), 8-15 the matching presence flags, 16 the
    virtual bond angle and 17 the virtual dihedral (0 where undefined).
    """
    ca = b.ca
    n = len(ca)
    out = np.zeros((n, FEATURE_WIDTH))
    if n > 1:
        dist = np.linalg.norm(ca[:, None, :] - ca[None, :, :], axis=-1)
        np.fill_diagonal(dist, np.inf)
        k = min(NUM_NEIGHBORS, n - 1)
        nearest = np.sort(dist, axis=1)[:, :k]
        out[:, :k] = nearest
        out[:, NUM_NEIGHBORS:NUM_NEIGHBORS + k] = 1.0
    out[:, -2] = np.nan_to_num(virtual_angles(ca), nan=0.0)
    out[:, -1] = np.nan_to_num(virtual_dihedrals(ca), nan=0.0)
    return out


def featurize(b: Backbone, j: int) -> np.ndarray:
    return featurize_backbone(b)[j]


class ToyBase:
    """Two-layer perceptron: standardised geometry features -> 64 hidden -> 20 logits."""

    def __init__(self, tensors: dict, feat_mean=None, feat_std=None):
        self.tensors = tensors
        width = tensors["w1"].shape[0]
        self.feat_mean = np.zeros(width) if feat_mean is None else np.asarray(feat_mean, dtype=np.float64)
        self.feat_std = np.ones(width) if feat_std is None else np.asarray(feat_std, dtype=np.float64)

    @classmethod
    def init(cls, seed: int = 0, hidden: int = 64, width: int = FEATURE_WIDTH) -> "ToyBase":
        rng = np.random.default_rng(seed)
        s1, s2 = 1.0 / np.sqrt(width), 1.0 / np.sqrt(hidden)
        return cls({
            "w1": ad.parameter(rng.uniform(-s1, s1, (width, hidden)), "w1"),
            "b1": ad.parameter(rng.uniform(-s1, s1, hidden), "b1"),
            "w2": ad.parameter(rng.uniform(-s2, s2, (hidden, NUM_AA)), "w2"),
            "b2": ad.parameter(rng.uniform(-s2, s2, NUM_AA), "b2"),
        })

    @classmethod
    def zeros(cls, hidden: int = 64, width: int = FEATURE_WIDTH) -> "ToyBase":
        return cls({
            "w1": ad.parameter(np.zeros((width, hidden)), "w1"),
            "b1": ad.parameter(np.zeros(hidden), "b1"),
            "w2": ad.parameter(np.zeros((hidden, NUM_AA)), "w2"),
            "b2": ad.parameter(np.zeros(NUM_AA), "b2"),
        })

    def parameters(self) -> list:
        return list(self.tensors.values())

    def fit_standardization(self, feature_blocks):
        allf = np.concatenate(list(feature_blocks), axis=0)
        self.feat_mean = allf.mean(axis=0)
        std = allf.std(axis=0)
        self.feat_std = np.where(std > 1e-12, std, 1.0)

    def forward_tensor(self, features) -> ad.Tensor:
        x = (np.asarray(features, dtype=np.float64) - self.feat_mean) / self.feat_std
        t = self.tensors
        h = ad.gelu(ad.add(ad.matmul(x, t["w1"]), t["b1"]))
        return ad.add(ad.matmul(h, t["w2"]), t["b2"])

    def logits(self, b: Backbone) -> np.ndarray:
        return self.forward_tensor(featurize_backbone(b)).data

    def train(self, pairs, epochs: int = 60, lr: float = 3e-3, warmup_steps: int = 50,
              batch_size: int = 8, seed: int = 0) -> list:
        """Fit on ``(Backbone, Sequence)`` pairs by cross-entropy; returns per-epoch loss."""
        pairs = list(pairs)
        feats = [featurize_backbone(b) for b, _ in pairs]
        targets = [s.indices for _, s in pairs]
        self.fit_standardization(feats)
        opt = ad.Adam(self.parameters(), lr=lr, warmup_steps=warmup_steps)
        rng = np.random.default_rng(seed)
        trace = []
        for _ in range(epochs):
            order = rng.permutation(len(pairs))
            total = 0.0
            for start in range(0, len(order), batch_size):
                batch = order[start:start + batch_size]
                opt.zero_grad()
                for i in batch:
                    loss = ad.cross_entropy(self.forward_tensor(feats[i]), targets[i])
                    loss.backward()
                    total += loss.item()
                opt.step(scale=1.0 / len(batch))
            trace.append(total / len(pairs))
        return trace

    def to_arrays(self) -> dict:
        out = {f"base.{k}": v.data.copy() for k, v in self.tensors.items()}
        out["base.feat_mean"] = self.feat_mean.copy()
        out["base.feat_std"] = self.feat_std.copy()
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ToyBase":
        tensors = {k: ad.parameter(np.asarray(arrays[f"base.{k}"], dtype=np.float64), k)
                   for k in ("w1", "b1", "w2", "b2")}
        return cls(tensors, arrays["base.feat_mean"], arrays["base.feat_std"])


def base_forward(b: Backbone, params: ToyBase) -> np.ndarray:
    return params.logits(b)


# -- synthetic families -------------------------------------------------------------------

# Number of admissible residues per geometric state. States with one option are
# determined by geometry; the rest are disambiguated by a per-family latent.
_OPTIONS_PER_STATE = (1, 1, 3, 10, 1, 3, 10, 1, 10, 1, 3, 3, 3, 10, 1, 10)


def _residue_table() -> list[str]:
    rng = np.random.default_rng(20240601)  # fixed: the rule is part of the generator, not the seed
    table = []
    for m in _OPTIONS_PER_STATE:
        picks = rng.choice(NUM_AA, size=m, replace=False)
        table.append("".join(AMINO_ACIDS[i] for i in picks))
    return table


RESIDUE_TABLE = _residue_table()

_THETA_CENTERS = np.radians([67.5, 112.5, 150.0])  # theta bins 1..3
_TAU_CENTERS = np.radians([-135.0, -45.0, 45.0, 135.0])


def rule_residues(states: np.ndarray, latent: np.ndarray) -> str:
    """Structure-to-residue rule: state picks a residue list, the latent picks from it."""
    out = []
    for s, c in zip(states, latent):
        options = RESIDUE_TABLE[int(s)]
        out.append(options[min(int(c * len(options)), len(options) - 1)])
    return "".join(out)


def _place(a, b, c, bond, angle, torsion):
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d = np.array([-bond * np.cos(angle), bond * np.sin(angle) * np.cos(torsion),
                  bond * np.sin(angle) * np.sin(torsion)])
    return c + d[0] * bc + d[1] * m + d[2] * n


def ca_trace(theta: np.ndarray, tau: np.ndarray, bond: float = 3.8) -> np.ndarray:
    """CA coordinates with angle(i-1, i, i+1) = theta[i] and dihedral(i-1..i+2) = tau[i]."""
    n = len(theta)
    ca = np.zeros((n, 3))
    if n > 1:
        ca[1] = [bond, 0.0, 0.0]
    if n > 2:
        t = theta[1]
        ca[2] = ca[1] + bond * np.array([-np.cos(t), np.sin(t), 0.0])
    for i in range(3, n):
        ca[i] = _place(ca[i - 3], ca[i - 2], ca[i - 1], bond, theta[i - 1], tau[i - 2])
    return ca


def backbone_atoms(ca: np.ndarray) -> np.ndarray:
    """Approximate N and C positions around each CA, shape (L, 3, 3)."""
    n = len(ca)
    prev = np.vstack([2 * ca[0] - ca[1], ca[:-1]]) if n > 1 else ca - [1.0, 0.0, 0.0]
    nxt = np.vstack([ca[1:], 2 * ca[-1] - ca[-2]]) if n > 1 else ca + [1.0, 0.0, 0.0]
    u = prev - ca
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = nxt - ca
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    side = np.cross(u, v)
    norms = np.linalg.norm(side, axis=1, keepdims=True)
    side = np.where(norms > 1e-8, side / np.maximum(norms, 1e-12), [0.0, 0.0, 1.0])
    nat = ca + 1.46 * (0.9 * u + 0.44 * side)
    cat = ca + 1.52 * (0.9 * v - 0.44 * side)
    return np.stack([nat, ca, cat], axis=1)


def _prototype_angles(length: int, rng) -> tuple[np.ndarray, np.ndarray]:
    theta = np.empty(length)
    tau = np.empty(length)
    i = 0
    while i < length:
        seg = int(rng.integers(3, 9))
        tb = rng.integers(0, 3)
        db = rng.integers(0, 4)
        theta[i:i + seg] = _THETA_CENTERS[tb] + rng.uniform(-0.08, 0.08, size=min(seg, length - i))
        tau[i:i + seg] = _TAU_CENTERS[db] + rng.uniform(-0.15, 0.15, size=min(seg, length - i))
        i += seg
    return theta, tau


def _mutate(residues: str, rate: float, rng) -> str:
    if rate <= 0:
        return residues
    flips = rng.random(len(residues)) < rate
    repl = rng.integers(0, NUM_AA, size=len(residues))
    return "".join(AMINO_ACIDS[r] if f else c for c, f, r in zip(residues, flips, repl))


@dataclass(eq=False)
class SynthDataset:
    backbones: list
    sequences: list
    families: np.ndarray
    pool: dict = field(default_factory=dict)  # id -> Sequence used as neighbor prior
    latents: np.ndarray | None = None  # (prototypes, L)

    def __len__(self):
        return len(self.backbones)

    @property
    def ids(self) -> list:
        return [b.id for b in self.backbones]

    def by_id(self, name: str):
        i = self.ids.index(name)
        return self.backbones[i], self.sequences[i]


def synth_family(n: int, length: int, mutation_rate: float, seed: int, prototypes: int = 4,
                 noise: float = 0.5, pool_mutation_rate: float | None = None,
                 prefix: str = "syn") -> SynthDataset:
    """``n`` backbones spread round-robin over ``prototypes`` families.

    Members are their prototype plus Gaussian coordinate noise (``noise`` Angstrom).
    A member's native sequence is the rule applied to its own geometric states and the
    family latent, followed by independent uniform mutations at ``mutation_rate``. The
    neighbor pool holds the native sequences unless ``pool_mutation_rate`` is given, in
    which case each member's pool sequence is an independent re-mutation at that rate.
    """
    if n < 2:
        raise ValueError("synth_family needs n >= 2")
    rng = np.random.default_rng(seed)
    pool_rng = np.random.default_rng([seed, 1])
    protos = []
    latents = rng.random((prototypes, length))
    for _ in range(prototypes):
        theta, tau = _prototype_angles(length, rng)
        protos.append(backbone_atoms(ca_trace(theta, tau)))
    backbones, sequences, families, pool = [], [], [], {}
    width = len(str(n - 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i in range(n):
            fam = i % prototypes
            coords = protos[fam] + rng.normal(0.0, noise, size=protos[fam].shape)
            b = Backbone(f"{prefix}{i:0{width}d}", coords)
            clean = rule_residues(discretize(b).states, latents[fam])
            native = _mutate(clean, mutation_rate, rng)
            backbones.append(b)
            sequences.append(Sequence(b.id, native))
            families.append(fam)
            if pool_mutation_rate is None:
                pool[b.id] = sequences[-1]
            else:
                pool[b.id] = Sequence(b.id, _mutate(clean, pool_mutation_rate, pool_rng))
    return SynthDataset(backbones, sequences, np.array(families), pool, latents)
