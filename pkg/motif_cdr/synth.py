"""
Planted-cluster synthetic datasets.

Every user and item belongs to one latent cluster and users mostly interact
with items of their own cluster. Overlapped users keep their cluster in both
domains of the pair, so cross-domain transfer has a known right answer.
"""
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import yaml

from .config import ConfigManager, PipelineConfig
from .errors import ConfigError
from .utils import STREAM_SYNTH, atomic_write_lines, atomic_write_text, node_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthSpec:
    clusters: int = 4
    users: int = 500
    items: int = 300
    domains: int = 2
    overlap: float = 0.2
    noise: float = 0.1
    min_interactions: int = 5
    max_interactions: int = 20
    seed: int = 7
    overlap_users: Optional[int] = None

    def __post_init__(self):
        if self.clusters < 2:
            raise ConfigError(f"need at least 2 clusters, got {self.clusters}")
        if self.domains < 1:
            raise ConfigError("need at least one domain")
        if self.users < 1 or self.items < self.clusters:
            raise ConfigError(f"need users >= 1 and items >= clusters ({self.clusters})")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap fraction must lie in [0, 1], got {self.overlap}")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError(f"noise must lie in [0, 1], got {self.noise}")
        if not 1 <= self.min_interactions <= self.max_interactions <= self.items:
            raise ConfigError("interaction counts must satisfy 1 <= min <= max <= items")
        if self.overlap_users is not None and not 0 <= self.overlap_users <= self.users:
            raise ConfigError(f"{self.overlap_users} overlapped users requested but a domain has only {self.users}")
        if self.n_overlap > 0 and self.domains < 2:
            raise ConfigError("overlapped users need at least two domains")

    @property
    def n_overlap(self) -> int:
        if self.overlap_users is not None:
            return self.overlap_users
        return int(round(self.overlap * self.users))


@dataclass
class SynthDomain:
    domain_id: int
    user_clusters: np.ndarray
    item_clusters: np.ndarray
    pairs: List[Tuple[int, int]]


@dataclass
class SynthDataset:
    spec: SynthSpec
    domains: Dict[int, SynthDomain]
    overlap: List[Tuple[int, int, int]]

    def manifest(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "overlap_domains": [0, 1],
            "overlap": [list(entry) for entry in self.overlap],
            "domains": {
                d: {
                    "user_clusters": dom.user_clusters.tolist(),
                    "item_clusters": dom.item_clusters.tolist(),
                    "interactions": len(dom.pairs),
                }
                for d, dom in self.domains.items()
            },
        }


def _interactions(rng: np.random.Generator, cluster: int, item_clusters: np.ndarray,
                  spec: SynthSpec) -> List[int]:
    n = int(rng.integers(spec.min_interactions, spec.max_interactions + 1))
    inside = np.flatnonzero(item_clusters == cluster)
    outside = np.flatnonzero(item_clusters != cluster)
    n_noise = min(int(rng.binomial(n, spec.noise)), len(outside))
    n_inside = min(n - n_noise, len(inside))
    chosen = list(rng.choice(inside, size=n_inside, replace=False))
    if n_noise:
        chosen += list(rng.choice(outside, size=n_noise, replace=False))
    return sorted(int(i) for i in chosen)


def generate(spec: SynthSpec) -> SynthDataset:
    """Generate every domain; overlapped users are the pair (0, 1)."""
    rng = node_rng(spec.seed, STREAM_SYNTH, 0)
    n_overlap = spec.n_overlap
    shared_clusters = rng.integers(spec.clusters, size=n_overlap)

    domains: Dict[int, SynthDomain] = {}
    overlap: List[Tuple[int, int, int]] = []
    # overlapped user k is local id k in domain 0 and local id perm[k] in domain 1
    perm = rng.permutation(spec.users)
    for d in range(spec.domains):
        domain_rng = node_rng(spec.seed, STREAM_SYNTH, 1, d)
        item_clusters = np.arange(spec.items) % spec.clusters
        domain_rng.shuffle(item_clusters)
        user_clusters = domain_rng.integers(spec.clusters, size=spec.users)
        if d == 0:
            user_clusters[:n_overlap] = shared_clusters
        elif d == 1:
            user_clusters[perm[:n_overlap]] = shared_clusters

        pairs = []
        for u in range(spec.users):
            user_rng = node_rng(spec.seed, STREAM_SYNTH, 2, d, u)
            pairs.extend((u, i) for i in _interactions(user_rng, int(user_clusters[u]), item_clusters, spec))
        domains[d] = SynthDomain(d, user_clusters, item_clusters, pairs)

    if spec.domains >= 2:
        overlap = [(k, int(perm[k]), k) for k in range(n_overlap)]
    logger.info(f"Generated {spec.domains} domain(s) with {spec.users} users, {spec.items} items "
                f"and {n_overlap} overlapped user(s)")
    return SynthDataset(spec, domains, overlap)


def write_dataset(data: SynthDataset, out_dir: Union[str, Path],
                  eval_negatives: int = 99) -> Dict[str, Path]:
    """Write interaction files, the overlap map, the manifest and a ready-to-run config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: Dict[str, Path] = {}
    for d, dom in data.domains.items():
        paths[f"domain{d}"] = atomic_write_lines(out_dir / f"domain{d}.tsv", (f"{u}\t{i}" for u, i in dom.pairs))
    paths["overlap"] = atomic_write_lines(
        out_dir / "overlap.tsv", (f"user\t{a}\t{b}\t{gid}" for a, b, gid in data.overlap)
    )
    paths["manifest"] = atomic_write_text(
        out_dir / "manifest.yaml", yaml.safe_dump(data.manifest(), sort_keys=False, default_flow_style=None)
    )

    raw = PipelineConfig(seed=data.spec.seed).to_dict()
    raw["data"].update({
        "interactions": {d: f"domain{d}.tsv" for d in data.domains},
        "overlap": "overlap.tsv" if data.overlap else None,
        "output_dir": "runs",
    })
    raw["eval"]["negatives"] = eval_negatives
    config = ConfigManager.parse(raw)
    paths["config"] = ConfigManager(out_dir / "config.yaml").save(config)
    logger.info(f"Wrote synthetic dataset to {out_dir}")
    return paths
