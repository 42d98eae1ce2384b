"""Dataset split construction and minibatch planning.

Covers random in-distribution splits (per-domain proportional), the
built-in three-fold leave-group-out tables over the 19 canonical xBD
disaster names, the tier-3 holdout split, a force-balanced fold
heuristic for arbitrary domain sets, and the two batch samplers: plain
mixed shuffling and single-domain (stratified) batches.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

# the eight tier-3 disasters, grouped into the three standard OOD folds
XBD_FOLD_TESTS = (
    ("joplin-tornado", "pinery-bushfire", "sunda-tsunami"),
    ("moore-tornado", "portugal-wildfire"),
    ("tuscaloosa-tornado", "lower-puna-volcano", "woolsey-fire"),
)
XBD_TIER3 = tuple(sorted(n for fold in XBD_FOLD_TESTS for n in fold))
XBD_TIER1 = (
    "guatemala-volcano", "hurricane-florence", "hurricane-harvey",
    "hurricane-matthew", "hurricane-michael", "mexico-earthquake",
    "midwest-flooding", "nepal-flooding", "palu-tsunami",
    "santa-rosa-wildfire", "socal-fire",
)
XBD_ALL = tuple(sorted(XBD_TIER1 + XBD_TIER3))


def normalize_domain(name: str) -> str:
    return name.strip().lower().replace(" ", "-").replace("_", "-")


@dataclass(frozen=True)
class SplitSpec:
    name: str
    kind: str  # "iid" | "ood"
    train_domains: tuple[str, ...]
    test_domains: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in ("iid", "ood"):
            raise ValueError(f"kind must be iid or ood, got {self.kind!r}")
        if self.kind == "ood" and set(self.train_domains) & set(self.test_domains):
            raise ValueError("ood split train and test domains must be disjoint")

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind,
                "train_domains": sorted(self.train_domains),
                "test_domains": sorted(self.test_domains)}

    @classmethod
    def from_json(cls, d: dict) -> "SplitSpec":
        return cls(name=d["name"], kind=d["kind"],
                   train_domains=tuple(sorted(d["train_domains"])),
                   test_domains=tuple(sorted(d["test_domains"])))

    def save(self, path) -> None:
        from pathlib import Path
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SplitSpec":
        from pathlib import Path
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Batch:
    domain_id: str  # "mixed" for non-stratified plans
    sample_ids: tuple[str, ...]


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[Batch, ...]

    def __len__(self):
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    def sample_ids(self) -> list[str]:
        return [sid for b in self.batches for sid in b.sample_ids]


@dataclass(frozen=True)
class DomainInfo:
    """Domain metadata the fold heuristic balances on."""
    name: str
    force: str = "unknown"
    n_samples: int = 0


def _group_by_domain(samples) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for s in samples:
        groups.setdefault(s.domain_id, []).append(s.sample_id)
    return {d: sorted(ids) for d, ids in sorted(groups.items())}


def iid_split(samples, test_fraction: float, seed: int) -> tuple[SplitSpec, list[str], list[str]]:
    """Random per-domain proportional partition into train and test ids."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to split")
    groups = _group_by_domain(samples)
    train_ids: list[str] = []
    test_ids: list[str] = []
    for di, (domain, ids) in enumerate(groups.items()):
        rng = np.random.default_rng(np.random.SeedSequence((seed, di)))
        ids = list(ids)
        rng.shuffle(ids)
        if len(ids) < 2:
            warnings.warn(f"domain {domain!r} has a single sample; kept in train only")
            train_ids += ids
            continue
        n_test = int(round(test_fraction * len(ids)))
        n_test = min(max(n_test, 1), len(ids) - 1)
        test_ids += ids[:n_test]
        train_ids += ids[n_test:]
    spec = SplitSpec(name=f"iid_{test_fraction:g}_s{seed}", kind="iid",
                     train_domains=tuple(sorted(groups)), test_domains=tuple(sorted(groups)))
    return spec, sorted(train_ids), sorted(test_ids)


def _as_domain_infos(domains) -> list[DomainInfo]:
    out = []
    for d in domains:
        if isinstance(d, DomainInfo):
            out.append(d)
        elif isinstance(d, str):
            out.append(DomainInfo(name=d))
        elif isinstance(d, dict):
            out.append(DomainInfo(name=d["name"], force=d.get("force", "unknown"),
                                  n_samples=d.get("n", d.get("n_samples", 0))))
        else:
            out.append(DomainInfo(name=d.name, force=getattr(d, "force", "unknown"),
                                  n_samples=getattr(d, "n_samples", 0)))
    return out


def ood_folds(domains) -> list[SplitSpec]:
    """Three leave-group-out folds.

    When the supplied domains contain the eight designated xBD test
    disasters, the built-in fold tables apply verbatim. Otherwise a
    heuristic assigns one test domain per damage force to each fold,
    rotating through the per-force domain lists (largest first) so test
    sizes stay roughly balanced.
    """
    infos = _as_domain_infos(domains)
    if len(infos) < 2:
        raise ValueError("need at least 2 domains for leave-group-out folds")
    names = [i.name for i in infos]
    norm = {normalize_domain(n): n for n in names}
    if all(t in norm for t in XBD_TIER3):
        folds = []
        for fi, tests in enumerate(XBD_FOLD_TESTS, start=1):
            test = tuple(sorted(norm[t] for t in tests))
            train = tuple(sorted(n for n in names if n not in test))
            folds.append(SplitSpec(name=f"fold{fi}", kind="ood",
                                   train_domains=train, test_domains=test))
        return folds

    by_force: dict[str, list[DomainInfo]] = {}
    for info in infos:
        by_force.setdefault(info.force, []).append(info)
    forces = sorted(by_force)
    if len(forces) < 2 or "unknown" in by_force:
        warnings.warn("incomplete force coverage; folds are a best-effort balance")
    for f in forces:
        by_force[f].sort(key=lambda i: (-i.n_samples, i.name))
    folds = []
    for fi in range(3):
        test = []
        for ci, f in enumerate(forces):
            pool = by_force[f]
            test.append(pool[(fi + ci) % len(pool)].name)
        test = tuple(sorted(set(test)))
        train = tuple(sorted(n for n in names if n not in test))
        if not train:
            raise ValueError("fold heuristic left an empty training side")
        folds.append(SplitSpec(name=f"fold{fi + 1}", kind="ood",
                               train_domains=train, test_domains=test))
    return folds


def gupta_split(domains, explicit_test=None) -> SplitSpec:
    """Hold out the eight tier-3 disasters (or an explicit test list)."""
    infos = _as_domain_infos(domains)
    names = [i.name for i in infos]
    if explicit_test is not None:
        test = tuple(sorted(explicit_test))
        missing = set(test) - set(names)
        if missing:
            raise ValueError(f"explicit test domains not in dataset: {sorted(missing)}")
    else:
        norm = {normalize_domain(n): n for n in names}
        if not all(t in norm for t in XBD_TIER3):
            raise ValueError("domain names do not match the canonical disaster list; "
                             "pass explicit_test")
        test = tuple(sorted(norm[t] for t in XBD_TIER3))
    train = tuple(sorted(n for n in names if n not in test))
    return SplitSpec(name="gupta", kind="ood", train_domains=train, test_domains=test)


def stratified_batches(samples, batch_size: int, seed: int) -> BatchPlan:
    """Every batch drawn from a single domain; drop-last within each domain."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    groups = _group_by_domain(samples)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5712)))
    batches: list[Batch] = []
    for domain, ids in groups.items():
        ids = list(ids)
        rng.shuffle(ids)
        n_full = len(ids) // batch_size
        if n_full == 0:
            warnings.warn(f"domain {domain!r} smaller than batch_size; contributes no batches")
        for bi in range(n_full):
            chunk = ids[bi * batch_size:(bi + 1) * batch_size]
            batches.append(Batch(domain_id=domain, sample_ids=tuple(chunk)))
    order = rng.permutation(len(batches))
    return BatchPlan(batches=tuple(batches[i] for i in order))


def mixed_batches(samples, batch_size: int, seed: int) -> BatchPlan:
    """Global shuffle then cut; drop-last."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ids = sorted(s.sample_id for s in samples)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x313d)))
    rng.shuffle(ids)
    n_full = len(ids) // batch_size
    batches = [Batch(domain_id="mixed",
                     sample_ids=tuple(ids[bi * batch_size:(bi + 1) * batch_size]))
               for bi in range(n_full)]
    return BatchPlan(batches=tuple(batches))
