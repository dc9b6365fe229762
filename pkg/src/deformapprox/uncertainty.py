"""Epistemic uncertainty from deep ensembles.

Train the same deformer K times with different seeds; where the members
disagree, the data did not pin the function down.  The per-vertex scalar is
the root-mean over axes of the across-member variance, in scene units, and
feeds the same heat-map exporter as the error field.  High values flag
poses (or mesh regions) that need more, or more diverse, training frames.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .deformer import DeformerConfig, infer, load_bundle, save_bundle, train_deformer

logger = logging.getLogger(__name__)

MANIFEST_NAME = "ensemble.json"


class EnsembleError(ValueError):
    pass


@dataclass
class EnsembleBundle:
    members: list
    seeds: list

    def __post_init__(self):
        if len(self.members) < 2:
            raise EnsembleError("an ensemble needs at least 2 members")
        if len(set(self.seeds)) != len(self.seeds):
            raise EnsembleError("member seeds must all differ")
        first = self.members[0]
        for m in self.members[1:]:
            if m.input_width != first.input_width or m.vertex_count != first.vertex_count:
                raise EnsembleError("ensemble members must share architecture and mesh")

    def __len__(self) -> int:
        return len(self.members)


def train_ensemble(config: DeformerConfig, dataset, split=None, k: int = 5,
                   base_seed: int = 0, checkpoint_dir=None,
                   resume: bool = False) -> EnsembleBundle:
    """K independent runs with seeds base_seed .. base_seed+K-1."""
    if k < 2:
        raise EnsembleError(f"ensemble size must be >= 2, got {k}")
    members, seeds = [], []
    for i in range(k):
        seed = base_seed + i
        member_config = dataclasses.replace(config, seed=seed)
        member_dir = Path(checkpoint_dir) / f"member{i}" if checkpoint_dir else None
        if member_dir is not None:
            member_dir.mkdir(parents=True, exist_ok=True)
        logger.info("training ensemble member %d/%d (seed %d)", i + 1, k, seed)
        members.append(train_deformer(member_config, dataset, split,
                                      checkpoint_dir=member_dir, resume=resume))
        seeds.append(seed)
    return EnsembleBundle(members, seeds)


def predict_with_uncertainty(ens: EnsembleBundle, inputs, linear_positions):
    """Mean prediction and one uncertainty scalar per vertex.

    uncertainty_v = sqrt(mean over xyz of Var over members of position),
    population variance, scene units.  Zero exactly when all members agree.
    """
    preds = np.stack([infer(m, inputs, linear_positions) for m in ens.members])
    mean = preds.mean(axis=0)
    var = preds.var(axis=0)  # population variance across members, per axis
    uncertainty = np.sqrt(var.mean(axis=1))
    return mean, uncertainty


def mean_uncertainty(ens: EnsembleBundle, dataset, indices=None) -> float:
    """Average per-vertex uncertainty over the given frames."""
    if indices is None:
        indices = range(dataset.frame_count)
    total, count = 0.0, 0
    for i in indices:
        _, u = predict_with_uncertainty(ens, dataset.inputs[i], dataset.linear[i])
        total += float(u.sum())
        count += u.size
    if count == 0:
        raise EnsembleError("no frames to evaluate")
    return total / count


# --- storage: directory of member bundles plus a manifest ------------------


def save_ensemble(ens: EnsembleBundle, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, member in enumerate(ens.members):
        name = f"member{i}.daxb"
        save_bundle(member, directory / name)
        names.append(name)
    manifest = {"members": names, "seeds": [int(s) for s in ens.seeds]}
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_ensemble(directory) -> EnsembleBundle:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise EnsembleError(f"no {MANIFEST_NAME} in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    members = [load_bundle(directory / name) for name in manifest["members"]]
    return EnsembleBundle(members, [int(s) for s in manifest["seeds"]])
