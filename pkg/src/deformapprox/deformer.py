"""Deformation approximation on top of the linear baseline.

Two models live here.  The differential model is the main one: a network
predicts PCA coefficients of the residual's differential coordinates, small
subspace networks predict Cartesian residuals at a sparse set of anchor
vertices, and an anchored Laplacian solve merges the two into a full
residual field.  The per-bone model is the simpler baseline it is compared
against: one network per bone regressing local-frame residuals of the
vertices that bone dominates.

Training is deterministic per seed and resumable from checkpoints.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .container import read_container, write_container
from .dataset import Dataset, Normalization, fit_normalization, split_dataset
from .meshcore import (
    AnchoredFactor,
    TriMesh,
    build_laplacian,
    factor_anchored,
    reconstruct,
)
from .neural import (
    MLP,
    PCABasis,
    forward,
    make_train_state,
    pca_fit,
    pca_project,
    pca_reconstruct,
    train,
    train_resumable,
)
from .report import MetricsRow
from .rotation import ROT6D_ORDER, decode_6d

logger = logging.getLogger(__name__)

BUNDLE_MAGIC = b"DAXB"

_ZERO_TARGET_TOL = 1e-12


class DeformerError(ValueError):
    pass


class NumericalError(RuntimeError):
    """Raised when training diverges or inference produces non-finite values."""


@dataclass
class DeformerConfig:
    mesh: TriMesh
    fields: list
    hidden: tuple = (256, 128)
    subspace_hidden: tuple = (64,)
    lr: float = 1e-3
    epochs: int = 5000
    seed: int = 0
    pca_variance: float = 0.999
    pca_max_components: int = 128
    pca_components: int = 0  # > 0 forces an exact component count
    group_size: int = 4
    anchor_fraction: float = 0.05
    n_groups: int = 0  # 0 = derive from anchor_fraction
    anchor_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.pca_variance <= 1.0:
            raise DeformerError(f"pca_variance must be in (0, 1], got {self.pca_variance}")
        if self.group_size < 1:
            raise DeformerError(f"group_size must be >= 1, got {self.group_size}")
        if self.epochs < 1:
            raise DeformerError(f"epochs must be >= 1, got {self.epochs}")
        if not self.anchor_weight > 0:
            raise DeformerError(f"anchor_weight must be positive, got {self.anchor_weight}")
        n = self.mesh.vertex_count
        if self.n_groups == 0:
            self.n_groups = max(1, round(self.anchor_fraction * n / self.group_size))
        if self.n_groups < 1:
            raise DeformerError(f"n_groups must be >= 1, got {self.n_groups}")
        if self.n_groups * self.group_size > n:
            raise DeformerError(
                f"{self.n_groups} groups x {self.group_size} anchors exceed {n} vertices"
            )

    @property
    def n_anchors(self) -> int:
        return self.n_groups * self.group_size

    def meta(self) -> dict:
        return {
            "hidden": [int(h) for h in self.hidden],
            "subspace_hidden": [int(h) for h in self.subspace_hidden],
            "lr": float(self.lr),
            "epochs": int(self.epochs),
            "seed": int(self.seed),
            "pca_variance": float(self.pca_variance),
            "pca_max_components": int(self.pca_max_components),
            "pca_components": int(self.pca_components),
            "group_size": int(self.group_size),
            "anchor_fraction": float(self.anchor_fraction),
            "n_groups": int(self.n_groups),
            "anchor_weight": float(self.anchor_weight),
        }


@dataclass
class ModelBundle:
    fields: list                 # [(name, kind)] input column spec
    norm: Normalization
    pca: PCABasis
    diff_net: MLP                # None when PCA kept zero components
    subspace_nets: list
    anchor_groups: list          # selection-order index arrays, one per net
    group_means: list            # train-mean Cartesian offsets per group
    factor: AnchoredFactor
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        flat = np.concatenate(self.anchor_groups)
        if flat.size != np.unique(flat).size:
            raise DeformerError("anchor groups overlap")
        if not np.array_equal(np.sort(flat), self.factor.anchor_indices):
            raise DeformerError("anchor groups do not partition the factored anchor set")
        if len(self.subspace_nets) != len(self.anchor_groups) != len(self.group_means):
            raise DeformerError("subspace nets, groups, and means must align")
        # rows of the anchor-position matrix each group writes into
        self._scatter = [
            np.searchsorted(self.factor.anchor_indices, g) for g in self.anchor_groups
        ]

    @property
    def vertex_count(self) -> int:
        return self.factor.vertex_count

    @property
    def input_width(self) -> int:
        return self.norm.mean.size


def select_anchors(mesh: TriMesh, count: int, start: int = 0) -> np.ndarray:
    """Farthest-point sampling under graph geodesic distance (edge lengths),
    starting from vertex ``start``.  Returns indices in selection order."""
    n = mesh.vertex_count
    if not 1 <= count <= n:
        raise DeformerError(f"anchor count {count} out of range [1, {n}]")
    t = mesh.triangles
    i = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    j = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    lengths = np.linalg.norm(mesh.positions[i] - mesh.positions[j], axis=1)
    graph = csr_matrix((lengths, (i, j)), shape=(n, n))
    graph = graph.maximum(graph.T)
    chosen = [int(start)]
    dist = dijkstra(graph, directed=False, indices=start)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, dijkstra(graph, directed=False, indices=nxt))
    return np.asarray(chosen, dtype=np.int64)


def _check_fields(config_fields, dataset_fields):
    want = [(f.name, f.kind) for f in config_fields]
    have = [(f.name, f.kind) for f in dataset_fields]
    if want != have:
        raise DeformerError(f"dataset fields {have} do not match config fields {want}")


def _train_component(name, layer_sizes, x, y, seed_seq, epochs, lr,
                     checkpoint_dir, resume, checkpoint_every):
    path = Path(checkpoint_dir) / f"{name}.daxm" if checkpoint_dir else None
    state = train_resumable(layer_sizes, x, y, epochs, lr, seed_seq,
                            checkpoint_path=path,
                            checkpoint_every=checkpoint_every, resume=resume)
    logger.info("%s: epoch %d loss %.3e", name, state.epoch,
                state.loss_history[-1] if state.loss_history else float("nan"))
    return state


def _zero_net(net: MLP) -> None:
    for p in net.parameters():
        p[:] = 0


def train_deformer(config: DeformerConfig, dataset: Dataset, split=None,
                   checkpoint_dir=None, resume=False,
                   checkpoint_every: int = 0) -> ModelBundle:
    """Fit the differential model.

    split: None trains on every frame; an int (or (stride, offset) pair)
    holds out every nth frame before training.  With checkpoint_dir set,
    per-network checkpoints are written; resume=True picks them up.
    """
    _check_fields(config.fields, dataset.fields)
    if dataset.vertex_count != config.mesh.vertex_count:
        raise DeformerError(
            f"dataset has {dataset.vertex_count} vertices, mesh has "
            f"{config.mesh.vertex_count}"
        )
    if split is not None:
        stride, offset = split if isinstance(split, tuple) else (split, 0)
        train_ds, _ = split_dataset(dataset, stride, offset)
    else:
        train_ds = dataset
    frames = train_ds.frame_count
    n = config.mesh.vertex_count

    lap = build_laplacian(config.mesh)
    residual = train_ds.residual()
    delta = np.stack([(lap.matrix @ residual[f]).ravel() for f in range(frames)])

    if config.pca_components > 0:
        pca = pca_fit(delta, 1.0, config.pca_components)
    else:
        pca = pca_fit(delta, config.pca_variance, config.pca_max_components)
    if pca.n_components == min(frames, delta.shape[1]) and pca.n_components > 0:
        logger.warning("pca rank limited by %d training frames", frames)

    norm = fit_normalization(train_ds.inputs)
    x = norm.apply(train_ds.inputs).astype(np.float32)
    width = x.shape[1]

    seeds = np.random.SeedSequence(config.seed).spawn(1 + config.n_groups)

    diff_net = None
    if pca.n_components > 0:
        coeffs = pca_project(pca, delta)
        state = _train_component(
            "diff", [width, *config.hidden, pca.n_components], x, coeffs,
            seeds[0], config.epochs, config.lr,
            checkpoint_dir, resume, checkpoint_every)
        diff_net = state.net
    else:
        logger.info("diff: zero-variance differential coordinates, no network")

    order = select_anchors(config.mesh, config.n_anchors)
    groups = [order[g * config.group_size:(g + 1) * config.group_size]
              for g in range(config.n_groups)]

    subspace_nets, group_means = [], []
    for g, group in enumerate(groups):
        targets = residual[:, group, :].reshape(frames, -1)
        mean = targets.mean(axis=0)
        centered = targets - mean
        net_sizes = [width, *config.subspace_hidden, targets.shape[1]]
        if np.abs(centered).max() < _ZERO_TARGET_TOL:
            # constant target: the stored mean already reproduces it exactly
            state = make_train_state(net_sizes, seeds[1 + g], config.lr)
            _zero_net(state.net)
            logger.info("sub%d: constant targets, network zeroed", g)
        else:
            state = _train_component(
                f"sub{g}", net_sizes, x, centered,
                seeds[1 + g], config.epochs, config.lr,
                checkpoint_dir, resume, checkpoint_every)
        subspace_nets.append(state.net)
        group_means.append(mean)

    factor = factor_anchored(lap, np.sort(order), config.anchor_weight)
    meta = {
        "kind": "model-bundle",
        "fields": [[f.name, f.kind] for f in dataset.fields],
        "vertex_count": int(n),
        "rot6d_order": ROT6D_ORDER,
        "residual_scale": float(np.sqrt(np.mean(residual ** 2))),
        "config": config.meta(),
    }
    return ModelBundle(
        [(f.name, f.kind) for f in dataset.fields], norm, pca, diff_net,
        subspace_nets, groups, group_means, factor, meta)


# --- inference -------------------------------------------------------------


def _decode_delta(bundle: ModelBundle, x32: np.ndarray) -> np.ndarray:
    """(C, D) normalized inputs -> (C, 3N) differential coordinates."""
    if bundle.diff_net is not None:
        coeffs = forward(bundle.diff_net, x32).astype(np.float64)
        return pca_reconstruct(bundle.pca, np.atleast_2d(coeffs))
    c = x32.shape[0] if x32.ndim == 2 else 1
    return np.tile(bundle.pca.mean, (c, 1))


def _anchor_offsets(bundle: ModelBundle, x32: np.ndarray) -> np.ndarray:
    """(C, D) normalized inputs -> (C, A, 3) anchor offsets, sorted order."""
    c = x32.shape[0]
    out = np.empty((c, bundle.factor.anchor_indices.size, 3))
    for net, mean, rows in zip(bundle.subspace_nets, bundle.group_means,
                               bundle._scatter):
        pred = forward(net, x32).astype(np.float64) + mean
        out[:, rows, :] = pred.reshape(c, -1, 3)
    return out


def _check_inputs(bundle: ModelBundle, inputs: np.ndarray, linear: np.ndarray,
                  batched: bool):
    d = bundle.input_width
    n = bundle.vertex_count
    if batched:
        if inputs.ndim != 2 or inputs.shape[1] != d:
            raise DeformerError(f"batch inputs must be (C, {d}), got {inputs.shape}")
        if linear.shape != (inputs.shape[0], n, 3):
            raise DeformerError(
                f"batch linear positions must be ({inputs.shape[0]}, {n}, 3), "
                f"got {linear.shape}")
    else:
        if inputs.shape != (d,):
            raise DeformerError(f"inputs must be ({d},), got {inputs.shape}")
        if linear.shape != (n, 3):
            raise DeformerError(f"linear positions must be ({n}, 3), got {linear.shape}")


def infer(bundle: ModelBundle, inputs, linear_positions) -> np.ndarray:
    """One character, one frame: linear mesh plus predicted residual."""
    inputs = np.asarray(inputs, dtype=np.float64)
    linear = np.asarray(linear_positions, dtype=np.float64)
    _check_inputs(bundle, inputs, linear, batched=False)
    x32 = bundle.norm.apply(inputs).astype(np.float32)
    n = bundle.vertex_count
    delta = _decode_delta(bundle, x32).reshape(n, 3)
    offsets = _anchor_offsets(bundle, x32[None, :])[0]
    residual = reconstruct(bundle.factor, delta, offsets)
    out = linear + residual
    if not np.isfinite(out).all():
        raise NumericalError("non-finite inference output")
    return out


def infer_batch(bundle: ModelBundle, inputs, linear_positions) -> np.ndarray:
    """C characters in one go.  Networks run with a batch dimension and all
    3C reconstruction columns share one pair of triangular solves."""
    inputs = np.asarray(inputs, dtype=np.float64)
    linear = np.asarray(linear_positions, dtype=np.float64)
    _check_inputs(bundle, inputs, linear, batched=True)
    c = inputs.shape[0]
    n = bundle.vertex_count
    x32 = bundle.norm.apply(inputs).astype(np.float32)
    delta = _decode_delta(bundle, x32).reshape(c, n, 3)
    offsets = _anchor_offsets(bundle, x32)
    # columns ordered frame-major: [f0.x f0.y f0.z f1.x ...]
    delta_cols = np.moveaxis(delta, 0, 1).reshape(n, 3 * c)
    offset_cols = np.moveaxis(offsets, 0, 1).reshape(-1, 3 * c)
    res_cols = reconstruct(bundle.factor, delta_cols, offset_cols)
    residual = np.moveaxis(res_cols.reshape(n, c, 3), 1, 0)
    out = linear + residual
    if not np.isfinite(out).all():
        raise NumericalError("non-finite inference output")
    return out


# --- per-bone baseline -----------------------------------------------------


@dataclass
class FddaModel:
    """Per-bone regression baseline: each vertex belongs to the bone with
    its highest skin weight (ties to the lower index) and that bone's
    network predicts local-frame residuals for its vertex group."""

    bone_nets: list          # MLP or None per bone
    vertex_groups: list      # sorted vertex indices per bone
    rotation_columns: list   # dataset input columns of each bone's 6D code
    rest_rotations: list
    vertex_count: int

    def __post_init__(self):
        counts = sum(g.size for g in self.vertex_groups)
        if counts != self.vertex_count:
            raise DeformerError("vertex groups must cover the mesh exactly")
        self._all_rot_cols = np.concatenate(self.rotation_columns)


def _bone_rotation_columns(fields) -> list:
    """First six columns of every boneK matrix field, in bone order."""
    cols, offset = {}, 0
    for f in fields:
        if f.kind == "matrix" and f.name.startswith("bone"):
            cols[int(f.name[4:])] = np.arange(offset, offset + 6)
        offset += f.width
    if not cols:
        raise DeformerError("dataset has no bone matrix fields")
    return [cols[k] for k in sorted(cols)]


def train_fdda(dataset: Dataset, skin_weights, hidden=(256, 128),
               epochs: int = 5000, lr: float = 1e-3, seed: int = 0,
               rest_rotations=None) -> FddaModel:
    """Train the per-bone baseline on the same frames the differential
    model sees.  Inputs are the 6D rotation codes of every bone; targets
    are residuals expressed in each frame's bone frame."""
    weights = np.asarray(skin_weights, dtype=np.float64)
    if weights.shape[0] != dataset.vertex_count:
        raise DeformerError("skin weight rows must match dataset vertices")
    n_bones = weights.shape[1]
    rot_cols = _bone_rotation_columns(dataset.fields)
    if len(rot_cols) < n_bones:
        raise DeformerError(
            f"dataset has {len(rot_cols)} bone fields, weights have {n_bones}")
    rot_cols = rot_cols[:n_bones]
    if rest_rotations is None:
        rest_rotations = [np.eye(3) for _ in range(n_bones)]

    assignment = np.argmax(weights, axis=1)
    frames = dataset.frame_count
    residual = dataset.residual()
    x6 = dataset.inputs[:, np.concatenate(rot_cols)].astype(np.float32)
    frame_rots = [
        [decode_6d(dataset.inputs[f, cols]) for f in range(frames)]
        for cols in rot_cols
    ]

    seeds = np.random.SeedSequence(seed).spawn(n_bones)
    nets, groups = [], []
    for b in range(n_bones):
        verts = np.flatnonzero(assignment == b)
        groups.append(verts)
        if verts.size == 0:
            logger.info("bone %d dominates no vertices, skipped", b)
            nets.append(None)
            continue
        targets = np.stack([
            (residual[f, verts, :] @ frame_rots[b][f]).ravel()
            for f in range(frames)
        ])
        sizes = [x6.shape[1], *hidden, targets.shape[1]]
        state = make_train_state(sizes, seeds[b], lr)
        if np.abs(targets).max() < _ZERO_TARGET_TOL:
            _zero_net(state.net)
        else:
            losses = train(state, x6, targets, epochs)
            if losses and not np.isfinite(losses[-1]):
                raise NumericalError(f"bone {b}: training diverged")
            logger.info("bone %d: %d vertices, loss %.3e", b, verts.size, losses[-1])
        nets.append(state.net)
    return FddaModel(nets, groups, rot_cols, rest_rotations, dataset.vertex_count)


def fdda_infer(model: FddaModel, inputs, linear_positions) -> np.ndarray:
    """Takes the full dataset input row; slices out the rotation codes."""
    inputs = np.asarray(inputs, dtype=np.float64)
    linear = np.asarray(linear_positions, dtype=np.float64)
    if linear.shape != (model.vertex_count, 3):
        raise DeformerError(
            f"linear positions must be ({model.vertex_count}, 3), got {linear.shape}")
    x6 = inputs[model._all_rot_cols].astype(np.float32)
    out = linear.copy()
    for net, verts, cols in zip(model.bone_nets, model.vertex_groups,
                                model.rotation_columns):
        if net is None or verts.size == 0:
            continue
        rot = decode_6d(inputs[cols])
        local = forward(net, x6).astype(np.float64).reshape(-1, 3)
        out[verts] += local @ rot.T
    if not np.isfinite(out).all():
        raise NumericalError("non-finite inference output")
    return out


def blend_zone(skin_weights, lo: float = 0.3, hi: float = 0.7) -> np.ndarray:
    """Vertices whose maximum skin weight sits in [lo, hi]: the band where
    per-bone models must extrapolate across a bone boundary."""
    w = np.asarray(skin_weights, dtype=np.float64)
    top = w.max(axis=1)
    return np.flatnonzero((top >= lo) & (top <= hi))


# --- evaluation ------------------------------------------------------------


def predict(model, inputs, linear_positions) -> np.ndarray:
    if isinstance(model, FddaModel):
        return fdda_infer(model, inputs, linear_positions)
    return infer(model, inputs, linear_positions)


def evaluate(model, dataset: Dataset, indices=None):
    """Per-frame error metrics against the stored final positions, plus an
    aggregate row (frame index -1) pooled over all evaluated vertices."""
    if indices is None:
        indices = np.arange(dataset.frame_count)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= dataset.frame_count):
        raise DeformerError("evaluation index out of range")
    rows = []
    pooled = []
    for i in indices:
        pred = predict(model, dataset.inputs[i], dataset.linear[i])
        err = np.linalg.norm(pred - dataset.final[i], axis=1)
        pooled.append(err)
        rows.append(MetricsRow(
            frame=int(i),
            rmse=float(np.sqrt(np.mean(err ** 2))),
            mean=float(err.mean()),
            max=float(err.max()),
            p95=float(np.percentile(err, 95)),
        ))
    if pooled:
        all_err = np.concatenate(pooled)
        summary = MetricsRow(
            frame=-1,
            rmse=float(np.sqrt(np.mean(all_err ** 2))),
            mean=float(all_err.mean()),
            max=float(all_err.max()),
            p95=float(np.percentile(all_err, 95)),
        )
    else:
        summary = MetricsRow(frame=-1, rmse=0.0, mean=0.0, max=0.0, p95=0.0)
    return rows, summary


# --- bundle files ----------------------------------------------------------


def save_bundle(bundle: ModelBundle, path) -> None:
    arrays = {
        "norm_mean": bundle.norm.mean,
        "norm_std": bundle.norm.std,
        "pca_mean": bundle.pca.mean,
        "pca_components": bundle.pca.components,
        "pca_singular": bundle.pca.singular_values,
        "anchors": bundle.factor.anchor_indices,
        "factor_perm": bundle.factor.perm,
        "factor_lower": bundle.factor.lower,
        "lap_data": bundle.factor.laplacian.data,
        "lap_indices": bundle.factor.laplacian.indices.astype(np.int64),
        "lap_indptr": bundle.factor.laplacian.indptr.astype(np.int64),
    }

    def put_net(prefix, net):
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{prefix}.w{i}"] = w
            arrays[f"{prefix}.b{i}"] = b

    if bundle.diff_net is not None:
        put_net("diff", bundle.diff_net)
    for g, (net, group, mean) in enumerate(zip(
            bundle.subspace_nets, bundle.anchor_groups, bundle.group_means)):
        put_net(f"sub{g}", net)
        arrays[f"group{g}"] = group
        arrays[f"group{g}_mean"] = mean
    meta = dict(bundle.meta)
    meta.update({
        "kind": "model-bundle",
        "anchor_weight": float(bundle.factor.anchor_weight),
        "n_groups": len(bundle.subspace_nets),
        "diff_layers": (len(bundle.diff_net.weights) if bundle.diff_net else 0),
        "sub_layers": len(bundle.subspace_nets[0].weights),
    })
    write_container(path, BUNDLE_MAGIC, meta, arrays)


def _get_net(arrays, prefix, n_layers):
    return MLP([arrays[f"{prefix}.w{i}"] for i in range(n_layers)],
               [arrays[f"{prefix}.b{i}"] for i in range(n_layers)])


def load_bundle(path) -> ModelBundle:
    meta, arrays = read_container(path, BUNDLE_MAGIC)
    n = int(meta["vertex_count"])
    lap = csr_matrix(
        (arrays["lap_data"], arrays["lap_indices"], arrays["lap_indptr"]),
        shape=(n, n))
    factor = AnchoredFactor(
        arrays["anchors"], float(meta["anchor_weight"]),
        arrays["factor_perm"], arrays["factor_lower"], lap)
    diff_net = None
    if meta["diff_layers"]:
        diff_net = _get_net(arrays, "diff", meta["diff_layers"])
    nets, groups, means = [], [], []
    for g in range(meta["n_groups"]):
        nets.append(_get_net(arrays, f"sub{g}", meta["sub_layers"]))
        groups.append(arrays[f"group{g}"])
        means.append(arrays[f"group{g}_mean"])
    return ModelBundle(
        [(name, kind) for name, kind in meta["fields"]],
        Normalization(arrays["norm_mean"], arrays["norm_std"]),
        PCABasis(arrays["pca_mean"], arrays["pca_components"], arrays["pca_singular"]),
        diff_net, nets, groups, means, factor, meta)
