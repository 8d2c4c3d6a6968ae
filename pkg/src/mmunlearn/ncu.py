"""Null-space constrained adapter initialization.

The visual encoder's adapted layers get low-rank adapters whose frozen
projection A is chosen from the minor eigenvectors of the retain-set
activation covariance. Retain activations then map (approximately) to
zero through A, so whatever the trainable B learns can only act on
directions the retain set does not occupy. The random-subspace variant
swaps the covariance eigenvectors for an orthonormalized Gaussian and is
used as an ablation control.

Layer convention: activations are row vectors and layers compute
y = x @ W + (x @ a_t) @ b_t with a_t = A^T, so the per-row null-space
residual is ||x @ a_t|| / ||x||.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import linalg
from .errors import ConfigError, ContractError, InputError
from .model import LoraAdapter, ToyModel
from .rng import stream

ACTIVATION_MAGIC = b"NSUA"
BASIS_MAGIC = b"NSUB"

# cap on calibration rows per layer; covariance at these widths
# concentrates long before this
MAX_CALIBRATION_ROWS = 4096


@dataclass(frozen=True)
class ActivationDump:
    """Per-layer matrices of row activations entering each adapted layer."""
    layers: dict[str, np.ndarray]

    def layer_ids(self) -> list[str]:
        return sorted(self.layers)


@dataclass(frozen=True)
class NullSpaceBasis:
    """Per-layer minor eigenvectors (columns) and the full spectrum."""
    rank: int
    bases: dict[str, np.ndarray]        # d x r, columns orthonormal
    eigenvalues: dict[str, np.ndarray]  # length d, ascending

    def layer_ids(self) -> list[str]:
        return sorted(self.bases)


def collect_activations(model: ToyModel, retain_samples: Sequence,
                        layer_ids: Sequence[str] | None = None,
                        max_rows: int = MAX_CALIBRATION_ROWS,
                        seed: int = 0) -> ActivationDump:
    """Record the inputs to each adapted layer over the retain set.

    Runs the visual module with adapters disabled, in the given sample
    order. When a layer accumulates more than max_rows rows, a seeded
    reservoir keeps a uniform subsample.
    """
    if not retain_samples:
        raise ContractError("collect_activations: empty retain set")
    if layer_ids is None:
        layer_ids = model.adapted_layer_ids
    rows: dict[str, list[np.ndarray]] = {lid: [] for lid in layer_ids}
    for s in retain_samples:
        if s.image is None:
            raise InputError("collect_activations: sample has no image")
        rec: dict[str, np.ndarray] = {}
        model.encode(model._check_image(s.image), adapters_enabled=False,
                     record_inputs=rec)
        for lid in layer_ids:
            rows[lid].append(rec[lid])
    layers = {lid: np.concatenate(rows[lid], axis=0) for lid in layer_ids}
    for lid, x in layers.items():
        if x.shape[0] > max_rows:
            layers[lid] = _reservoir_rows(x, max_rows, seed, lid)
    return ActivationDump(layers)


def _reservoir_rows(x: np.ndarray, k: int, seed: int, tag: str) -> np.ndarray:
    rng = stream(seed, f"calib-reservoir/{tag}")
    keep = np.arange(k)
    for i in range(k, x.shape[0]):
        j = int(rng.integers(0, i + 1))
        if j < k:
            keep[j] = i
    return x[np.sort(keep)]


def build_basis(dump: ActivationDump, r: int) -> NullSpaceBasis:
    """Eigendecompose each layer covariance and keep the r minor directions."""
    bases, spectra = {}, {}
    for lid, x in dump.layers.items():
        d = x.shape[1]
        if not 1 <= r < d:
            raise ConfigError(f"build_basis: rank {r} out of range for width {d}")
        c = linalg.covariance(x)
        lam, u = linalg.sym_eig(c)
        bases[lid] = u[:, :r].copy()
        spectra[lid] = lam
    return NullSpaceBasis(r, bases, spectra)


def init_lora_ncu(model: ToyModel, basis: NullSpaceBasis) -> ToyModel:
    """Attach adapters with A = U_perp^T frozen and B = 0 trainable."""
    expected = set(model.adapted_layer_ids)
    if set(basis.bases) != expected:
        raise ConfigError(
            f"basis layers {sorted(basis.bases)} != model layers {sorted(expected)}")
    for lid in model.adapted_layer_ids:
        u_perp = basis.bases[lid]
        d_in, d_out = model.params[lid].value.shape
        if u_perp.shape != (d_in, basis.rank):
            raise ConfigError(
                f"basis for {lid} has shape {u_perp.shape}, want ({d_in}, {basis.rank})")
        model.adapters[lid] = LoraAdapter(lid, u_perp.copy(), d_out)
    return model


def init_lora_random(model: ToyModel, r: int, seed: int) -> ToyModel:
    """Ablation control: A spans a random orthonormal subspace instead."""
    for lid in model.adapted_layer_ids:
        d_in, d_out = model.params[lid].value.shape
        if not 1 <= r < d_in:
            raise ConfigError(f"init_lora_random: rank {r} out of range for {lid}")
        g = stream(seed, f"random-subspace/{lid}").standard_normal((d_in, r))
        q = linalg.qr_orthonormal(g)
        model.adapters[lid] = LoraAdapter(lid, q, d_out)
    return model


def verify_nullspace(adapters: dict[str, LoraAdapter],
                     dump: ActivationDump) -> dict[str, dict[str, float]]:
    """Per-layer relative residuals ||x @ a_t|| / max(||x||, 1e-12)."""
    if set(adapters) != set(dump.layers):
        raise ConfigError(
            f"adapter layers {sorted(adapters)} != dump layers {sorted(dump.layers)}")
    report = {}
    for lid, x in dump.layers.items():
        proj = x @ adapters[lid].a_t.value
        num = np.linalg.norm(proj, axis=1)
        den = np.maximum(np.linalg.norm(x, axis=1), 1e-12)
        res = num / den
        report[lid] = {"max_residual": float(res.max()),
                       "mean_residual": float(res.mean())}
    return report


# -- serialization -----------------------------------------------------------


def save_dump(dump: ActivationDump, path) -> None:
    with open(path, "wb") as fh:
        fh.write(ACTIVATION_MAGIC)
        fh.write(struct.pack("<I", len(dump.layers)))
        for lid in dump.layer_ids():
            name = lid.encode()
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            linalg.write_matrix(fh, dump.layers[lid])


def load_dump(path) -> ActivationDump:
    with open(path, "rb") as fh:
        if fh.read(4) != ACTIVATION_MAGIC:
            raise InputError(f"{path}: not an activation dump")
        (count,) = struct.unpack("<I", fh.read(4))
        layers = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            lid = fh.read(nlen).decode()
            layers[lid] = linalg.read_matrix(fh)
    return ActivationDump(layers)


def save_basis(basis: NullSpaceBasis, path) -> None:
    with open(path, "wb") as fh:
        fh.write(BASIS_MAGIC)
        fh.write(struct.pack("<II", basis.rank, len(basis.bases)))
        for lid in basis.layer_ids():
            name = lid.encode()
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            linalg.write_matrix(fh, basis.bases[lid])
            linalg.write_matrix(fh, basis.eigenvalues[lid].reshape(1, -1))


def load_basis(path) -> NullSpaceBasis:
    with open(path, "rb") as fh:
        if fh.read(4) != BASIS_MAGIC:
            raise InputError(f"{path}: not a null-space basis file")
        rank, count = struct.unpack("<II", fh.read(8))
        bases, spectra = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            lid = fh.read(nlen).decode()
            bases[lid] = linalg.read_matrix(fh)
            spectra[lid] = linalg.read_matrix(fh).ravel()
    return NullSpaceBasis(rank, bases, spectra)
