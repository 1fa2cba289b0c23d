"""Twin VAE over depth scans and egocentric occupancy patches.

Both branches share one architecture: a dense ReLU encoder producing
``mu`` and ``log sigma^2`` (no activation on the latent layer) and a mirrored
decoder with a sigmoid output. Inputs are normalized to [0, 1].
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .environment import N_HEADINGS, Pose, Sensors, SensorConfig
from .errors import (DivergedTraining, EmptyInput, InsufficientFreeSpace, MalformedInput,
                     NonFiniteInput, ShapeMismatch, UntrainedEncoder)
from .grid import OccupancyGrid
from .nncore import MLP, AdamState, Module, Tensor, adam_apply, as_tensor, no_grad
from .nncore.checkpoint import checksum, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

SAMPLE_Z, MEAN_MU = "sample_z", "mean_mu"
DATASET_MAGIC = b"NVD1"


# -- dataset -------------------------------------------------------------------

@dataclass
class SweepDataset:
    depth: np.ndarray     # (N, R) in (0, 1]
    patch: np.ndarray     # (N, P, P) uint8 in {0, 1}
    max_range: float

    def __len__(self) -> int:
        return self.depth.shape[0]

    def to_bytes(self) -> bytes:
        n, r = self.depth.shape
        p = self.patch.shape[1]
        head = DATASET_MAGIC + struct.pack("<IIIdd", n, r, p, self.max_range, 1.0)
        body = bytearray()
        depth = np.ascontiguousarray(self.depth, dtype="<f8")
        patch = np.ascontiguousarray(self.patch, dtype=np.uint8)
        for i in range(n):
            body += depth[i].tobytes()
            body += patch[i].tobytes()
        return head + bytes(body)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SweepDataset":
        hsize = 4 + struct.calcsize("<IIIdd")
        if len(blob) < hsize or blob[:4] != DATASET_MAGIC:
            raise MalformedInput("not a sweep dataset file")
        n, r, p, max_range, _ = struct.unpack_from("<IIIdd", blob, 4)
        rec = 8 * r + p * p
        if len(blob) != hsize + n * rec:
            raise MalformedInput(f"dataset size mismatch: header says {n} records")
        raw = np.frombuffer(blob, dtype=np.uint8, offset=hsize).reshape(n, rec)
        depth = raw[:, :8 * r].copy().view("<f8").astype(np.float64).reshape(n, r)
        patch = raw[:, 8 * r:].reshape(n, p, p).copy()
        return cls(depth, patch, max_range)


def collect_dataset(grid: OccupancyGrid, n_poses: int, rng: np.random.Generator,
                    sensors: Sensors | None = None) -> SweepDataset:
    """Observations at ``n_poses`` random free positions, each swept over all 36 headings."""
    sensors = sensors or Sensors()
    free = grid.free_cells()
    if n_poses < 1 or len(free) < n_poses:
        raise InsufficientFreeSpace(f"need {n_poses} free cells, map has {len(free)}")
    cells = free[rng.choice(len(free), size=n_poses, replace=False)]
    offsets = rng.random((n_poses, 2))
    cfg = sensors.config
    depth = np.empty((n_poses * N_HEADINGS, cfg.num_rays))
    patch = np.empty((n_poses * N_HEADINGS, cfg.patch_size, cfg.patch_size), dtype=np.uint8)
    i = 0
    for (row, col), (u, v) in zip(cells, offsets):
        x = (col + u) * grid.cell_size
        y = (row + v) * grid.cell_size
        for k in range(N_HEADINGS):
            pose = Pose(float(x), float(y), k)
            depth[i] = sensors.depth(pose, grid) / cfg.max_range
            patch[i] = sensors.patch(pose, grid)
            i += 1
    return SweepDataset(depth, patch, cfg.max_range)


# -- losses --------------------------------------------------------------------

def kl_divergence(mu, logvar) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over the last axis."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeMismatch(f"mu {mu.shape} vs logvar {logvar.shape}")
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(logvar.data))):
        raise NonFiniteInput("KL inputs must be finite")
    return 0.5 * (mu * mu + logvar.expm1() - logvar).sum(axis=-1)


def reparameterize(mu, logvar, noise) -> Tensor:
    """z = mu + exp(logvar / 2) * noise."""
    mu, logvar, noise = as_tensor(mu), as_tensor(logvar), as_tensor(noise)
    if not (mu.shape == logvar.shape == noise.shape):
        raise ShapeMismatch(f"mu {mu.shape}, logvar {logvar.shape}, noise {noise.shape}")
    return mu + (logvar * 0.5).exp() * noise


def vae_loss(x, reconstruction, mu, logvar, beta: float = 1.0) -> Tensor:
    """Sum-of-squares reconstruction + beta * KL; averaged over the batch for 2-D inputs."""
    x, reconstruction = as_tensor(x), as_tensor(reconstruction)
    if x.shape != reconstruction.shape:
        raise ShapeMismatch(f"input {x.shape} vs reconstruction {reconstruction.shape}")
    diff = reconstruction - x
    per_sample = (diff * diff).sum(axis=-1) + beta * kl_divergence(mu, logvar)
    return per_sample.mean() if per_sample.ndim else per_sample


# -- networks ------------------------------------------------------------------

class VaeBranch(Module):
    def __init__(self, input_dim: int, n_z: int, rng: np.random.Generator, name: str,
                 hidden=(256, 128)):
        self.input_dim = input_dim
        self.n_z = n_z
        self.hidden = tuple(hidden)
        h1, h2 = self.hidden
        self.encoder = MLP([input_dim, h1, h2, 2 * n_z], ["relu", "relu", "identity"], rng,
                           f"{name}.encoder")
        self.decoder = MLP([n_z, h2, h1, input_dim], ["relu", "relu", "sigmoid"], rng,
                           f"{name}.decoder")

    def encode_stats(self, x):
        out = self.encoder(x)
        return out[..., :self.n_z], out[..., self.n_z:]

    def __call__(self, x, noise):
        """Returns (reconstruction, mu, logvar) for a batch ``x`` and standard-normal ``noise``."""
        mu, logvar = self.encode_stats(x)
        z = reparameterize(mu, logvar, noise)
        return self.decoder(z), mu, logvar

    def loss(self, x, noise, beta: float = 1.0) -> Tensor:
        recon, mu, logvar = self(x, noise)
        return vae_loss(x, recon, mu, logvar, beta)


@dataclass
class LatentEmbedding:
    z_depth: np.ndarray
    z_patch: np.ndarray
    mode: str

    def vector(self) -> np.ndarray:
        return np.concatenate([self.z_depth, self.z_patch], axis=-1)


class TwinVae(Module):
    def __init__(self, sensor_config: SensorConfig = SensorConfig(), n_z: int = 16,
                 hidden=(256, 128), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.sensor_config = sensor_config
        self.n_z = n_z
        self.hidden = tuple(hidden)
        self.depth = VaeBranch(sensor_config.num_rays, n_z, rng, "vae.depth", hidden)
        self.patch = VaeBranch(sensor_config.patch_size ** 2, n_z, rng, "vae.patch", hidden)
        self.trained = False

    @property
    def latent_dim(self) -> int:
        return 2 * self.n_z

    def normalize(self, depth_scan, patch):
        """Raw sensor arrays (single or batched) -> network inputs in [0, 1]."""
        d = np.asarray(depth_scan, dtype=np.float64) / self.sensor_config.max_range
        p = np.asarray(patch, dtype=np.float64)
        if d.ndim == 1:
            return d, p.reshape(-1)
        return d, p.reshape(p.shape[0], -1)

    def encode_normalized(self, depth_in, patch_in, mode: str, rng=None,
                          allow_untrained: bool = False) -> np.ndarray:
        """Latent vectors (..., 2 n_z) as [z_depth, z_patch] for normalized inputs."""
        if not (self.trained or allow_untrained):
            raise UntrainedEncoder("encoder has not been trained (pass allow_untrained for ablations)")
        if mode not in (SAMPLE_Z, MEAN_MU):
            raise ValueError(f"unknown encode mode {mode!r}")
        with no_grad():
            mu_d, lv_d = self.depth.encode_stats(depth_in)
            mu_p, lv_p = self.patch.encode_stats(patch_in)
        mu = np.concatenate([mu_d.data, mu_p.data], axis=-1)
        if mode == MEAN_MU:
            return mu
        logvar = np.concatenate([lv_d.data, lv_p.data], axis=-1)
        noise = rng.standard_normal(mu.shape)
        return mu + np.exp(0.5 * logvar) * noise

    def encode(self, obs, mode: str = SAMPLE_Z, rng=None, allow_untrained: bool = False) -> LatentEmbedding:
        d, p = self.normalize(obs.depth_scan, obs.patch)
        v = self.encode_normalized(d, p, mode, rng, allow_untrained)
        return LatentEmbedding(v[:self.n_z], v[self.n_z:], mode)

    def metadata(self) -> dict:
        c = self.sensor_config
        return {"kind": "twin_vae", "n_z": self.n_z, "hidden": list(self.hidden),
                "trained": self.trained, "num_rays": c.num_rays, "fov_deg": c.fov_deg,
                "max_range": c.max_range, "patch_size": c.patch_size, "patch_cell": c.patch_cell}

    def to_bytes(self, extra: dict | None = None) -> bytes:
        meta = self.metadata()
        meta.update(extra or {})
        return save_checkpoint(self.state_dict(), meta)

    def checksum(self) -> str:
        return checksum(save_checkpoint(self.state_dict(), self.metadata()))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TwinVae":
        params, meta = load_checkpoint(blob)
        if meta.get("kind") != "twin_vae":
            raise ShapeMismatch(f"checkpoint kind {meta.get('kind')!r} is not a twin VAE")
        cfg = SensorConfig(num_rays=meta["num_rays"], fov_deg=meta["fov_deg"],
                           max_range=meta["max_range"], patch_size=meta["patch_size"],
                           patch_cell=meta["patch_cell"])
        vae = cls(cfg, n_z=meta["n_z"], hidden=meta["hidden"])
        vae.load_state_dict(params)
        vae.trained = bool(meta["trained"])
        return vae


def dataset_inputs(dataset: SweepDataset):
    """(depth inputs (N, R), patch inputs (N, P*P)) as float64."""
    n = len(dataset)
    return dataset.depth.astype(np.float64), dataset.patch.reshape(n, -1).astype(np.float64)


def train_vae(data: np.ndarray, branch: VaeBranch, rng: np.random.Generator, batch: int = 64,
              iterations: int = 5000, lr: float = 1e-3, beta: float = 1.0) -> list[float]:
    """Mini-batch Adam on one branch; returns the per-iteration loss curve."""
    if len(data) == 0:
        raise EmptyInput("empty dataset")
    state = AdamState(lr=lr)
    params = branch.parameters()
    curve = []
    for it in range(iterations):
        idx = rng.integers(len(data), size=min(batch, len(data)))
        x = data[idx]
        noise = rng.standard_normal((len(idx), branch.n_z))
        loss = branch.loss(x, noise, beta)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergedTraining(f"VAE loss became non-finite at iteration {it}")
        loss.backward()
        adam_apply(params, state)
        curve.append(value)
    return curve


def train_twin_vae(dataset: SweepDataset, vae: TwinVae, seed: int = 0, batch: int = 64,
                   iterations: int = 5000, lr: float = 1e-3, beta: float = 1.0) -> dict[str, list[float]]:
    rng = np.random.default_rng(seed)
    depth_in, patch_in = dataset_inputs(dataset)
    curves = {
        "depth": train_vae(depth_in, vae.depth, rng, batch, iterations, lr, beta),
        "patch": train_vae(patch_in, vae.patch, rng, batch, iterations, lr, beta),
    }
    if iterations > 0:
        vae.trained = True
    else:
        log.warning("iterations = 0: VAE checkpoint holds initial weights and is marked untrained")
    return curves


def mean_loss(data: np.ndarray, branch: VaeBranch, beta: float = 1.0) -> float:
    """Full-data loss with the latent mean (no sampling noise)."""
    with no_grad():
        mu, logvar = branch.encode_stats(data)
        recon = branch.decoder(mu)
        return vae_loss(data, recon, mu, logvar, beta).item()
