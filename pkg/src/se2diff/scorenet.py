"""Conditional score networks and their training loop.

A ``ScoreModel`` joins three parts:

* a small strided convolutional encoder (channels-last, global average pool)
  producing a ``d_img`` image embedding,
* a fixed sinusoidal embedding of the 1-based denoising step index,
* a denoising MLP mapping [algebra coords of the N noisy poses, image
  embedding, time embedding] to 3N raw outputs.

The raw MLP output is divided by sigma_i, so the regression target at every
noise level is the unit-variance quantity -z/sigma rather than -z/sigma^2;
the returned values are proper score estimates.

Poses are exchanged with the model in its normalized frame: translations are
mapped by ``x_norm = x_px * trans_scale + trans_offset`` per axis (pure
scaling for fine models), angles stay radians.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .diffusion import NoiseSchedule, dsm_loss_batch, perturb_batch
from .errors import CheckpointError, NumericError
from .lie_se2 import log_map_arr

CHECKPOINT_MAGIC = b"SE2DNET1"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimization settings; the learning rate decays exponentially from
    lr_init to lr_final over ``steps``.

    ``aux_pose_weight`` > 0 adds an auxiliary regression of the clean poses
    from the image embedding.  It substitutes for a pretrained backbone: the
    DSM objective alone is slow to teach a from-scratch encoder orientation
    features, while the auxiliary head provides a direct perceptual signal.
    The score head itself still trains purely on the DSM objective.
    """

    steps: int = 20_000
    lr_init: float = 1e-4
    lr_final: float = 1e-5
    batch: int = 10
    seed: int = 0
    aux_pose_weight: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not 0 < self.lr_final <= self.lr_init:
            raise ValueError("need 0 < lr_final <= lr_init")
        if self.aux_pose_weight < 0:
            raise ValueError("aux_pose_weight must be nonnegative")

    def lr_at(self, step: int) -> float:
        if self.steps == 1:
            return self.lr_init
        frac = step / (self.steps - 1)
        return self.lr_init * (self.lr_final / self.lr_init) ** frac


def sinusoidal_table(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Positional embeddings for indices 1..length, shape (length, dim)."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    pos = np.arange(1, length + 1, dtype=np.float64)[:, None]
    k = np.arange(dim // 2, dtype=np.float64)[None, :]
    ang = pos / (10_000.0 ** (2.0 * k / dim))
    table = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return table.astype(dtype)


def fourier_features(x: np.ndarray, n_freqs: int) -> np.ndarray:
    """Append sin/cos of x at octave frequencies pi * 2^k, k = 0..n_freqs-1.

    The raw coordinates stay in front; the high-frequency pairs let a small
    MLP resolve input differences far below unit scale, which the steep
    low-noise score targets require.  Output dim = d * (1 + 2 * n_freqs).
    """
    if n_freqs == 0:
        return x
    freqs = np.pi * (2.0 ** np.arange(n_freqs))
    ang = x[..., None] * freqs  # (..., d, K)
    flat = ang.reshape(*x.shape[:-1], -1)
    return np.concatenate([x, np.sin(flat), np.cos(flat)], axis=-1)


def fourier_dim(d: int, n_freqs: int) -> int:
    return d * (1 + 2 * n_freqs)


class ScoreModel:
    """Image- and step-conditioned score network on SE(2)^N."""

    def __init__(
        self,
        n_primitives: int,
        image_hw: tuple,
        sigmas: Sequence[float],
        eps0: float,
        trans_scale: float,
        trans_offset: float = 0.0,
        kind: str = "coarse",
        channels: Sequence[int] = (16, 32, 64, 128),
        d_t: int = 64,
        hidden: Sequence[int] = (256, 256),
        coord_channels: bool = True,
        encoder_activation: str = "relu",
        mlp_activation: str = "softplus",
        roi_scale: float = 1.0,
        n_freqs: int = 8,
        dtype=np.float32,
        seed: int = 0,
    ):
        if n_primitives < 1:
            raise ValueError("n_primitives must be >= 1")
        self.n = int(n_primitives)
        self.image_hw = (int(image_hw[0]), int(image_hw[1]))
        self.kind = kind
        self.channels = tuple(int(c) for c in channels)
        self.d_img = self.channels[-1]
        self.d_t = int(d_t)
        self.hidden = tuple(int(h) for h in hidden)
        self.coord_channels = bool(coord_channels)
        self.encoder_activation = encoder_activation
        self.mlp_activation = mlp_activation
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        self.trans_scale = float(trans_scale)
        self.trans_offset = float(trans_offset)
        self.roi_scale = float(roi_scale)
        self.n_freqs = int(n_freqs)
        self.sigmas = np.asarray(sigmas, dtype=np.float64)
        if self.sigmas.ndim != 1 or self.sigmas.size < 1:
            raise ValueError("sigmas must be a nonempty 1-D sequence")
        self.eps0 = float(eps0)

        rng = np.random.default_rng(self.seed)
        act = nn.ACTIVATIONS[encoder_activation]
        c_in = 3 + (2 if self.coord_channels else 0)
        enc_layers = []
        prev = c_in
        for li, c_out in enumerate(self.channels):
            enc_layers.append(
                nn.Conv2d(prev, c_out, rng, dtype=self.dtype, skip_input_grad=(li == 0))
            )
            enc_layers.append(act())
            prev = c_out
        enc_layers.append(nn.GlobalAvgPool())
        self.encoder = nn.Sequential(enc_layers)

        mlp_act = nn.ACTIVATIONS[mlp_activation]
        d_in = fourier_dim(3 * self.n, self.n_freqs) + self.d_img + self.d_t
        mlp_layers = []
        prev = d_in
        for h in self.hidden:
            mlp_layers.append(nn.Dense(prev, h, rng, dtype=self.dtype))
            mlp_layers.append(mlp_act())
            prev = h
        mlp_layers.append(nn.Dense(prev, 3 * self.n, rng, dtype=self.dtype))
        self.mlp = nn.Sequential(mlp_layers)

        # auxiliary pose-regression head on the embedding: per primitive
        # (x, y, cos theta, sin theta); only trained when the auxiliary loss
        # is enabled, always present so checkpoints are uniform
        self.aux_head = nn.Dense(self.d_img, 4 * self.n, rng, dtype=self.dtype)
        self.aux_head.dw = np.zeros_like(self.aux_head.w)
        self.aux_head.db = np.zeros_like(self.aux_head.b)

        self.time_table = sinusoidal_table(len(self.sigmas), self.d_t, dtype=self.dtype)
        self._coords = self._coord_grid()
        self._d_pose = fourier_dim(3 * self.n, self.n_freqs)
        self._d_in = d_in

    # -- construction helpers ------------------------------------------------

    def _coord_grid(self) -> np.ndarray:
        h, w = self.image_hw
        ys = (2.0 * (np.arange(h) + 0.5) / h - 1.0).astype(self.dtype)
        xs = (2.0 * (np.arange(w) + 0.5) / w - 1.0).astype(self.dtype)
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(sigmas=tuple(self.sigmas), eps0=self.eps0)

    @property
    def L(self) -> int:
        return len(self.sigmas)

    # -- pose normalization ---------------------------------------------------

    def normalize_poses(self, poses_px: np.ndarray) -> np.ndarray:
        """Map (..., 3) poses from pixel frame into the model's normalized frame."""
        out = np.array(poses_px, dtype=np.float64)
        out[..., :2] = out[..., :2] * self.trans_scale + self.trans_offset
        return out

    def denormalize_poses(self, poses_nrm: np.ndarray) -> np.ndarray:
        out = np.array(poses_nrm, dtype=np.float64)
        out[..., :2] = (out[..., :2] - self.trans_offset) / self.trans_scale
        return out

    # -- forward / backward ---------------------------------------------------

    def prepare_images(self, images: np.ndarray) -> np.ndarray:
        """uint8 images are scaled to [-0.5, 0.5]; float images pass through.

        Appends the coordinate channels when enabled.  Accepts (H, W, 3) or
        (B, H, W, 3).
        """
        x = np.asarray(images)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:3] != self.image_hw or x.shape[3] != 3:
            raise ValueError(
                f"expected images (B, {self.image_hw[0]}, {self.image_hw[1]}, 3), got {x.shape}"
            )
        if x.dtype == np.uint8:
            x = x.astype(self.dtype) / 255.0 - 0.5
        else:
            x = x.astype(self.dtype, copy=False)
        if self.coord_channels:
            grid = np.broadcast_to(self._coords, (x.shape[0],) + self._coords.shape)
            x = np.concatenate([x, grid], axis=-1)
        return x

    def embed(self, prepared: np.ndarray) -> np.ndarray:
        """Encoder forward; input from prepare_images."""
        return self.encoder.forward(prepared)

    def time_embedding(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        if np.any(idx < 1) or np.any(idx > self.L):
            raise ValueError(f"step index outside 1..{self.L}")
        return self.time_table[idx - 1]

    def score_from_embedding(
        self, emb: np.ndarray, poses_nrm: np.ndarray, idx
    ) -> np.ndarray:
        """Score estimates (B, N, 3) from a precomputed image embedding."""
        poses_nrm = np.asarray(poses_nrm, dtype=np.float64)
        b = poses_nrm.shape[0]
        if poses_nrm.shape[1] != self.n:
            raise ValueError(f"expected {self.n} primitives, got {poses_nrm.shape[1]}")
        idx = np.broadcast_to(np.asarray(idx, dtype=np.int64), (b,))
        alg = log_map_arr(poses_nrm).reshape(b, 3 * self.n)
        pose_feats = fourier_features(alg, self.n_freqs).astype(self.dtype)
        temb = self.time_embedding(idx)
        if emb.shape[0] == 1 and b > 1:
            emb = np.broadcast_to(emb, (b, emb.shape[1]))
        feats = np.concatenate([pose_feats, emb.astype(self.dtype, copy=False), temb], axis=1)
        raw = self.mlp.forward(feats)
        sig = self.sigmas[idx - 1].astype(np.float64)
        self._last_sigma = sig
        self._last_batch = b
        return raw.astype(np.float64).reshape(b, self.n, 3) / sig[:, None, None]

    def forward_batch(self, images: np.ndarray, poses_nrm: np.ndarray, idx) -> np.ndarray:
        emb = self.embed(self.prepare_images(images))
        return self.score_from_embedding(emb, poses_nrm, idx)

    def backward(
        self,
        dscores: np.ndarray,
        through_encoder: bool = True,
        aux_dpred: np.ndarray | None = None,
    ):
        """Backpropagate a gradient w.r.t. the returned scores (and,
        optionally, w.r.t. the auxiliary pose predictions)."""
        b = dscores.shape[0]
        draw = (dscores.reshape(b, 3 * self.n) / self._last_sigma[:, None]).astype(self.dtype)
        dfeats = self.mlp.backward(draw)
        if through_encoder:
            demb = dfeats[:, self._d_pose : self._d_pose + self.d_img].copy()
            if aux_dpred is not None:
                demb += self.aux_head.backward(aux_dpred.astype(self.dtype))
            self.encoder.backward(demb)

    # -- auxiliary pose regression ---------------------------------------------

    def aux_predict(self, emb: np.ndarray) -> np.ndarray:
        """(B, 4N) auxiliary predictions [x, y, cos theta, sin theta] per primitive."""
        return self.aux_head.forward(emb)

    def aux_targets(self, poses_nrm: np.ndarray) -> np.ndarray:
        poses_nrm = np.asarray(poses_nrm, dtype=np.float64)
        b = poses_nrm.shape[0]
        out = np.concatenate(
            [
                poses_nrm[..., 0:1],
                poses_nrm[..., 1:2],
                np.cos(poses_nrm[..., 2:3]),
                np.sin(poses_nrm[..., 2:3]),
            ],
            axis=-1,
        )
        return out.reshape(b, 4 * self.n).astype(self.dtype)

    # -- parameter access -----------------------------------------------------

    def params(self) -> dict:
        out = self.encoder.params("enc")
        out.update(self.mlp.params("mlp"))
        for name, p in self.aux_head.params().items():
            out[f"aux.{name}"] = p
        return out

    def grads(self) -> dict:
        out = self.encoder.grads("enc")
        out.update(self.mlp.grads("mlp"))
        for name, g in self.aux_head.grads().items():
            out[f"aux.{name}"] = g
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def astype(self, dtype) -> "ScoreModel":
        """Copy of this model with parameters cast to ``dtype``."""
        other = ScoreModel(
            n_primitives=self.n,
            image_hw=self.image_hw,
            sigmas=self.sigmas,
            eps0=self.eps0,
            trans_scale=self.trans_scale,
            trans_offset=self.trans_offset,
            kind=self.kind,
            channels=self.channels,
            d_t=self.d_t,
            hidden=self.hidden,
            coord_channels=self.coord_channels,
            encoder_activation=self.encoder_activation,
            mlp_activation=self.mlp_activation,
            roi_scale=self.roi_scale,
            n_freqs=self.n_freqs,
            dtype=dtype,
            seed=self.seed,
        )
        src = self.params()
        for key, p in other.params().items():
            p[...] = src[key].astype(dtype)
        return other

    # -- sampling hook ---------------------------------------------------------

    def make_score_fn(self, images: np.ndarray) -> Callable[[np.ndarray, int], np.ndarray]:
        """Batched score function with the image embedding computed once.

        ``images`` is (B, H, W, 3); the returned function maps ((B, N, 3)
        normalized poses, step index) to (B, N, 3) scores.
        """
        emb = self.embed(self.prepare_images(images))

        def fn(poses_nrm: np.ndarray, i: int) -> np.ndarray:
            return self.score_from_embedding(emb, poses_nrm, int(i))

        return fn


# ---------------------------------------------------------------------------
# Spec-level single-sample forward
# ---------------------------------------------------------------------------


def forward(model: ScoreModel, image: np.ndarray, poses, i: int):
    """Score estimate for one image and one pose tuple (normalized frame)."""
    from .diffusion import PoseTuple, ScoreEstimate

    if isinstance(poses, PoseTuple):
        arr = poses.as_array()
    else:
        arr = np.asarray(poses, dtype=np.float64)
    scores = model.forward_batch(np.asarray(image)[None], arr[None], int(i))
    return ScoreEstimate.from_array(scores[0])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train(
    model: ScoreModel,
    batch_fn: Callable[[np.random.Generator, int], tuple],
    cfg: TrainConfig,
    callback: Callable[[int, float], None] | None = None,
) -> list:
    """Denoising-score-matching training; returns the per-step loss trace.

    ``batch_fn(rng, n)`` must yield (images, poses) with images (n, H, W, 3)
    and poses (n, N, 3) already in the model's normalized frame.  Per step a
    noise level i ~ Uniform{1..L} is drawn per sample, poses are perturbed by
    the group-Gaussian kernel, and the model regresses the surrogate scores
    under the sigma^2-weighted loss.
    """
    rng = np.random.default_rng(cfg.seed)
    adam = nn.Adam()
    params = model.params()
    trace = []
    for step in range(cfg.steps):
        images, poses = batch_fn(rng, cfg.batch)
        idx = rng.integers(1, model.L + 1, size=poses.shape[0])
        sig = model.sigmas[idx - 1]
        perturbed, targets = perturb_batch(poses, sig, rng)
        emb = model.embed(model.prepare_images(images))
        scores = model.score_from_embedding(emb, perturbed, idx)
        loss = dsm_loss_batch(scores, targets, sig)
        total = loss
        aux_dpred = None
        if cfg.aux_pose_weight > 0:
            aux_pred = model.aux_predict(emb)
            aux_diff = aux_pred - model.aux_targets(poses)
            total = loss + cfg.aux_pose_weight * float(np.mean(aux_diff**2))
            aux_dpred = (2.0 * cfg.aux_pose_weight / aux_diff.size) * aux_diff
        if not np.isfinite(total):
            raise NumericError(
                f"non-finite training loss at step {step} (lr={cfg.lr_at(step):.3g}); "
                f"last finite losses: {trace[-5:]}"
            )
        dscores = (scores - targets) * (sig**2)[:, None, None] / poses.shape[0]
        model.backward(dscores, aux_dpred=aux_dpred)
        adam.step(params, model.grads(), cfg.lr_at(step))
        trace.append(float(loss))
        if callback is not None:
            callback(step, float(loss))
    return trace


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def gradient_check(
    model: ScoreModel,
    images: np.ndarray,
    poses_nrm: np.ndarray,
    targets: np.ndarray,
    idx: np.ndarray,
    n_params: int = 200,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The model must be float64; float32 arithmetic cannot support h = 1e-5
    differences.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient_check requires a float64 model")
    sig = model.sigmas[np.asarray(idx) - 1]

    def loss_fn() -> float:
        scores = model.forward_batch(images, poses_nrm, idx)
        return dsm_loss_batch(scores, targets, sig)

    scores = model.forward_batch(images, poses_nrm, idx)
    dscores = (scores - targets) * (sig**2)[:, None, None] / poses_nrm.shape[0]
    model.backward(dscores)
    analytic = {k: g.copy() for k, g in model.grads().items()}

    params = model.params()
    rng = np.random.default_rng(seed)
    names = sorted(params)
    total = sum(params[k].size for k in names)
    picks = []
    for name in names:
        share = max(3, int(round(n_params * params[name].size / total)))
        share = min(share, params[name].size)
        flat = rng.choice(params[name].size, size=share, replace=False)
        picks.extend((name, int(f)) for f in flat)

    max_rel = 0.0
    for name, flat in picks:
        p = params[name].reshape(-1)
        orig = p[flat]
        p[flat] = orig + h
        lp = loss_fn()
        p[flat] = orig - h
        lm = loss_fn()
        p[flat] = orig
        fd = (lp - lm) / (2 * h)
        ana = analytic[name].reshape(-1)[flat]
        rel = abs(ana - fd) / max(abs(ana), abs(fd), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel


def make_tiny_model(
    n_primitives: int = 2,
    image_hw: tuple = (16, 16),
    dtype=np.float64,
    coord_channels: bool = True,
    encoder_activation: str = "relu",
    mlp_activation: str = "softplus",
    seed: int = 0,
) -> ScoreModel:
    """Small variant (d_img = 8, hidden [8, 8]) for gradient checking."""
    return ScoreModel(
        n_primitives=n_primitives,
        image_hw=image_hw,
        sigmas=np.geomspace(0.01, 1.0, 10),
        eps0=0.1,
        trans_scale=1.0,
        kind="tiny",
        channels=(1, 2, 4, 8),
        d_t=8,
        hidden=(8, 8),
        coord_channels=coord_channels,
        encoder_activation=encoder_activation,
        mlp_activation=mlp_activation,
        n_freqs=4,
        dtype=dtype,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Checkpoint format:
#   [8-byte magic][u32 little-endian header length][UTF-8 JSON header]
#   [tensor payload: named float32 little-endian arrays, header order]
#   [u32 little-endian CRC32 of everything before it]
# ---------------------------------------------------------------------------


def save(model: ScoreModel, path) -> None:
    """Write a self-describing checkpoint (float32 tensors, CRC-protected)."""
    params = model.params()
    names = sorted(params)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "n_primitives": model.n,
        "image_hw": list(model.image_hw),
        "channels": list(model.channels),
        "d_t": model.d_t,
        "hidden": list(model.hidden),
        "coord_channels": model.coord_channels,
        "encoder_activation": model.encoder_activation,
        "mlp_activation": model.mlp_activation,
        "trans_scale": model.trans_scale,
        "trans_offset": model.trans_offset,
        "roi_scale": model.roi_scale,
        "n_freqs": model.n_freqs,
        "sigmas": [float(s) for s in model.sigmas],
        "eps0": model.eps0,
        "seed": model.seed,
        "tensors": [{"name": k, "shape": list(params[k].shape)} for k in names],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += np.uint32(len(head)).tobytes()
    blob += head
    for k in names:
        blob += np.ascontiguousarray(params[k], dtype="<f4").tobytes()
    blob += np.uint32(zlib.crc32(bytes(blob))).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load(path, expect_n: int | None = None) -> ScoreModel:
    """Load a checkpoint; verifies checksum, version, and optionally N."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a score-model checkpoint")
    stored_crc = int(np.frombuffer(blob[-4:], dtype="<u4")[0])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted file)")
    head_len = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
    header = json.loads(blob[12 : 12 + head_len].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header['format_version']} unsupported"
        )
    if expect_n is not None and header["n_primitives"] != expect_n:
        raise CheckpointError(
            f"{path}: checkpoint has N={header['n_primitives']}, expected N={expect_n}"
        )
    model = ScoreModel(
        n_primitives=header["n_primitives"],
        image_hw=tuple(header["image_hw"]),
        sigmas=np.asarray(header["sigmas"]),
        eps0=header["eps0"],
        trans_scale=header["trans_scale"],
        trans_offset=header["trans_offset"],
        kind=header["kind"],
        channels=tuple(header["channels"]),
        d_t=header["d_t"],
        hidden=tuple(header["hidden"]),
        coord_channels=header["coord_channels"],
        encoder_activation=header["encoder_activation"],
        mlp_activation=header["mlp_activation"],
        roi_scale=header["roi_scale"],
        n_freqs=header["n_freqs"],
        dtype=np.float32,
        seed=header["seed"],
    )
    params = model.params()
    offset = 12 + head_len
    for spec in header["tensors"]:
        name = spec["name"]
        shape = tuple(spec["shape"])
        if name not in params or params[name].shape != shape:
            raise CheckpointError(f"{path}: unexpected tensor {name} {shape}")
        nbytes = int(np.prod(shape)) * 4
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f4").reshape(shape)
        params[name][...] = arr
        offset += nbytes
    if offset != len(blob) - 4:
        raise CheckpointError(f"{path}: payload size mismatch")
    return model
