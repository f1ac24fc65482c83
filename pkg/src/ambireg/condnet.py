"""Conditioning network: joint embedding of a volume and a projection.

Two convolutional branches (3-d for the volume, 2-d for the image), each a
stack of conv -> batchnorm -> dropout -> relu blocks closed by global average
pooling, are concatenated and mapped to the condition vector by one dense
layer.  Both branches see normalized coordinate channels next to the
intensities so that pooled features can still encode *where* something is.

Within a training batch, the volume branch runs once per distinct volume and
its features are gathered per sample (``vol_index``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .drr import Image2D, augment_array
from .errors import NumericError, ParameterError
from .nn import AdamState, BatchNorm, Conv, Dense, Dropout, Flatten, GlobalAvgPool, ReLU, Sequential, adam_step
from .nn.optim import lr_schedule
from .geometry import LAO_SCALE, canonicalize_vectors
from .phantom import Volume, resample, rot180

log = logging.getLogger(__name__)

POSE_DIM = 5


@dataclass(frozen=True)
class CondNetConfig:
    volume_input_dims: tuple[int, int, int] = (32, 64, 32)
    image_input_dims: tuple[int, int] = (64, 64)
    blocks: int = 3
    volume_channels: tuple[int, ...] = (8, 16, 16)
    image_channels: tuple[int, ...] = (16, 32, 32)
    cond_dim: int = 64
    dropout_rate: float = 0.1
    head_hidden: int = 64
    # image branch output: "flatten" keeps the spatial layout (where the
    # marker sits decides lao), "mean" is global average pooling
    image_readout: str = "flatten"

    def validate(self):
        if self.cond_dim < POSE_DIM:
            raise ParameterError("cond_dim must be at least the pose dimension (5)")
        if len(self.volume_channels) != self.blocks or len(self.image_channels) != self.blocks:
            raise ParameterError("one channel count per block is required")
        if self.image_readout not in ("flatten", "mean"):
            raise ParameterError(f"image_readout must be 'flatten' or 'mean', got {self.image_readout!r}")
        for d in tuple(self.volume_input_dims) + tuple(self.image_input_dims):
            if d % (2**self.blocks):
                raise ParameterError(f"input dims must be divisible by 2**blocks, got {d}")


def _coords(shape):
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _branch(ndim, c_in, channels, rate, rng, readout="mean"):
    layers, names = [], []
    for i, c in enumerate(channels):
        layers += [Conv(ndim, c_in, c, rng=rng), BatchNorm(c), Dropout(rate), ReLU()]
        names += [f"conv{i}", f"bn{i}", f"drop{i}", f"relu{i}"]
        c_in = c
    layers.append(Flatten() if readout == "flatten" else GlobalAvgPool())
    names.append(readout)
    return Sequential(layers, names)


def prepare_volume(v: Volume, cfg: CondNetConfig) -> np.ndarray:
    if tuple(v.dims) == tuple(cfg.volume_input_dims):
        return v.data.astype(np.float64)
    return np.clip(resample(v, cfg.volume_input_dims), 0.0, 1.0)


def prepare_image(img: Image2D, cfg: CondNetConfig) -> np.ndarray:
    arr = img.data.astype(np.float64)
    h, w = cfg.image_input_dims[1], cfg.image_input_dims[0]
    if arr.shape != (h, w):
        from scipy.ndimage import zoom

        arr = zoom(arr, (h / arr.shape[0], w / arr.shape[1]), order=1)
        if arr.shape != (h, w):
            raise ParameterError(f"cannot resample image {img.dims} to {cfg.image_input_dims}")
    return np.clip(arr, 0.0, 1.0)


class CondNet:
    def __init__(self, cfg: CondNetConfig, rng):
        cfg.validate()
        self.cfg = cfg
        self.vol_branch = _branch(3, 4, cfg.volume_channels, cfg.dropout_rate, rng)
        self.img_branch = _branch(2, 3, cfg.image_channels, cfg.dropout_rate, rng, cfg.image_readout)
        self.fuse = Dense(cfg.volume_channels[-1] + self.image_features(), cfg.cond_dim, rng)
        # regression head is only used for stage-1 pretraining
        self.head = Sequential(
            [Dense(cfg.cond_dim, cfg.head_hidden, rng), ReLU(), Dense(cfg.head_hidden, POSE_DIM, zero=True)],
            ["fc0", "relu", "fc1"],
        )
        self._vol_coords = _coords(cfg.volume_input_dims)
        self._img_coords = _coords((cfg.image_input_dims[1], cfg.image_input_dims[0]))

    def image_features(self) -> int:
        c = self.cfg.image_channels[-1]
        if self.cfg.image_readout == "mean":
            return c
        w, h = self.cfg.image_input_dims
        return c * (w >> self.cfg.blocks) * (h >> self.cfg.blocks)

    # -- parameter plumbing -------------------------------------------------
    def trunk_modules(self):
        return {"vol": self.vol_branch, "img": self.img_branch, "fuse": self.fuse}

    def named_params(self, include_head=False):
        mods = dict(self.trunk_modules())
        if include_head:
            mods["head"] = self.head
        for prefix, mod in mods.items():
            yield from mod.named_params(prefix + ".")

    def named_grads(self, include_head=False):
        mods = dict(self.trunk_modules())
        if include_head:
            mods["head"] = self.head
        for prefix, mod in mods.items():
            yield from mod.named_grads(prefix + ".")

    def named_buffers(self):
        for prefix, mod in self.trunk_modules().items():
            yield from mod.named_buffers(prefix + ".")

    def set_rng(self, rng):
        self.vol_branch.set_rng(rng)
        self.img_branch.set_rng(rng)

    # -- forward / backward -------------------------------------------------
    def _inputs(self, vols, imgs):
        vols = np.asarray(vols, dtype=np.float64)
        imgs = np.asarray(imgs, dtype=np.float64)
        vshape = tuple(self.cfg.volume_input_dims)
        ishape = (self.cfg.image_input_dims[1], self.cfg.image_input_dims[0])
        if vols.shape[1:] != vshape:
            raise ParameterError(f"volume input must be {vshape}, got {vols.shape[1:]}")
        if imgs.shape[1:] != ishape:
            raise ParameterError(f"image input must be {ishape}, got {imgs.shape[1:]}")
        vc = np.broadcast_to(self._vol_coords, (len(vols),) + self._vol_coords.shape)
        ic = np.broadcast_to(self._img_coords, (len(imgs),) + self._img_coords.shape)
        return (
            np.concatenate([vols[..., None], vc], axis=-1),
            np.concatenate([imgs[..., None], ic], axis=-1),
        )

    def forward(self, vols, vol_index, imgs, train=False):
        """Condition vectors for a batch.

        ``vols`` holds the distinct volumes (m, *volume_input_dims),
        ``vol_index`` maps each of the n images to a row of ``vols``.
        """
        vin, iin = self._inputs(vols, imgs)
        vol_index = np.asarray(vol_index, dtype=np.int64)
        fv = self.vol_branch.forward(vin, train)
        fi = self.img_branch.forward(iin, train)
        self._vol_index = vol_index
        self._n_vol = len(fv)
        self._split = fv.shape[1]
        feats = np.concatenate([fv[vol_index], fi], axis=1)
        return self.fuse.forward(feats, train)

    def backward(self, dcond):
        dfeat = self.fuse.backward(dcond)
        dv = np.zeros((self._n_vol, self._split))
        np.add.at(dv, self._vol_index, dfeat[:, : self._split])
        self.vol_branch.backward(dv)
        self.img_branch.backward(dfeat[:, self._split :])

    def embed(self, volume: Volume, image: Image2D, train=False) -> np.ndarray:
        vol = prepare_volume(volume, self.cfg)[None]
        img = prepare_image(image, self.cfg)[None]
        return self.forward(vol, [0], img, train)[0]

    def predict_pose(self, vols, vol_index, imgs):
        return self.head.forward(self.forward(vols, vol_index, imgs, False), False)


@dataclass
class PoseDataset:
    """In-memory training set.

    ``volumes`` (m, *volume_input_dims) are the prepared distinct volumes;
    every sample i pairs ``images[i]`` with ``volumes[vol_index[i]]`` and the
    normalized pose vector ``targets[i]``.
    """

    volumes: np.ndarray
    vol_index: np.ndarray
    images: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.images)

    def batches(self, batch_size, rng):
        order = rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield order[start : start + batch_size]

    def augmented_batch(self, idx, rng, augment=True, half_turn=False):
        """Distinct volumes, remapped index, images and targets for ``idx``.

        With ``half_turn`` each sample is, with probability 1/2, replaced by
        the half-turned volume (180 deg about the longitudinal axis) and the
        pose with lao + 180.  That pair projects to exactly the same image,
        so the label stays correct; for a symmetric phantom it shows the
        network both answers for one image.
        """
        idx = np.asarray(idx)
        targets = self.targets[idx]
        keys = self.vol_index[idx] * 2
        if half_turn:
            turn = rng.random(len(idx)) < 0.5
            keys = keys + turn
            targets = np.where(turn[:, None], half_turn_targets(targets), targets)
        used, remap = np.unique(keys, return_inverse=True)
        vols = np.stack([rot180(self.volumes[k // 2]) if k % 2 else self.volumes[k // 2] for k in used])
        imgs = self.images[idx]
        if augment:
            vols = np.stack([augment_array(v, rng) for v in vols])
            imgs = np.stack([augment_array(im, rng) for im in imgs])
        return vols, remap, imgs, targets


def half_turn_targets(targets):
    """Pose vectors with 180 deg added to lao, re-canonicalized."""
    t = np.array(targets, dtype=np.float64)
    t[:, 3] += 180.0 / LAO_SCALE
    return canonicalize_vectors(t)


def mse_loss(pred, target):
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def pretrain(net: CondNet, data: PoseDataset, epochs: int, batch_size=32, lr=0.01,
             weight_decay=1e-5, seed=0, augment=True, state: AdamState | None = None,
             start_epoch=0, history=None, on_epoch=None, decay_every=100, decay_factor=0.1,
             half_turn=False):
    """Stage 1: regress normalized pose vectors with an MSE loss.

    Returns ``(history, state)`` where history holds one dict per epoch.
    ``on_epoch(epoch, history, state)`` is called after every epoch (used for
    checkpointing).
    """
    state = state or AdamState(lr=lr, weight_decay=weight_decay)
    history = list(history or [])
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng([seed, 1, epoch])
        net.set_rng(rng)
        state.lr = lr_schedule(epoch, lr, decay_every, decay_factor)
        losses = []
        for idx in data.batches(batch_size, rng):
            vols, remap, imgs, tgt = data.augmented_batch(idx, rng, augment, half_turn)
            cond = net.forward(vols, remap, imgs, train=True)
            pred = net.head.forward(cond, train=True)
            loss, dpred = mse_loss(pred, tgt)
            if not np.isfinite(loss):
                raise NumericError(f"stage-1 loss is {loss} at epoch {epoch} on samples {idx.tolist()}")
            net.backward(net.head.backward(dpred))
            params = dict(net.named_params(include_head=True))
            grads = dict(net.named_grads(include_head=True))
            adam_step(state, params, grads)
            losses.append(loss)
        history.append({"epoch": epoch, "lr": state.lr, "train_mse": float(np.mean(losses))})
        log.info("stage1 epoch %d mse %.5f", epoch, history[-1]["train_mse"])
        if on_epoch is not None:
            on_epoch(epoch, history, state)
    return history, state
