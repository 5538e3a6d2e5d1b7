"""Loss stack, optimizer, and the adversarial training loop.

The generator pair learns to produce a high-angular-resolution anisotropy
map from a 7-channel input and to cycle it back to a summary of the input;
discriminators push both outputs toward the clean training distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dti import compute_fa_map
from .errors import ConfigError, NonFiniteError, ShapeError, UdadError
from .nets import Discriminator, Generator, _SeedStream, load_network, save_network
from .volume import DwiStack, FaMap, subsample

ACTIVATION_MODES = ("sigmoid", "relu", "none")
GB_OUTPUT_MODES = ("b0_plus_mean_dwi", "b0_plus_6dwis")


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 50.0
    alpha2: float = 10.0
    alpha3: float = 1.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0 or self.alpha3 < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    activation_mode: str = "sigmoid"
    gb_output_mode: str = "b0_plus_mean_dwi"
    weights: LossWeights = field(default_factory=LossWeights)
    adv_weight: float = 1.0
    depth: int = 3
    base_width: int = 8
    signal_scale: float = 1000.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.activation_mode not in ACTIVATION_MODES:
            raise ConfigError(
                f"activation_mode must be one of {ACTIVATION_MODES}, "
                f"got {self.activation_mode!r}"
            )
        if self.gb_output_mode not in GB_OUTPUT_MODES:
            raise ConfigError(
                f"gb_output_mode must be one of {GB_OUTPUT_MODES}, "
                f"got {self.gb_output_mode!r}"
            )
        if not self.signal_scale > 0:
            raise ConfigError("signal_scale must be positive")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "seed": self.seed,
            "activation_mode": self.activation_mode,
            "gb_output_mode": self.gb_output_mode,
            "alpha1": self.weights.alpha1,
            "alpha2": self.weights.alpha2,
            "alpha3": self.weights.alpha3,
            "adv_weight": self.adv_weight,
            "depth": self.depth,
            "base_width": self.base_width,
            "signal_scale": self.signal_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        weights = LossWeights(
            d.get("alpha1", 50.0), d.get("alpha2", 10.0), d.get("alpha3", 1.0)
        )
        kwargs = {
            k: d[k]
            for k in (
                "epochs", "batch_size", "lr", "seed", "activation_mode",
                "gb_output_mode", "adv_weight", "depth", "base_width",
                "signal_scale",
            )
            if k in d
        }
        return cls(weights=weights, **kwargs)


@dataclass(frozen=True)
class TrainStats:
    """Loss history plus the score-normalization statistics."""

    mu_train: float
    sigma_train: float
    epoch_means: dict
    activation_mode: str = "sigmoid"
    gb_output_mode: str = "b0_plus_mean_dwi"
    signal_scale: float = 1000.0
    n_train: int = 0
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.mu_train) or not np.isfinite(self.sigma_train):
            raise ConfigError("non-finite training statistics")
        if not self.sigma_train > 0:
            raise ConfigError(
                "sigma_train must be positive; training samples produced "
                "degenerate reconstruction losses"
            )


class TrainSample(NamedTuple):
    x: DwiStack  # network input stack, 1 b0 + k DWIs
    fa_star: FaMap  # reference map from all available channels


def prepare_sample(full_stack: DwiStack, k: int = 6, subsample_seed: int = 0):
    """Reference map from every channel, input stack from a k-DWI draw."""
    fa_star = compute_fa_map(full_stack)
    x = subsample(full_stack, k, seed=subsample_seed)
    return TrainSample(x, fa_star)


def _apply_activation(t: Tensor, mode: str) -> Tensor:
    if mode == "sigmoid":
        return ad.sigmoid(t)
    if mode == "relu":
        return ad.relu(t)
    if mode == "none":
        return t
    raise ConfigError(f"unknown activation mode {mode!r}")


def _as_batched(arr: np.ndarray) -> np.ndarray:
    """Promote (W,H,D) or (C,W,H,D) to (N,C,W,H,D)."""
    if arr.ndim == 3:
        return arr[None, None]
    if arr.ndim == 4:
        return arr[None]
    if arr.ndim == 5:
        return arr
    raise ShapeError(f"expected 3D, 4D, or 5D array, got shape {arr.shape}")


def loss_con1(pred_logits, fa_star, mask=None, activation_mode: str = "sigmoid"):
    """Masked mean absolute difference between activation(pred) and the target."""
    pred = ad.as_tensor(pred_logits)
    if isinstance(fa_star, FaMap):
        target = _as_batched(fa_star.data)
        if mask is None:
            mask = fa_star.mask
    else:
        target = _as_batched(np.asarray(fa_star))
    if mask is None:
        mask = np.ones(target.shape, bool)
    mask = _as_batched(np.asarray(mask, bool))
    target = np.broadcast_to(target, pred.shape)
    mask = np.broadcast_to(mask, pred.shape)
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("empty mask in reconstruction loss")
    act = _apply_activation(pred, activation_mode)
    diff = ad.abs_(act - Tensor(target.astype(pred.data.dtype)))
    masked = ad.mul(diff, Tensor(mask.astype(pred.data.dtype)))
    return ad.scale(ad.sum_all(masked), 1.0 / count)


def _con2_targets(x, gb_output_mode: str, signal_scale: float = 1.0):
    """Target channels for the cycle loss, as an (N,C,W,H,D) array."""
    if isinstance(x, DwiStack):
        b0 = x.data[x.scheme.b0_indices[0]][None]
        dwis = x.data[x.scheme.dwi_indices]
    else:
        arr = _as_batched(np.asarray(x))
        if arr.shape[0] != 1:
            # batched array: channel 0 is b0 by the 7-channel input convention
            b0 = arr[:, 0:1]
            dwis = arr[:, 1:]
            return _assemble_targets(b0, dwis, gb_output_mode)
        b0 = arr[0, 0:1]
        dwis = arr[0, 1:]
    b0 = np.asarray(b0, np.float64) / signal_scale
    dwis = np.asarray(dwis, np.float64) / signal_scale
    return _assemble_targets(b0[None], dwis[None], gb_output_mode)


def _assemble_targets(b0, dwis, gb_output_mode):
    if gb_output_mode == "b0_plus_mean_dwi":
        mean = dwis.mean(axis=1, keepdims=True, dtype=np.float64)
        return np.concatenate([b0, mean], axis=1)
    if gb_output_mode == "b0_plus_6dwis":
        return np.concatenate([b0, dwis], axis=1)
    raise ConfigError(f"unknown gb_output_mode {gb_output_mode!r}")


def loss_con2(pred, x, gb_output_mode: str = "b0_plus_mean_dwi", mask=None,
              signal_scale: float = 1.0):
    """Sum over target channels of the masked RMS reconstruction error."""
    pred_t = ad.as_tensor(pred)
    pred5 = pred_t if pred_t.data.ndim == 5 else ad.as_tensor(
        _as_batched(pred_t.data)
    )
    targets = _con2_targets(x, gb_output_mode, signal_scale)
    if pred5.shape[1] != targets.shape[1]:
        raise ShapeError(
            f"{pred5.shape[1]} predicted channels but mode {gb_output_mode!r} "
            f"implies {targets.shape[1]}"
        )
    if pred5.shape != targets.shape:
        raise ShapeError(
            f"prediction shape {pred5.shape} vs target shape {targets.shape}"
        )
    if mask is None:
        mask = np.ones(targets.shape[:1] + (1,) + targets.shape[2:], bool)
    else:
        mask = _as_batched(np.asarray(mask, bool))
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("empty mask in cycle loss")

    dtype = pred5.data.dtype
    mask_t = Tensor(mask.astype(dtype))
    total = None
    for ch in range(targets.shape[1]):
        pch = ad.slice_channels(pred5, ch, ch + 1)
        tch = Tensor(targets[:, ch : ch + 1].astype(dtype))
        sq = ad.mul(ad.square(pch - tch), mask_t)
        term = ad.sqrt(ad.scale(ad.sum_all(sq), 1.0 / count))
        total = term if total is None else total + term
    return total


def loss_enc(feats_a, feats_b):
    """Mean over encoder levels of the RMS feature distance."""
    if len(feats_a) != len(feats_b):
        raise ShapeError(
            f"encoder depth mismatch: {len(feats_a)} vs {len(feats_b)} levels"
        )
    if not feats_a:
        raise ShapeError("no encoder levels to compare")
    total = None
    for i, (a, b) in enumerate(zip(feats_a, feats_b)):
        a, b = ad.as_tensor(a), ad.as_tensor(b)
        if a.shape != b.shape:
            raise ShapeError(f"level {i} feature shapes differ: {a.shape} vs {b.shape}")
        term = ad.sqrt(ad.mean_all(ad.square(a - b)))
        total = term if total is None else total + term
    return ad.scale(total, 1.0 / len(feats_a))


def _lsq(t, target: float):
    shifted = t - target if target else t
    return ad.mean_all(ad.square(shifted))


def d_loss_a(d_real, d_fake):
    """Least-squares discriminator loss: real toward 1, fake toward 0."""
    return _lsq(ad.as_tensor(d_real), 1.0) + _lsq(ad.as_tensor(d_fake), 0.0)


def d_loss_b(d_real, d_fake):
    return _lsq(ad.as_tensor(d_real), 1.0) + _lsq(ad.as_tensor(d_fake), 0.0)


def g_adv(d_fake_a, d_fake_b):
    """Generator adversarial term: push both discriminators' fakes toward 1."""
    return _lsq(ad.as_tensor(d_fake_a), 1.0) + _lsq(ad.as_tensor(d_fake_b), 1.0)


def loss_gen(terms, weights: LossWeights):
    """Weighted sum alpha1*con1 + alpha2*con2 + alpha3*enc."""
    c1, c2, enc = (ad.as_tensor(t) for t in terms)
    return (
        ad.scale(c1, weights.alpha1)
        + ad.scale(c2, weights.alpha2)
        + ad.scale(enc, weights.alpha3)
    )


class Adam:
    """Standard Adam with bias correction; float64 moment buffers."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(p.data.shape, np.float64) for p in self.params]
        self.v = [np.zeros(p.data.shape, np.float64) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = np.asarray(p.grad, np.float64)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter block {i}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            update = self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


def _batch_arrays(samples, signal_scale):
    x = np.stack([s.x.data for s in samples]).astype(np.float32) / signal_scale
    fa = np.stack([s.fa_star.data[None] for s in samples]).astype(np.float32)
    mask = np.stack([s.fa_star.mask[None] for s in samples])
    return x, fa, mask


def build_networks(cfg: TrainConfig, in_ch: int):
    """The four networks with seeds split deterministically from cfg.seed."""
    stream = _SeedStream(cfg.seed)
    seeds = [stream.next_rng().integers(2**63) for _ in range(5)]
    gb_out = 2 if cfg.gb_output_mode == "b0_plus_mean_dwi" else in_ch
    nets = {
        "g_a": Generator(in_ch, 1, cfg.depth, cfg.base_width, int(seeds[0])),
        "g_b": Generator(1, gb_out, cfg.depth, cfg.base_width, int(seeds[1])),
        "d_a": Discriminator(1, cfg.depth, cfg.base_width, int(seeds[2])),
        "d_b": Discriminator(gb_out, cfg.depth, cfg.base_width, int(seeds[3])),
    }
    return nets, int(seeds[4])


def sample_losses(nets, samples, cfg: TrainConfig):
    """Per-sample reconstruction losses under the current generator."""
    out = []
    for s in samples:
        x, fa, mask = _batch_arrays([s], cfg.signal_scale)
        logits, _ = nets["g_a"].forward(Tensor(x))
        l = loss_con1(logits, fa, mask=mask, activation_mode=cfg.activation_mode)
        out.append(float(l.data))
    return out


def train(dataset, cfg: TrainConfig):
    """Adversarial training on artifact-free samples.

    Per batch: one generator forward chain; discriminators update first on
    detached fakes; the generator pair then updates against the refreshed
    discriminators. Returns ({g_a, g_b, d_a, d_b}, TrainStats).
    """
    if len(dataset) < 2:
        raise ConfigError("training needs at least 2 samples")
    in_ch = dataset[0].x.n_channels
    for s in dataset:
        if s.x.n_channels != in_ch:
            raise ShapeError("inconsistent channel counts across training samples")

    nets, shuffle_seed = build_networks(cfg, in_ch)
    g_a, g_b, d_a, d_b = nets["g_a"], nets["g_b"], nets["d_a"], nets["d_b"]
    opt_g = Adam(g_a.parameters() + g_b.parameters(), lr=cfg.lr)
    opt_da = Adam(d_a.parameters(), lr=cfg.lr)
    opt_db = Adam(d_b.parameters(), lr=cfg.lr)
    shuffle_rng = np.random.default_rng(shuffle_seed)

    keys = ("l_con1", "l_con2", "l_enc", "g_adv", "d_a", "d_b")
    epoch_means = {k: [] for k in keys}
    n = len(dataset)

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        sums = dict.fromkeys(keys, 0.0)
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            try:
                vals = _train_batch(
                    batch, cfg, g_a, g_b, d_a, d_b, opt_g, opt_da, opt_db
                )
            except NonFiniteError as exc:
                raise UdadError(
                    f"training diverged at epoch {epoch} batch {n_batches}: {exc}"
                ) from exc
            for k in keys:
                sums[k] += vals[k]
            n_batches += 1
        for k in keys:
            epoch_means[k].append(sums[k] / n_batches)

    l_values = sample_losses(nets, dataset, cfg)
    mu = float(np.mean(l_values))
    sigma = float(np.std(l_values))
    stats = TrainStats(
        mu_train=mu,
        sigma_train=sigma,
        epoch_means=epoch_means,
        activation_mode=cfg.activation_mode,
        gb_output_mode=cfg.gb_output_mode,
        signal_scale=cfg.signal_scale,
        n_train=n,
        seed=cfg.seed,
    )
    return nets, stats


def _train_batch(batch, cfg, g_a, g_b, d_a, d_b, opt_g, opt_da, opt_db):
    x, fa_t, mask = _batch_arrays(batch, cfg.signal_scale)
    x_in = Tensor(x)
    logits, feats_a = g_a.forward(x_in)
    fa_hat = _apply_activation(logits, cfg.activation_mode)
    x_hat, feats_b = g_b.forward(fa_hat)

    real_pair = _con2_targets(x, cfg.gb_output_mode).astype(np.float32)

    # discriminators first, on detached fakes
    d_a.zero_grad()
    la = d_loss_a(d_a.forward(Tensor(fa_t)), d_a.forward(fa_hat.detach()))
    la.backward()
    opt_da.step()

    d_b.zero_grad()
    lb = d_loss_b(d_b.forward(Tensor(real_pair)), d_b.forward(x_hat.detach()))
    lb.backward()
    opt_db.step()

    # generator pair against the refreshed discriminators
    c1 = loss_con1(logits, fa_t, mask=mask, activation_mode=cfg.activation_mode)
    c2 = loss_con2(x_hat, x, cfg.gb_output_mode, mask=mask)
    enc = loss_enc(feats_a, feats_b)
    adv = g_adv(d_a.forward(fa_hat), d_b.forward(x_hat))
    total = loss_gen((c1, c2, enc), cfg.weights) + ad.scale(adv, cfg.adv_weight)

    g_a.zero_grad()
    g_b.zero_grad()
    d_a.zero_grad()
    d_b.zero_grad()
    total.backward()
    opt_g.step()

    return {
        "l_con1": float(c1.data),
        "l_con2": float(c2.data),
        "l_enc": float(enc.data),
        "g_adv": float(adv.data),
        "d_a": float(la.data),
        "d_b": float(lb.data),
    }


STATS_SCHEMA = "udad-stats/1"


def save_stats(stats: TrainStats, path) -> None:
    doc = {
        "schema": STATS_SCHEMA,
        "mu_train": stats.mu_train,
        "sigma_train": stats.sigma_train,
        "epoch_means": stats.epoch_means,
        "activation_mode": stats.activation_mode,
        "gb_output_mode": stats.gb_output_mode,
        "signal_scale": stats.signal_scale,
        "n_train": stats.n_train,
        "seed": stats.seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_stats(path) -> TrainStats:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != STATS_SCHEMA:
        raise ConfigError(f"{path}: unknown stats schema {doc.get('schema')!r}")
    return TrainStats(
        mu_train=doc["mu_train"],
        sigma_train=doc["sigma_train"],
        epoch_means=doc["epoch_means"],
        activation_mode=doc["activation_mode"],
        gb_output_mode=doc["gb_output_mode"],
        signal_scale=doc["signal_scale"],
        n_train=doc["n_train"],
        seed=doc["seed"],
    )


def save_checkpoint(nets: dict, stats: TrainStats, out_dir) -> None:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("g_a", "g_b", "d_a", "d_b"):
        save_network(nets[name], out / f"{name}.nn")
    save_stats(stats, out / "stats.json")


def load_checkpoint(out_dir):
    from pathlib import Path

    out = Path(out_dir)
    nets = {
        name: load_network(out / f"{name}.nn")
        for name in ("g_a", "g_b", "d_a", "d_b")
    }
    return nets, load_stats(out / "stats.json")
