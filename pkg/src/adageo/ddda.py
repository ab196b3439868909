"""Few-shot domain-driven data augmentation: a pair of variational autoencoders
trained with reconstruction, cycle-consistency and KL losses, used to render
labeled source images in the style of a handful of target images."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geodata import DomainLabel, GeoImage, quantize, relabel, stack_pixels
from .layers import Conv2d, ConvTranspose2d, Module, ResBlock
from .tensor import Tensor

logger = logging.getLogger(__name__)

KL_WEIGHT = 0.001


@dataclass
class DddaConfig:
    hidden: int = 16          # channels after the first strided conv
    width: int = 32           # channels after the second; latent keeps width // 2
    res_blocks: int = 2
    kernel: int = 4
    stride: int = 2
    pad: int = 1
    lr: float = 2e-4
    batch_size: int = 1
    epochs: int = 50
    warmup_epochs: int = 10   # source-only autoencoder epochs before the target pair is cloned from it
    steps_per_epoch: int = 100
    patience: int = 5
    min_delta: float = 1e-3
    sample_latent: bool = True
    reduction: str = "sum"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def check(self):
        if self.width % 2:
            raise ValueError("ddda width must be even (mean and log-variance halves)")
        if self.res_blocks < 0 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("ddda res_blocks >= 0, epochs >= 1 and steps_per_epoch >= 1 required")


class Encoder(Module):
    def __init__(self, cfg: DddaConfig, rng):
        self.conv1 = Conv2d(3, cfg.hidden, cfg.kernel, cfg.stride, cfg.pad, rng)
        self.conv2 = Conv2d(cfg.hidden, cfg.width, cfg.kernel, cfg.stride, cfg.pad, rng)
        self.blocks = [ResBlock(cfg.width, rng) for _ in range(cfg.res_blocks)]
        self.latent = cfg.width // 2

    def forward(self, x, frozen=False):
        h = T.relu(self.conv1(x, frozen=frozen))
        h = T.relu(self.conv2(h, frozen=frozen))
        for blk in self.blocks:
            h = blk(h, frozen=frozen)
        return h[:, :self.latent], h[:, self.latent:]


class Decoder(Module):
    def __init__(self, cfg: DddaConfig, rng):
        lat = cfg.width // 2
        self.blocks = [ResBlock(lat, rng) for _ in range(cfg.res_blocks)]
        self.up1 = ConvTranspose2d(lat, cfg.hidden, cfg.kernel, cfg.stride, cfg.pad, rng=rng)
        self.up2 = ConvTranspose2d(cfg.hidden, 3, cfg.kernel, cfg.stride, cfg.pad, rng=rng)

    def forward(self, z, frozen=False):
        for blk in self.blocks:
            z = blk(z, frozen=frozen)
        h = T.relu(self.up1(z, frozen=frozen))
        return self.up2(h, frozen=frozen)


class AutoencoderPair(Module):
    def __init__(self, cfg: DddaConfig | None = None, seed: int = 0):
        self.cfg = cfg or DddaConfig()
        self.cfg.check()
        rng = np.random.default_rng([seed, 101])
        self.enc_s = Encoder(self.cfg, rng)
        self.dec_s = Decoder(self.cfg, rng)
        self.enc_t = Encoder(self.cfg, rng)
        self.dec_t = Decoder(self.cfg, rng)

    def translate(self, x: np.ndarray) -> np.ndarray:
        """Dec_T(Enc_S(x)) using the latent mean, clipped to [0, 1]."""
        with T.no_grad():
            mu, _ = self.enc_s(Tensor(x))
            return np.clip(self.dec_t(mu).data, 0.0, 1.0)

    def reconstruct_target_to_source(self, x: np.ndarray) -> np.ndarray:
        """Dec_S(Enc_T(x)); diagnostics only."""
        with T.no_grad():
            mu, _ = self.enc_t(Tensor(x))
            return np.clip(self.dec_s(mu).data, 0.0, 1.0)


@dataclass
class DddaLossBreakdown:
    rec: Tensor
    sts_cycle: Tensor
    tst_cycle: Tensor
    kl_s: Tensor
    kl_t: Tensor
    final: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("rec", "sts_cycle", "tst_cycle", "kl_s", "kl_t", "final")}


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """Closed-form KL(N(mu, exp(logvar)) || N(0, I)), summed per sample, averaged over the batch."""
    terms = T.sub(T.add(T.mul(mu, mu), T.exp(logvar)), T.add(logvar, 1.0))
    per_sample = T.sum_(terms, axis=tuple(range(1, mu.ndim)))
    return T.scale(T.mean(per_sample), 0.5)


def _sample(mu, logvar, rng):
    if rng is None:
        return mu
    noise = rng.standard_normal(mu.shape)
    return T.add(mu, T.mul(T.exp(T.scale(logvar, 0.5)), noise))


def _l1(a, b, reduction):
    # "sum": per-image L1 summed over pixels, averaged over the batch; "mean": averaged over everything
    if reduction == "sum":
        return T.scale(T.l1_distance(a, b, "sum"), 1.0 / a.shape[0])
    return T.l1_distance(a, b, "mean")


def ddda_loss(pair: AutoencoderPair, source_batch, target_batch,
              rng: np.random.Generator | None = None) -> DddaLossBreakdown:
    """Reconstruction, both cycles and both KL terms.

    With ``rng`` the decoders see reparameterized samples; without it they see
    the latent mean. Modules in the middle of a cycle run frozen: gradients flow
    through them to the first encoder but never into their own weights.
    """
    s, t = T.as_tensor(source_batch), T.as_tensor(target_batch)
    if s.ndim != 4 or t.ndim != 4 or s.shape[1:] != t.shape[1:]:
        raise T.ShapeError(f"ddda_loss: source {s.shape} and target {t.shape} batches differ")
    mu_s, lv_s = pair.enc_s(s)
    mu_t, lv_t = pair.enc_t(t)
    z_s, z_t = _sample(mu_s, lv_s, rng), _sample(mu_t, lv_t, rng)
    rec_s, rec_t = pair.dec_s(z_s), pair.dec_t(z_t)
    if rec_s.shape != s.shape:
        raise T.ShapeError(f"ddda_loss: reconstruction {rec_s.shape} does not match input {s.shape}")
    red = pair.cfg.reduction
    rec = T.add(_l1(rec_s, s, red), _l1(rec_t, t, red))

    mu_st, lv_st = pair.enc_t(pair.dec_t(z_s, frozen=True), frozen=True)
    sts = _l1(pair.dec_s(_sample(mu_st, lv_st, rng)), s, red)
    mu_ts, lv_ts = pair.enc_s(pair.dec_s(z_t, frozen=True), frozen=True)
    tst = _l1(pair.dec_t(_sample(mu_ts, lv_ts, rng)), t, red)

    kl_s, kl_t = gaussian_kl(mu_s, lv_s), gaussian_kl(mu_t, lv_t)
    final = T.add(T.add(T.add(rec, sts), tst), T.scale(T.add(kl_s, kl_t), KL_WEIGHT))
    return DddaLossBreakdown(rec, sts, tst, kl_s, kl_t, final)


@dataclass
class DddaTrace:
    epoch_loss: list = field(default_factory=list)
    components: list = field(default_factory=list)


def warmup_source(source_images: np.ndarray, cfg: DddaConfig | None = None, seed: int = 0) -> dict:
    """Train the source autoencoder alone (reconstruction + KL); returns its state dict.

    The result depends only on the source images, ``cfg`` and ``seed``, so one
    warm-up can seed the pairs of several target domains.
    """
    cfg = cfg or DddaConfig()
    source_images = np.asarray(source_images, dtype=np.float64)
    if len(source_images) == 0:
        raise ValueError("warm-up needs source images")
    pair = AutoencoderPair(cfg, seed)
    rng = np.random.default_rng([seed, 103])
    sample_rng = rng if cfg.sample_latent else None
    params = pair.enc_s.parameters() + pair.dec_s.parameters()
    state = T.AdamState.for_params(params, cfg.beta1, cfg.beta2, cfg.eps)
    for epoch in range(cfg.warmup_epochs):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            x = T.Tensor(source_images[rng.integers(0, len(source_images), cfg.batch_size)])
            mu, lv = pair.enc_s(x)
            loss = T.add(_l1(pair.dec_s(_sample(mu, lv, sample_rng)), x, cfg.reduction),
                         T.scale(gaussian_kl(mu, lv), KL_WEIGHT))
            grads = T.backward(loss)
            T.adam_step(params, grads, state, cfg.lr)
            pair.zero_grad()
            losses.append(loss.item())
        logger.info("ddda warm-up epoch %d loss %.4f", epoch, np.mean(losses))
    return {"enc": pair.enc_s.state_dict(), "dec": pair.dec_s.state_dict()}


def train_ddda(source_images: np.ndarray, target_shots: np.ndarray, cfg: DddaConfig | None = None,
               seed: int = 0, warm: dict | None = None) -> tuple[AutoencoderPair, DddaTrace]:
    """Train the pair on (N, 3, H, W) source images and n_t target shots.

    With ``warmup_epochs > 0`` both autoencoders start from a source-only
    warm-up (``warm`` if given, else computed here).
    """
    cfg = cfg or DddaConfig()
    source_images = np.asarray(source_images, dtype=np.float64)
    target_shots = np.asarray(target_shots, dtype=np.float64)
    if target_shots.ndim != 4 or len(target_shots) == 0:
        raise ValueError("train_ddda needs at least one target shot")
    if len(source_images) == 0:
        raise ValueError("train_ddda needs source images")
    pair = AutoencoderPair(cfg, seed)
    rng = np.random.default_rng([seed, 102])
    trace = DddaTrace()
    bs = cfg.batch_size
    sample_rng = rng if cfg.sample_latent else None

    if cfg.warmup_epochs > 0:
        warm = warm if warm is not None else warmup_source(source_images, cfg, seed)
        for enc, dec in ((pair.enc_s, pair.dec_s), (pair.enc_t, pair.dec_t)):
            enc.load_state_dict(warm["enc"])
            dec.load_state_dict(warm["dec"])

    params = pair.parameters()
    state = T.AdamState.for_params(params, cfg.beta1, cfg.beta2, cfg.eps)
    best, stale = np.inf, 0
    for epoch in range(cfg.epochs):
        totals = []
        for _ in range(cfg.steps_per_epoch):
            si = rng.integers(0, len(source_images), bs)
            ti = rng.integers(0, len(target_shots), bs)
            br = ddda_loss(pair, source_images[si], target_shots[ti], sample_rng)
            grads = T.backward(br.final)
            T.adam_step(params, {p: grads.get(p, np.zeros(p.shape)) for p in params}, state, cfg.lr)
            pair.zero_grad()
            totals.append(br.values())
        mean = {k: float(np.mean([d[k] for d in totals])) for k in totals[0]}
        trace.epoch_loss.append(mean["final"])
        trace.components.append(mean)
        logger.info("ddda epoch %d loss %.4f", epoch, mean["final"])
        if mean["final"] < best * (1 - cfg.min_delta):
            best, stale = mean["final"], 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return pair, trace


@dataclass
class PseudoTargetSet:
    target: str
    images: list[GeoImage]

    def __len__(self):
        return len(self.images)


def generate_pseudo_target(pair: AutoencoderPair, source_set: list[GeoImage], target: str,
                           start_id: int, batch: int = 64) -> PseudoTargetSet:
    """One Dec_T(Enc_S(x)) image per source image; ids, split, role and position copied.

    Pixels are quantized to 8 bits, matching what the manifest stores.
    """
    if not source_set:
        raise ValueError("generate_pseudo_target: empty source set")
    out = []
    for i in range(0, len(source_set), batch):
        chunk = source_set[i:i + batch]
        out.extend(quantize(pair.translate(stack_pixels(chunk)).transpose(0, 2, 3, 1)))
    return PseudoTargetSet(target, relabel(source_set, start_id, DomainLabel("pseudo", target), out))
