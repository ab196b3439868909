"""Two-phase training: domain-driven augmentation, then geolocalization with
attention, VLAD and adversarial domain adaptation; plus the ablation suite."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .ddda import (AutoencoderPair, DddaConfig, DddaTrace, generate_pseudo_target, train_ddda,
                   warmup_source)
from .evaluate import RecallReport, evaluate_split, table_csv
from .geodata import (SOURCE, DomainLabel, GeoDataset, GeoImage, mine_triplet, stack_pixels)
from .model import (GeoNet, NetConfig, batched_triplet_loss, class_scores, combined_loss,
                    init_centroids)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int = 0
    domain: str = "night"
    ddda: bool = True
    attention: bool = True
    da: bool = True
    shots: int = 5
    lr: float = 1e-5
    tuples_per_iter: int = 4
    negatives: int = 10
    alpha: float = 0.1
    margin: float = 0.1
    lam: float = 1.0
    lam_ramp: bool = False
    max_epochs: int = 30
    patience: int = 5
    pool: int = 100
    cache_every: int = 0  # queries between descriptor-cache refreshes; 0 = once per epoch
    kmeans_samples: int = 500
    da_per_domain: int = 4
    pretrain_epochs: int = 10
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 16
    pretrain_jitter: float = 0.0  # strength of generic photometric augmentation during pretraining
    net: NetConfig = field(default_factory=NetConfig)
    ddda_cfg: DddaConfig = field(default_factory=lambda: DddaConfig())

    def __post_init__(self):
        if self.shots < 0:
            raise ValueError("shots must be >= 0")
        if self.shots == 0:
            self.ddda = False
            self.da = False
        if self.alpha < 0 or self.lam <= 0 or self.margin < 0:
            raise ValueError("alpha >= 0, lambda > 0 and margin >= 0 required")
        if self.tuples_per_iter < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("tuples_per_iter, max_epochs and patience must be >= 1")

    @property
    def uses_target(self) -> bool:
        return self.ddda or self.da

    def label(self) -> str:
        parts = [n for n, on in (("DDDA", self.ddda), ("Att", self.attention), ("DA", self.da)) if on]
        return "+".join(["Baseline"] + parts)


ABLATION_ORDER = [(False, False, False), (True, False, False), (False, True, False), (False, False, True),
                  (True, True, False), (True, False, True), (False, True, True), (True, True, True)]


@dataclass
class EpochRecord:
    epoch: int
    triplet_loss: float
    ce_loss: float
    val_recall1: float

    def __post_init__(self):
        if not (np.isfinite(self.triplet_loss) and np.isfinite(self.ce_loss)):
            raise FloatingPointError(f"epoch {self.epoch}: non-finite loss")
        if not 0 <= self.val_recall1 <= 100:
            raise ValueError("recall outside [0, 100]")


def trace_csv(records: list[EpochRecord]) -> str:
    lines = ["epoch,triplet_loss,ce_loss,val_recall1"]
    lines += [f"{r.epoch},{r.triplet_loss:.10f},{r.ce_loss:.10f},{r.val_recall1:.4f}" for r in records]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- helpers

def select_shots(dataset: GeoDataset, domain: str, shots: int, seed: int) -> list[GeoImage]:
    """Deterministic choice of ``shots`` unlabeled target images from the train split."""
    if shots == 0:
        return []
    pool = sorted(dataset.queries("train", f"target:{domain}"), key=lambda im: im.id)
    if len(pool) < shots:
        raise ValueError(f"only {len(pool)} {domain} train images for {shots} shots")
    rng = np.random.default_rng([seed, 501])
    idx = np.sort(rng.choice(len(pool), size=shots, replace=False))
    return [pool[i] for i in idx]


def photometric_jitter(x: np.ndarray, rng, strength: float) -> np.ndarray:
    """Random brightness, contrast and per-channel gain on (N, 3, H, W) images."""
    if strength <= 0:
        return x
    n = len(x)
    gain = rng.uniform(1 - strength, 1 + strength, (n, 1, 1, 1))
    chan = rng.uniform(1 - strength / 2, 1 + strength / 2, (n, 3, 1, 1))
    contrast = rng.uniform(1 - strength, 1 + strength, (n, 1, 1, 1))
    offset = rng.uniform(-strength / 2, strength / 2, (n, 1, 1, 1))
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    out = (x - mean) * contrast + mean
    return np.clip(out * gain * chan + offset, 0.0, 1.0)


def pretrain_backbone(dataset: GeoDataset, cfg: TrainConfig) -> GeoNet:
    """Encoder plus classifier head trained on place categories of source training images.

    Stands in for a backbone pretrained on scene categories; its head drives attention.
    """
    net_cfg = replace(cfg.net, attention=cfg.attention)
    model = GeoNet(net_cfg, cfg.seed)
    images = dataset.gallery("train") + dataset.queries("train")
    x = stack_pixels(images)
    y = np.array([im.category for im in images])
    params = model.encoder.parameters() + model.head.parameters()
    state = T.AdamState.for_params(params)
    rng = np.random.default_rng([cfg.seed, 601])
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(len(x))
        losses = []
        for i in range(0, len(x), cfg.pretrain_batch):
            idx = order[i:i + cfg.pretrain_batch]
            xb = photometric_jitter(x[idx], rng, cfg.pretrain_jitter)
            loss = T.cross_entropy(class_scores(model.features(xb), model.head), y[idx])
            grads = T.backward(loss)
            T.adam_step(params, grads, state, cfg.pretrain_lr)
            model.zero_grad()
            losses.append(loss.item())
        logger.info("pretrain epoch %d loss %.4f", epoch, np.mean(losses))
    return model


def sample_embeddings(model: GeoNet, pools: list[list[GeoImage]], n: int, rng) -> np.ndarray:
    """``n`` local embedding vectors drawn evenly across the given domain pools."""
    pools = [p for p in pools if p]
    per = [n // len(pools) + (1 if i < n % len(pools) else 0) for i in range(len(pools))]
    out = []
    for pool, k in zip(pools, per):
        picks = rng.integers(0, len(pool), k)
        imgs = stack_pixels([pool[i] for i in sorted(set(picks.tolist()))])
        with T.no_grad():
            emb = model.local_embeddings(model.features(imgs)).data  # (M, D, H, W)
        flat = emb.transpose(0, 2, 3, 1).reshape(-1, emb.shape[1])
        out.append(flat[rng.choice(len(flat), size=k, replace=len(flat) < k)])
    return np.concatenate(out)


# ---------------------------------------------------------------- phase 1

@dataclass
class Phase1Result:
    dataset: GeoDataset
    pair: AutoencoderPair | None = None
    trace: DddaTrace | None = None
    shots: list = field(default_factory=list)


def ddda_source_images(dataset: GeoDataset) -> list[GeoImage]:
    return dataset.gallery("train") + dataset.queries("train")


def run_phase1(cfg: TrainConfig, dataset: GeoDataset, shots: list[GeoImage] | None = None,
               warm: dict | None = None) -> Phase1Result:
    """Train DDDA on source + target shots and append pseudo-target train/val queries."""
    if not cfg.ddda:
        return Phase1Result(dataset, shots=shots or [])
    if cfg.shots < 1:
        raise ValueError("ddda needs shots >= 1")
    shots = shots if shots is not None else select_shots(dataset, cfg.domain, cfg.shots, cfg.seed)
    source = ddda_source_images(dataset)
    pair, trace = train_ddda(stack_pixels(source), stack_pixels(shots), cfg.ddda_cfg, cfg.seed, warm)
    to_translate = dataset.queries("train") + dataset.queries("val")
    pseudo = generate_pseudo_target(pair, to_translate, cfg.domain, dataset.next_id())
    return Phase1Result(dataset.extend(pseudo.images), pair, trace, shots)


def add_pseudo(dataset: GeoDataset, pair: AutoencoderPair, domain: str) -> GeoDataset:
    src = dataset.queries("train") + dataset.queries("val")
    return dataset.extend(generate_pseudo_target(pair, src, domain, dataset.next_id()).images)


# ---------------------------------------------------------------- phase 2

@dataclass
class Phase2Result:
    model: GeoNet
    records: list[EpochRecord]
    best_epoch: int
    skipped_queries: int = 0


def _lam(cfg: TrainConfig, progress: float) -> float:
    if not cfg.lam_ramp:
        return cfg.lam
    # DANN schedule 2 / (1 + exp(-10 p)) - 1, floored to stay > 0
    return max(cfg.lam * (2.0 / (1.0 + np.exp(-10.0 * progress)) - 1.0), 1e-6)


def run_phase2(cfg: TrainConfig, dataset: GeoDataset, model: GeoNet,
               shots: list[GeoImage] | None = None, on_epoch=None) -> Phase2Result:
    """Triplet training (+ alpha * domain CE when DA is on) with early stopping.

    ``model`` is modified in place and restored to its best validation epoch.
    ``on_epoch(record, model)`` is called after each epoch's validation.
    """
    rng = np.random.default_rng([cfg.seed, 401])
    shots = shots or []
    if cfg.da and not shots:
        raise ValueError("domain adaptation needs target shots")
    model.cfg.attention = cfg.attention
    pseudo_dom = DomainLabel("pseudo", cfg.domain)
    gallery = dataset.gallery("train")
    src_q = dataset.queries("train")
    pseudo_q = dataset.queries("train", pseudo_dom) if cfg.ddda else []
    queries = src_q + pseudo_q
    val_gallery = dataset.gallery("val")
    val_q = dataset.queries("val", pseudo_dom) if cfg.ddda else dataset.queries("val")
    if cfg.ddda and not pseudo_q:
        raise ValueError("ddda is on but the dataset has no pseudo-target queries; run phase 1 first")

    pools = [gallery + src_q, pseudo_q, shots if cfg.uses_target else []]
    samples = sample_embeddings(model, pools, cfg.kmeans_samples, rng)
    model.set_centroids(init_centroids(samples, cfg.net.clusters, cfg.seed))

    model.head.set_trainable(False)
    model.centroids.requires_grad = cfg.net.trainable_centroids
    params = model.encoder.parameters()
    if cfg.da:
        params += model.disc.parameters()
    if cfg.net.trainable_centroids:
        params.append(model.centroids)
    state = T.AdamState.for_params(params)

    records: list[EpochRecord] = []
    best, best_state, best_epoch, stale = -1.0, None, 0, 0
    skipped = 0
    B = cfg.tuples_per_iter
    iters_per_epoch = max(1, int(np.ceil(len(queries) / B)))
    refresh = cfg.cache_every or len(queries)
    cache_ims = gallery + queries
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(queries))
        trip_losses, ce_losses = [], []
        for i in range(0, len(order), B):
            if i % refresh < B:
                cache = dict(zip([im.id for im in cache_ims], model.describe(stack_pixels(cache_ims))))
            chunk = []
            for qi in order[i:i + B]:
                tup = mine_triplet(queries[qi], cache, gallery, cfg.pool, rng, cfg.negatives)
                if tup is None:
                    skipped += 1
                else:
                    chunk.append(tup)
            if not chunk:
                continue
            imgs = np.stack([px for t in chunk
                             for px in [t.query.pixels, t.positive.pixels] + [n.pixels for n in t.negatives]])
            desc = model(imgs.transpose(0, 3, 1, 2))
            d3 = T.reshape(desc, (len(chunk), 2 + cfg.negatives, -1))
            loss = l_trip = batched_triplet_loss(d3[:, 0], d3[:, 1:2], d3[:, 2:], cfg.margin)
            if cfg.da:
                dom_imgs, labels = _da_batch(cfg, src_q, pseudo_q, shots, rng, step)
                logits = model.discriminate(model.features(dom_imgs),
                                            _lam(cfg, step / (iters_per_epoch * cfg.max_epochs)))
                l_ce = T.cross_entropy(logits, labels)
                loss = combined_loss(l_trip, l_ce, cfg.alpha)
                ce_losses.append(l_ce.item())
            grads = T.backward(loss)
            T.adam_step(params, {p: grads.get(p, np.zeros(p.shape)) for p in params}, state, cfg.lr)
            model.zero_grad()
            trip_losses.append(l_trip.item())
            step += 1
        recall = evaluate_split(model, val_gallery, val_q, (1,))[1]
        rec = EpochRecord(epoch, float(np.mean(trip_losses)) if trip_losses else 0.0,
                          float(np.mean(ce_losses)) if ce_losses else 0.0, recall)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec, model)
        logger.info("epoch %d triplet %.4f ce %.4f val R@1 %.2f", epoch, rec.triplet_loss, rec.ce_loss, recall)
        if recall > best:
            best, best_state, best_epoch, stale = recall, model.state_dict(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    return Phase2Result(model, records, best_epoch, skipped)


def _da_batch(cfg: TrainConfig, src_q, pseudo_q, shots, rng, step):
    k = cfg.da_per_domain
    imgs, labels = [], []
    for pool, dom in ((src_q, 0), (pseudo_q, 1)):
        if pool:
            for i in rng.integers(0, len(pool), k):
                imgs.append(pool[i].pixels)
                labels.append(dom)
    for j in range(k):
        imgs.append(shots[(step * k + j) % len(shots)].pixels)
        labels.append(2)
    return np.stack(imgs).transpose(0, 3, 1, 2), np.array(labels)


# ---------------------------------------------------------------- full runs

@dataclass
class RunResult:
    config: TrainConfig
    phase2: Phase2Result
    phase1: Phase1Result


class PipelineCache:
    """Shares pretrained backbones and DDDA pairs between configurations of one seed."""

    def __init__(self, dataset: GeoDataset):
        self.dataset = dataset
        self.backbones: dict = {}
        self.phase1: dict = {}
        self.warm: dict = {}

    def backbone(self, cfg: TrainConfig) -> GeoNet:
        key = (cfg.seed, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.pretrain_jitter, repr(cfg.net))
        if key not in self.backbones:
            self.backbones[key] = pretrain_backbone(self.dataset, cfg)
        return copy.deepcopy(self.backbones[key])

    def run_phase1(self, cfg: TrainConfig) -> Phase1Result:
        shots = select_shots(self.dataset, cfg.domain, cfg.shots, cfg.seed) if cfg.uses_target else []
        if not cfg.ddda:
            return Phase1Result(self.dataset, shots=shots)
        if self.dataset.queries("train", DomainLabel("pseudo", cfg.domain)):
            # pseudo-target copies already present (e.g. a manifest written by make-pseudo)
            return Phase1Result(self.dataset, shots=shots)
        key = (cfg.seed, cfg.domain, cfg.shots, repr(cfg.ddda_cfg))
        if key not in self.phase1:
            wkey = (cfg.seed, repr(cfg.ddda_cfg))
            if wkey not in self.warm and cfg.ddda_cfg.warmup_epochs > 0:
                src = stack_pixels(ddda_source_images(self.dataset))
                self.warm[wkey] = warmup_source(src, cfg.ddda_cfg, cfg.seed)
            self.phase1[key] = run_phase1(cfg, self.dataset, shots, self.warm.get(wkey))
        return self.phase1[key]


def train_model(cfg: TrainConfig, dataset: GeoDataset, cache: PipelineCache | None = None,
                on_epoch=None) -> RunResult:
    cache = cache or PipelineCache(dataset)
    p1 = cache.run_phase1(cfg)
    model = cache.backbone(cfg)
    p2 = run_phase2(cfg, p1.dataset, model, p1.shots, on_epoch)
    return RunResult(cfg, p2, p1)


def ablation_configs(base: TrainConfig) -> list[TrainConfig]:
    return [replace(base, ddda=d, attention=a, da=g, shots=base.shots if (d or g) else 0)
            for d, a, g in ABLATION_ORDER]


@dataclass
class AblationResult:
    reports: dict  # label -> RecallReport
    traces: dict   # (label, seed, domain) -> list[EpochRecord]

    def table(self, n: int = 1) -> dict[str, dict[str, float]]:
        return {label: rep.row(n) for label, rep in self.reports.items()}

    def csv(self, n: int = 1) -> str:
        return table_csv(self.table(n), label="config")


def run_ablation_suite(base: TrainConfig, dataset: GeoDataset, seeds=(0, 1, 2),
                       domains=None, configs: list[TrainConfig] | None = None) -> AblationResult:
    """All eight module combinations, each evaluated per target domain and seed.

    Configurations that never see target data are trained once per seed and
    evaluated on every domain.
    """
    domains = list(domains) if domains is not None else dataset.target_domains()
    if not domains:
        raise ValueError("ablation needs at least one target domain")
    configs = configs or ablation_configs(base)
    reports = {c.label(): RecallReport() for c in configs}
    traces = {}
    gallery = dataset.gallery("test")
    queries = {d: dataset.queries("test", f"target:{d}") for d in domains}
    for seed in seeds:
        cache = PipelineCache(dataset)
        for c in configs:
            shared = None
            for d in domains:
                cfg = replace(c, seed=seed, domain=d)
                if cfg.uses_target or shared is None:
                    run = train_model(cfg, dataset, cache)
                    shared = run
                traces[(c.label(), seed, d)] = shared.phase2.records
                rec = evaluate_split(shared.phase2.model, gallery, queries[d])
                reports[c.label()].add(d, seed, rec, len(queries[d]))
                logger.info("seed %d %s %s R@1 %.2f", seed, c.label(), d, rec[1])
    return AblationResult(reports, traces)


@dataclass
class ShotSweepResult:
    reports: dict  # shots -> RecallReport

    def table(self, n: int = 1) -> dict[str, dict[str, float]]:
        """Rows per shot count, columns per target domain plus Avg."""
        return {f"{k}-shot": rep.row(n) for k, rep in sorted(self.reports.items())}

    def csv(self, n: int = 1) -> str:
        return table_csv(self.table(n), label="shots")


def run_shot_sweep(base: TrainConfig, dataset: GeoDataset, shots=(1, 5, 50), seeds=(0, 1, 2),
                   domains=None) -> ShotSweepResult:
    """``base`` retrained for every shot count, seed and target domain."""
    domains = list(domains) if domains is not None else dataset.target_domains()
    if not domains:
        raise ValueError("shot sweep needs at least one target domain")
    reports = {}
    gallery = dataset.gallery("test")
    for seed in seeds:
        cache = PipelineCache(dataset)
        for n in shots:
            rep = reports.setdefault(n, RecallReport())
            for d in domains:
                run = train_model(replace(base, seed=seed, domain=d, shots=n), dataset, cache)
                q = dataset.queries("test", f"target:{d}")
                rec = evaluate_split(run.phase2.model, gallery, q)
                rep.add(d, seed, rec, len(q))
                logger.info("seed %d shots %d %s R@1 %.2f", seed, n, d, rec[1])
    return ShotSweepResult(reports)
