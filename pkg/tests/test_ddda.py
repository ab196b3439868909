import numpy as np
import pytest

from adageo import tensor as T
from adageo.ddda import (KL_WEIGHT, AutoencoderPair, DddaConfig, ddda_loss, gaussian_kl, generate_pseudo_target,
                         train_ddda, warmup_source)
from adageo.geodata import DomainLabel, stack_pixels
from adageo.tensor import Tensor

TINY = DddaConfig(hidden=4, width=8, res_blocks=1, epochs=3, warmup_epochs=0, steps_per_epoch=4, patience=10)


def identity_pair():
    """1x1, stride-1 pair whose encoders emit (mu=x, logvar=0) and decoders copy."""
    cfg = DddaConfig(hidden=3, width=6, res_blocks=0, kernel=1, stride=1, pad=0)
    pair = AutoencoderPair(cfg, seed=0)
    eye = np.eye(3)[:, :, None, None]
    for enc in (pair.enc_s, pair.enc_t):
        enc.conv1.weight.data = eye.copy()
        enc.conv1.bias.data[:] = 0
        enc.conv2.weight.data = np.concatenate([eye, np.zeros_like(eye)])
        enc.conv2.bias.data[:] = 0
    for dec in (pair.dec_s, pair.dec_t):
        for up in (dec.up1, dec.up2):
            up.weight.data = eye.copy()
            up.bias.data[:] = 0
    return pair


def test_identity_pair_zero_reconstruction_and_cycles(rng):
    pair = identity_pair()
    s, t = rng.uniform(size=(2, 3, 6, 6)), rng.uniform(size=(2, 3, 6, 6))
    br = ddda_loss(pair, s, t)
    assert br.rec.item() == 0.0
    assert br.sts_cycle.item() == 0.0
    assert br.tst_cycle.item() == 0.0


def test_kl_closed_form():
    d = 2 * 3 * 4
    zero = Tensor(np.zeros((1, 2, 3, 4)))
    assert gaussian_kl(zero, zero).item() == 0.0
    assert gaussian_kl(Tensor(np.ones((1, 2, 3, 4))), zero).item() == pytest.approx(d / 2, abs=1e-12)
    # batch average of per-sample sums
    mu = Tensor(np.stack([np.ones((2, 3, 4)), np.zeros((2, 3, 4))]))
    assert gaussian_kl(mu, Tensor(np.zeros((2, 2, 3, 4)))).item() == pytest.approx(d / 4, abs=1e-12)


def test_breakdown_identity_and_nonnegative(rng):
    pair = AutoencoderPair(TINY, seed=1)
    br = ddda_loss(pair, rng.uniform(size=(2, 3, 8, 8)), rng.uniform(size=(2, 3, 8, 8)),
                   np.random.default_rng(0))
    v = br.values()
    assert all(x >= 0 for x in v.values())
    total = v["rec"] + v["sts_cycle"] + v["tst_cycle"] + KL_WEIGHT * (v["kl_s"] + v["kl_t"])
    assert abs(v["final"] - total) <= 1e-12


def _grads(loss, pair):
    g = T.backward(loss)
    out = {}
    for name, mod in (("enc_s", pair.enc_s), ("dec_s", pair.dec_s), ("enc_t", pair.enc_t), ("dec_t", pair.dec_t)):
        out[name] = sum(float(np.abs(g[p]).sum()) for p in mod.parameters() if p in g)
    return out


def test_cycle_gradients_exclude_frozen_modules(rng):
    s, t = rng.uniform(size=(1, 3, 8, 8)), rng.uniform(size=(1, 3, 8, 8))
    pair = AutoencoderPair(TINY, seed=2)
    sts = _grads(ddda_loss(pair, s, t).sts_cycle, pair)
    assert sts["enc_t"] == 0.0 and sts["dec_t"] == 0.0
    assert sts["enc_s"] > 0 and sts["dec_s"] > 0

    pair = AutoencoderPair(TINY, seed=2)
    tst = _grads(ddda_loss(pair, s, t).tst_cycle, pair)
    assert tst["enc_s"] == 0.0 and tst["dec_s"] == 0.0
    assert tst["enc_t"] > 0 and tst["dec_t"] > 0

    # the frozen modules are still on the path: unfreezing them yields a gradient
    pair = AutoencoderPair(TINY, seed=2)
    mu, _ = pair.enc_s(Tensor(s))
    m2, _ = pair.enc_t(pair.dec_t(mu))
    loss = T.l1_distance(pair.dec_s(m2), Tensor(s), "sum")
    assert _grads(loss, pair)["enc_t"] > 0


def test_ddda_loss_shape_mismatch():
    pair = AutoencoderPair(TINY, seed=0)
    with pytest.raises(T.ShapeError):
        ddda_loss(pair, np.zeros((1, 3, 8, 8)), np.zeros((1, 3, 4, 4)))


def test_pair_shapes(rng):
    pair = AutoencoderPair(TINY, seed=0)
    x = rng.uniform(size=(2, 3, 16, 16))
    assert pair.translate(x).shape == x.shape
    assert pair.reconstruct_target_to_source(x).shape == x.shape
    assert pair.enc_s(Tensor(x))[0].shape == pair.enc_t(Tensor(x))[0].shape


def test_train_ddda_decreases_and_is_deterministic(tiny_dataset):
    src = stack_pixels(tiny_dataset.gallery("train"))
    shots = stack_pixels(tiny_dataset.queries("train", "target:snow")[:5])
    cfg = DddaConfig(hidden=4, width=8, res_blocks=1, lr=2e-3, batch_size=2, epochs=4, warmup_epochs=0,
                     steps_per_epoch=8, patience=10)
    pair, trace = train_ddda(src, shots, cfg, seed=0)
    assert trace.epoch_loss[-1] < trace.epoch_loss[0]
    again, _ = train_ddda(src, shots, cfg, seed=0)
    for (k, a), (_, b) in zip(pair.state_dict().items(), again.state_dict().items()):
        assert a.tobytes() == b.tobytes(), k


def test_train_ddda_one_shot_and_rejections(tiny_dataset):
    src = stack_pixels(tiny_dataset.gallery("train"))
    one = stack_pixels(tiny_dataset.queries("train", "target:snow")[:1])
    pair, trace = train_ddda(src, one, TINY, seed=0)
    assert len(trace.epoch_loss) >= 1
    with pytest.raises(ValueError, match="target shot"):
        train_ddda(src, np.zeros((0, 3, 16, 16)), TINY)
    with pytest.raises(ValueError, match="width"):
        DddaConfig(width=7).check()


def test_warmup_clones_into_both_autoencoders(tiny_dataset):
    src = stack_pixels(tiny_dataset.gallery("train"))
    cfg = DddaConfig(hidden=4, width=8, res_blocks=1, epochs=1, warmup_epochs=1, steps_per_epoch=2)
    warm = warmup_source(src, cfg, seed=0)
    pair = AutoencoderPair(cfg, seed=0)
    pair.enc_s.load_state_dict(warm["enc"])
    for k, v in warm["enc"].items():
        np.testing.assert_array_equal(pair.enc_s.state_dict()[k], v)
    a, _ = train_ddda(src, src[:2], cfg, seed=0, warm=warm)
    b, _ = train_ddda(src, src[:2], cfg, seed=0)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_pseudo_target_set(tiny_dataset):
    src = tiny_dataset.queries("train") + tiny_dataset.queries("val")
    pair = AutoencoderPair(TINY, seed=0)
    start = tiny_dataset.next_id()
    ps = generate_pseudo_target(pair, src, "snow", start)
    assert len(ps) == len(src)
    for s, p in zip(src, ps.images):
        assert (p.x, p.y) == (s.x, s.y)
        assert p.split == s.split and p.role == s.role and p.category == s.category
        assert p.domain == DomainLabel("pseudo", "snow")
        assert p.pixels.shape == s.pixels.shape
    assert [p.id for p in ps.images] == list(range(start, start + len(src)))
    again = generate_pseudo_target(pair, src, "snow", start)
    assert all(a.pixels.tobytes() == b.pixels.tobytes() for a, b in zip(ps.images, again.images))
    with pytest.raises(ValueError, match="empty"):
        generate_pseudo_target(pair, [], "snow", start)


def test_identity_pair_pseudo_equals_source(tiny_dataset):
    src = tiny_dataset.queries("train")[:4]
    ps = generate_pseudo_target(identity_pair(), src, "snow", 10_000)
    for s, p in zip(src, ps.images):
        np.testing.assert_array_equal(p.pixels, s.pixels)
