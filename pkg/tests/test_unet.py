"""Network architecture: shape contract, determinism, batch-norm modes,
checkpoint round trips, and an end-to-end finite-difference gradient check
through the full forward pass and loss."""
import numpy as np
import pytest

from cardiokit import autodiff as ad
from cardiokit.autodiff import Tensor
from cardiokit.losses import ClassWeights, LossConfig, one_hot, total_loss
from cardiokit.serialization import CorruptBundle, VersionMismatch
from cardiokit.unet import NetConfig, UNet, forward, load_checkpoint, save_checkpoint
from cardiokit.volume import ShapeMismatch

RNG = np.random.default_rng(1234)


def test_shape_contract():
    net = UNet(NetConfig(levels=2, base_channels=8))
    x = RNG.normal(size=(1, 16, 16, 16, 1)).astype(np.float32)
    out = net(x)
    assert out.data.shape == (4, 16, 16, 16, 1)


def test_divisibility_enforced():
    net = UNet(NetConfig(levels=2, base_channels=4))
    with pytest.raises(ShapeMismatch):
        net(np.zeros((1, 15, 16, 16, 1), dtype=np.float32))
    with pytest.raises(ShapeMismatch):
        net(np.zeros((1, 16, 16, 10, 1), dtype=np.float32))
    # 3-level net needs multiples of 8
    net3 = UNet(NetConfig(levels=3, base_channels=2))
    with pytest.raises(ShapeMismatch):
        net3(np.zeros((1, 12, 16, 16, 1), dtype=np.float32))
    assert net3(np.zeros((1, 16, 16, 8, 1), dtype=np.float32)).data.shape == (4, 16, 16, 8, 1)


def test_input_channel_check():
    net = UNet()
    with pytest.raises(ShapeMismatch):
        net(np.zeros((2, 16, 16, 16, 1), dtype=np.float32))


def test_zero_init_head_gives_uniform_softmax():
    net = UNet(NetConfig(levels=1, base_channels=4))
    x = RNG.normal(size=(1, 8, 8, 4, 2)).astype(np.float32)
    logits = net(x)
    assert np.all(logits.data == 0.0)
    probs = ad.softmax_channels(logits).data
    assert np.allclose(probs, 0.25)


def test_deterministic_without_dropout():
    net = UNet(NetConfig(levels=1, base_channels=4, dropout_rate=0.0))
    x = RNG.normal(size=(1, 8, 8, 4, 2)).astype(np.float32)
    a = net(x, training=False).data
    b = net(x, training=False).data
    assert np.array_equal(a, b)
    c = net(x, training=True).data
    d = net(x, training=True).data
    assert np.array_equal(c, d)


def test_dropout_changes_training_outputs():
    net = UNet(NetConfig(levels=1, base_channels=4, dropout_rate=0.5))
    # give the head nonzero weights so dropout reaches the output
    rng = np.random.default_rng(5)
    net.final.w.data[...] = rng.normal(size=net.final.w.data.shape).astype(np.float32)
    x = RNG.normal(size=(1, 8, 8, 4, 2)).astype(np.float32)
    a = net(x, training=True).data
    b = net(x, training=True).data
    assert not np.array_equal(a, b)
    # evaluation ignores dropout entirely
    c = net(x, training=False).data
    d = net(x, training=False).data
    assert np.array_equal(c, d)


def test_same_seed_same_parameters():
    a = UNet(NetConfig(), rng_seed=42)
    b = UNet(NetConfig(), rng_seed=42)
    c = UNet(NetConfig(), rng_seed=43)
    assert a.parameter_checksum() == b.parameter_checksum()
    assert a.parameter_checksum() != c.parameter_checksum()
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data)


def test_batchnorm_running_stats_update():
    net = UNet(NetConfig(levels=1, base_channels=2, dropout_rate=0.0))
    x = RNG.normal(2.0, 3.0, size=(1, 8, 8, 4, 2)).astype(np.float32)
    bn = net.enc[0].bn1
    before = bn.running_mean.copy()
    net(x, training=True)
    after = bn.running_mean.copy()
    assert not np.array_equal(before, after)
    # eval forward must not move the running stats
    net(x, training=False)
    assert np.array_equal(bn.running_mean, after)


def test_batch_of_one_uses_running_stats():
    net = UNet(NetConfig(levels=1, base_channels=2, dropout_rate=0.0))
    x = RNG.normal(size=(1, 8, 8, 4, 1)).astype(np.float32)
    train_out = net(x, training=True).data
    eval_out = net(x, training=False).data
    # with dropout off, a singleton training batch takes the same
    # running-statistics path as evaluation
    assert np.allclose(train_out, eval_out, atol=1e-6)


def test_forward_helper():
    net = UNet(NetConfig(levels=1, base_channels=2))
    x = np.zeros((1, 4, 4, 4, 1), dtype=np.float32)
    assert forward(net, x).data.shape == (4, 4, 4, 4, 1)


# end-to-end gradient check


def fd_loss_gradcheck(net, x, labels, cfg, h=1e-4, tol=1e-4):
    """Central finite differences over every parameter and the input."""
    g_hot = one_hot(labels, dtype=np.float64)
    weights = ClassWeights((0.7, 1.0, 0.4, 0.9)) if cfg.include_background \
        else ClassWeights((0.7, 1.0, 0.4))

    def run(xt=None):
        inp = Tensor(x.copy()) if xt is None else xt
        probs = ad.softmax_channels(net(inp, training=True))
        return total_loss(probs, g_hot, weights, cfg), inp

    xt = Tensor(x.copy(), requires_grad=True)
    loss, _ = run(xt)
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in net.named_parameters()}
    analytic["__input__"] = xt.grad.copy()

    checked = 0
    for name, p in list(net.named_parameters()) + [("__input__", xt)]:
        target = p.data if name != "__input__" else x
        grad = analytic[name]
        flat = target.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = run()[0].item()
            flat[i] = old - h
            fm = run()[0].item()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            a = grad.ravel()[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            assert err <= tol, f"{name}[{i}]: analytic {a}, numeric {num}"
            checked += 1
    for p in net.parameters():
        p.grad = None
    return checked


def test_end_to_end_gradients_match_finite_differences():
    net = UNet(NetConfig(levels=1, base_channels=2, dropout_rate=0.0),
               rng_seed=7, dtype=np.float64)
    x = np.random.default_rng(3).normal(size=(1, 6, 6, 4, 2))
    labels = np.random.default_rng(4).integers(0, 4, size=(6, 6, 4, 2))
    cfg = LossConfig(kind="dynamic_focal_dice", beta=2.0)
    checked = fd_loss_gradcheck(net, x, labels, cfg)
    assert checked > 500


def test_end_to_end_gradients_cross_entropy():
    net = UNet(NetConfig(levels=1, base_channels=2, dropout_rate=0.0),
               rng_seed=11, dtype=np.float64)
    x = np.random.default_rng(5).normal(size=(1, 4, 4, 4, 2))
    labels = np.random.default_rng(6).integers(0, 4, size=(4, 4, 4, 2))
    fd_loss_gradcheck(net, x, labels, LossConfig(kind="cross_entropy"))


# checkpoints


def jiggle(net, seed=9):
    rng = np.random.default_rng(seed)
    for _, p in net.named_parameters():
        p.data += rng.normal(0, 0.05, p.data.shape).astype(p.data.dtype)
    return net


def test_checkpoint_round_trip_identical_predictions():
    net = jiggle(UNet(NetConfig(levels=2, base_channels=4), rng_seed=1))
    x = RNG.normal(size=(1, 16, 16, 8, 1)).astype(np.float32)
    net(x, training=True)  # move the running stats off their defaults
    blob = save_checkpoint(net, meta={"epochs": 3, "note": "unit"})
    restored, meta = load_checkpoint(blob)
    assert meta == {"epochs": 3, "note": "unit"}
    assert restored.config == net.config
    a = net(x, training=False).data
    b = restored(x, training=False).data
    assert np.array_equal(a, b)


def test_checkpoint_rejects_corruption():
    net = UNet(NetConfig(levels=1, base_channels=2))
    blob = bytearray(save_checkpoint(net))
    with pytest.raises(CorruptBundle):
        load_checkpoint(bytes(blob[:40]))
    bad_magic = b"XXXX" + bytes(blob[4:])
    with pytest.raises(CorruptBundle):
        load_checkpoint(bad_magic)
    bumped = bytes(blob[:4]) + (99).to_bytes(4, "little") + bytes(blob[8:])
    with pytest.raises(VersionMismatch):
        load_checkpoint(bumped)
    with pytest.raises(CorruptBundle):
        load_checkpoint(bytes(blob) + b"trailing-garbage")


def test_net_config_validation():
    with pytest.raises(ValueError):
        NetConfig(levels=0)
    with pytest.raises(ValueError):
        NetConfig(base_channels=0)
    with pytest.raises(ValueError):
        NetConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        NetConfig(out_channels=3)
