import json
import math
import struct

import numpy as np
import pytest
import torch

from _audit import max_violation, run_audit
from usbone.phantom import PhantomConfig, generate
from usbone.transporter import (
    CheckpointError,
    FeatureEncoder,
    KeyNet,
    KeypointSet,
    NetworkSpec,
    RefineNet,
    TrainConfig,
    Transporter,
    combine_heatmaps,
    infer_keypoint_sets,
    init_weights,
    learning_rate,
    load_checkpoint,
    normalized_to_pixels,
    read_records,
    reconstruction_loss,
    render_gaussians,
    save_checkpoint,
    soft_argmax,
    train,
    transport,
)


def _pixel_of(coords, size):
    return (coords + 1) * (size - 1) / 2


# -- shapes --------------------------------------------------------------------

def test_ffcnn_default_shape():
    spec = NetworkSpec()
    enc = init_weights(FeatureEncoder(spec), 0).eval()
    with torch.no_grad():
        assert enc(torch.zeros(1, 4, 256, 256)).shape == (1, 128, 64, 64)


def test_refinenet_default_shape():
    net = init_weights(RefineNet(NetworkSpec()), 0).eval()
    with torch.no_grad():
        out = net(torch.rand(1, 128, 64, 64))
    assert out.shape == (1, 1, 256, 256)
    assert out.min() >= 0 and out.max() <= 1


def test_keynet_default_keypoint_count():
    net = init_weights(KeyNet(NetworkSpec()), 0).eval()
    with torch.no_grad():
        coords, heat, conf = net(torch.rand(2, 4, 64, 64))
    assert coords.shape == (2, 10, 2) and heat.shape == (2, 10, 16, 16) and conf.shape == (2, 10)
    assert coords.abs().max() <= 1


def test_zero_input_zero_final_block_gives_zero():
    enc = init_weights(FeatureEncoder(NetworkSpec()), 0).eval()
    with torch.no_grad():
        enc.blocks[-1].conv.weight.zero_()
        assert not enc(torch.zeros(1, 4, 32, 32)).any()


def test_eval_mode_batch_slices_identical():
    enc = init_weights(FeatureEncoder(NetworkSpec()), 1).eval()
    x = torch.rand(1, 4, 32, 32).repeat(2, 1, 1, 1)
    with torch.no_grad():
        out = enc(x)
    assert torch.equal(out[0], out[1])


def test_refinenet_repeatable():
    net = init_weights(RefineNet(NetworkSpec()), 2).eval()
    x = torch.rand(1, 128, 8, 8)
    with torch.no_grad():
        assert torch.equal(net(x), net(x))


@pytest.mark.parametrize("bad", [dict(keypoints=0), dict(encoder_widths=(32,) * 5)])
def test_spec_invariants(bad):
    with pytest.raises(ValueError):
        NetworkSpec(**bad)


def test_channel_mismatch_rejected():
    model = Transporter(NetworkSpec())
    with pytest.raises(ValueError):
        model(torch.zeros(1, 3, 16, 16), torch.zeros(1, 3, 16, 16))
    with pytest.raises(ValueError):
        NetworkSpec().feature_side(30)


def test_init_is_seeded():
    a = init_weights(Transporter(), 5).state_dict()
    b = init_weights(Transporter(), 5).state_dict()
    c = init_weights(Transporter(), 6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["ffcnn.blocks.0.conv.weight"], c["ffcnn.blocks.0.conv.weight"])


# -- keypoint bottleneck ----------------------------------------------------------

def test_uniform_map_gives_centre():
    coords, _ = soft_argmax(torch.zeros(1, 2, 9, 7, dtype=torch.float64))
    assert torch.allclose(coords, torch.zeros(1, 2, 2, dtype=torch.float64), atol=1e-12)


def test_large_logit_localises():
    raw = torch.zeros(1, 1, 64, 64, dtype=torch.float64)
    raw[0, 0, 17, 40] = 50.0
    px = _pixel_of(soft_argmax(raw)[0][0, 0], 64)
    assert abs(px[0] - 17) <= 0.5 and abs(px[1] - 40) <= 0.5


def test_soft_argmax_equivariance(rng):
    yy, xx = np.mgrid[:32, :32]
    raw = 30 * np.exp(-((yy - 12) ** 2 + (xx - 14) ** 2) / 8.0) + 0.01 * rng.random((32, 32))
    base = _pixel_of(soft_argmax(torch.from_numpy(raw)[None, None])[0][0, 0], 32)
    for dr, dc in [(3, -2), (5, 6), (-4, 1)]:
        shifted = np.roll(raw, (dr, dc), axis=(0, 1))
        moved = _pixel_of(soft_argmax(torch.from_numpy(shifted)[None, None])[0][0, 0], 32)
        assert abs(moved[0] - base[0] - dr) <= 0.1 and abs(moved[1] - base[1] - dc) <= 0.1


def test_gaussian_peak_and_two_sigma():
    sigma = 0.1
    size = 201  # grid spacing 0.01, so 2 sigma lands on a pixel
    coords = torch.tensor([[[0.0, 0.0]]], dtype=torch.float64)
    h = render_gaussians(coords, (size, size), sigma)[0, 0]
    assert h[100, 100] == 1.0 and h.max() == 1.0
    assert abs(h[120, 100].item() - math.exp(-2)) <= 1e-6
    assert abs(h[100, 80].item() - math.exp(-2)) <= 1e-6


def test_combine_heatmaps_union():
    h = torch.tensor([0.5, 0.5, 0.0]).reshape(1, 3, 1, 1)
    assert combine_heatmaps(h).item() == pytest.approx(0.75)
    assert combine_heatmaps(torch.ones(1, 2, 3, 3)).eq(1).all()


def test_transport_identities(rng):
    psi_s, psi_t = (torch.from_numpy(rng.standard_normal((2, 5, 8, 8))) for _ in range(2))
    zero = torch.zeros(2, 3, 8, 8, dtype=torch.float64)
    assert torch.equal(transport(psi_s, psi_t, zero, zero), psi_s)
    h_t = zero.clone()
    h_t[:, 0, 2, 3] = 1.0
    h_s = torch.from_numpy(rng.random((2, 3, 8, 8)))
    out = transport(psi_s, psi_t, h_s, h_t)
    assert torch.equal(out[:, :, 2, 3], psi_t[:, :, 2, 3])
    h_s = zero.clone()
    h_s[:, 1, 5, 5] = 1.0
    out = transport(psi_s, psi_t, h_s, zero)
    assert not out[:, :, 5, 5].any()


def test_transport_shape_errors():
    a = torch.zeros(1, 2, 4, 4)
    with pytest.raises(ValueError):
        transport(a, torch.zeros(1, 2, 4, 5), a, a)
    with pytest.raises(ValueError):
        transport(a, a, torch.zeros(1, 1, 3, 4), a)


def test_source_branch_detached():
    spec = NetworkSpec(keypoints=2)
    # eval mode: in training, shared batch statistics couple the two frames
    model = init_weights(Transporter(spec), 0).eval()
    src = torch.rand(2, 4, 16, 16, requires_grad=True)
    tgt = torch.rand(2, 4, 16, 16, requires_grad=True)
    model(src, tgt).sum().backward()
    assert src.grad is None or not src.grad.any()
    assert tgt.grad.abs().sum() > 0


def test_loss_examples(rng):
    t = torch.from_numpy(rng.random((3, 1, 5, 4)))
    assert reconstruction_loss(t, t).item() == 0.0
    assert reconstruction_loss(t + 0.1, t).item() == pytest.approx(0.01, abs=1e-12)
    p = torch.from_numpy(rng.random((3, 1, 5, 4)))
    total = 0.0
    for b in range(3):
        for i in range(5):
            for j in range(4):
                total += (p[b, 0, i, j].item() - t[b, 0, i, j].item()) ** 2
    assert reconstruction_loss(p, t).item() == pytest.approx(total / 60, rel=1e-12)
    with pytest.raises(ValueError):
        reconstruction_loss(p, t[:2])


# -- gradient audit ------------------------------------------------------------------

def test_gradient_audit_all_ops():
    worst = run_audit(instances=2)
    assert set(worst) >= {"conv", "relu", "batchnorm", "softargmax", "gaussian", "transport", "mse", "refinenet"}
    assert max(worst.values()) < 1.0, worst


class _WrongSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2.02 * x


def test_audit_catches_a_wrong_gradient():
    x = torch.linspace(0.5, 1.5, 6, dtype=torch.float64)
    assert max_violation(lambda v: _WrongSquare.apply(v).sum(), [x]) > 1.0
    assert max_violation(lambda v: (v * v).sum(), [x]) < 1.0


# -- schedule, inference, checkpoint ----------------------------------------------------

def test_learning_rate_schedule():
    assert learning_rate(0) == 0.001
    assert learning_rate(9) == 0.001
    assert abs(learning_rate(10) - 0.00095) <= 1e-12
    assert abs(learning_rate(99) - 0.001 * 0.95**9) <= 1e-12


def test_train_config_defaults_and_checks():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.train_pairs, cfg.val_pairs, cfg.pair_separation) == (100, 16, 1024, 512, 4)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_corner_and_centre_mapping():
    np.testing.assert_array_equal(normalized_to_pixels([[-1, -1]], (256, 256)), [[0, 0]])
    np.testing.assert_array_equal(normalized_to_pixels([[0, 0]], (256, 256)), [[127.5, 127.5]])
    np.testing.assert_array_equal(KeypointSet(np.array([[1.0, 1.0]]), (256, 256)).to_pixels(), [[255, 255]])
    with pytest.raises(ValueError):
        KeypointSet(np.array([[1.5, 0.0]]), (8, 8))


def test_infer_returns_k_keypoints_per_frame(rng):
    model = init_weights(Transporter(NetworkSpec()), 0)
    kps = infer_keypoint_sets(rng.random((3, 32, 32)), model)
    assert len(kps) == 3 and all(len(k) == 10 for k in kps)
    assert all(k.source_resolution == (32, 32) for k in kps)


def test_checkpoint_round_trip(tmp_path):
    spec = NetworkSpec(keypoints=3)
    model = init_weights(Transporter(spec), 4)
    opt = torch.optim.Adam(model.parameters())
    model(torch.rand(2, 4, 16, 16), torch.rand(2, 4, 16, 16)).mean().backward()
    opt.step()
    path = tmp_path / "m.ustp"
    save_checkpoint(path, model, opt)
    fresh = load_checkpoint(path, Transporter(spec))
    for k, v in model.state_dict().items():
        assert torch.equal(v, fresh.state_dict()[k]), k
    records = read_records(path)
    assert any(k.startswith("optim.exp_avg.") for k in records)


def test_checkpoint_bit_layout(tmp_path):
    from usbone.transporter import write_records

    path = tmp_path / "r.ustp"
    write_records(path, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = path.read_bytes()
    assert raw[:4] == b"USTP"
    assert struct.unpack("<II", raw[4:12]) == (1, 1) and raw[12:13] == b"w"
    assert struct.unpack("<III", raw[13:25]) == (2, 2, 3)
    np.testing.assert_array_equal(np.frombuffer(raw[25:], "<f4"), np.arange(6))


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ustp"
    bad.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad, Transporter())
    trunc = tmp_path / "t.ustp"
    trunc.write_bytes(b"USTP" + struct.pack("<II", 1, 50))
    with pytest.raises(CheckpointError):
        read_records(trunc)


# -- training ---------------------------------------------------------------------

def _tiny_run(tmp_path, **kw):
    seq, _ = generate(PhantomConfig.scaled(16, frames=12, seed=1))
    cfg = TrainConfig(epochs=3, batch_size=4, train_pairs=8, val_pairs=4, seed=3, **kw)
    return train([seq], cfg, NetworkSpec(keypoints=2), out_dir=tmp_path)


def test_train_writes_metrics_and_checkpoint(tmp_path):
    result = _tiny_run(tmp_path)
    lines = [json.loads(s) for s in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1, 2]
    assert set(lines[0]) == {"epoch", "lr", "train_loss", "val_loss"}
    assert len(result.step_losses) == 3 * 2
    load_checkpoint(tmp_path / "checkpoint.ustp", Transporter(NetworkSpec(keypoints=2)))


def test_train_deterministic(tmp_path):
    a = _tiny_run(tmp_path / "a")
    b = _tiny_run(tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert a.step_losses == b.step_losses


def test_train_rejects_empty_and_short():
    with pytest.raises(ValueError):
        train([], TrainConfig(epochs=1))
    seq, _ = generate(PhantomConfig.scaled(16, frames=4, seed=0))
    with pytest.raises(ValueError):
        train([seq], TrainConfig(epochs=1, pair_separation=4), NetworkSpec(keypoints=2))


def test_non_finite_loss_aborts(tmp_path):
    with pytest.raises(FloatingPointError):
        _tiny_run(tmp_path, learning_rate=1e30)
