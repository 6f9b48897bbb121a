import numpy as np
import pytest

import evc


@pytest.fixture(scope="module")
def model():
    return evc.Model.build("small", "small", divisor=16, seed=3)


def test_round_trip_keeps_size(model):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(40, 72, 3), dtype=np.uint8)
    data = model.compress(img, rate=1)
    out = model.decompress(data)
    assert out.shape == img.shape
    assert out.dtype == np.uint8
    assert 0 < evc.psnr(img, out) <= 100


def test_rates_and_schemes(model):
    steps = [model.quant_step(r) for r in range(model.rate_count)]
    assert steps == sorted(steps, reverse=True)
    assert model.encoder_widths == [4, 4, 8, 12]
    counts = model.param_counts()
    assert counts["decoder"] > counts["encoder"]


def test_checkpoint(model, tmp_path):
    path = str(tmp_path / "m.evck")
    model.save(path)
    assert evc.Model.load(path).digest() == model.digest()


def test_corrupt_stream(model):
    with pytest.raises(evc.DecodeError):
        model.decompress(b"EVC1 not a stream")


def test_metrics():
    curve = [(0.1, 28.0), (0.2, 31.0), (0.4, 34.2), (0.8, 37.1)]
    assert abs(evc.bd_rate(curve, curve)) < 1e-9
    doubled = [(2 * b, p) for b, p in curve]
    assert abs(evc.bd_rate(doubled, curve) - 100.0) < 0.1
    assert round(evc.relative_improvement(1.1, -0.4, -1.1)) == 68
    assert evc.padded_size(1920, 1080) == (1920, 1088)
    assert evc.bpp(1000, 100, 100) == pytest.approx(0.8)


def test_sparsity_loss():
    assert evc.sparsity_loss(1.0) == 0.5
    assert evc.sparsity_grad(1.0) == 0.0
    assert evc.sparsity_grad(0.25, "l2") == 0.25
