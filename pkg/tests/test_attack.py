import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biasscan import tensor as T
from biasscan.attack import AttackConfig, fgsm_step, iterate_attack, paired_fgsm_step, seed_input
from biasscan.model import build_cnn
from biasscan.tensor import Tensor


class PixelModel:
    """Logits depend on pixel (0, 0) only: z_k = w_k * x[0, 0]."""

    def __init__(self, w):
        self.w = np.zeros((10, 784), np.float32)
        self.w[:, 0] = w

    def forward(self, x):
        return T.dense(T.flatten(x), Tensor(self.w), Tensor(np.zeros(10, np.float32)))

    def predict(self, images):
        return self.forward(Tensor(images)).data.argmax(axis=1)


def _w(target=3, value=1.0):
    w = np.zeros(10, np.float32)
    w[target] = value
    return w


def test_single_step_moves_only_the_influential_pixel():
    m = PixelModel(_w(3))
    x = np.full((1, 28, 28), 0.5, np.float32)
    out = fgsm_step(m, x, 3, 0.1)
    assert out.shape == (1, 28, 28)
    assert out[0, 0, 0] == pytest.approx(0.6)  # dJ/dx = p_3 - 1 < 0, so the pixel grows
    np.testing.assert_array_equal(out.ravel()[1:], 0.5)  # zero gradient, sign(0) = 0


def test_step_direction_flips_with_weight_sign():
    m = PixelModel(_w(3, -1.0))
    out = fgsm_step(m, np.full((1, 28, 28), 0.5, np.float32), 3, 0.1)
    assert out[0, 0, 0] == pytest.approx(0.4)


def test_paired_step_uses_target_minus_source():
    w = np.zeros(10, np.float32)
    w[3], w[4] = 1.0, 2.0
    m = PixelModel(w)
    x = np.full((1, 28, 28), 0.5, np.float32)
    # gradient of J(3) - J(4) is w_4 - w_3 = 1 > 0, so the pixel shrinks
    assert paired_fgsm_step(m, x, 3, 4, 0.1)[0, 0, 0] == pytest.approx(0.4)
    with pytest.raises(ValueError):
        paired_fgsm_step(m, x, 3, 3, 0.1)


def test_iterations_accumulate_and_clip():
    m = PixelModel(_w(7))
    cfg = AttackConfig(epsilon=0.3, iterations=5, seed_kind="blank", samples_per_cell=1)
    x_adv, pred = iterate_attack(m, np.zeros((1, 28, 28), np.float32), 7, cfg)
    assert x_adv[0, 0, 0] == pytest.approx(1.0)
    assert pred == 7 and isinstance(pred, int)
    x_batch, preds = iterate_attack(m, np.zeros((4, 1, 28, 28), np.float32), 7, cfg)
    assert preds.shape == (4,) and (x_batch[:, 0, 0, 0] == 1.0).all()


def test_prediction_is_reported_even_when_attack_fails():
    m = PixelModel(_w(2))
    cfg = AttackConfig(epsilon=0.0, iterations=1, seed_kind="blank", samples_per_cell=1)
    _, pred = iterate_attack(m, np.zeros((1, 28, 28), np.float32), 2, cfg)
    assert pred == 0  # all logits tie at zero, argmax picks 0


def test_config_validation_and_tag():
    for bad in ({"epsilon": -0.1}, {"epsilon": 1.5}, {"iterations": 0}, {"samples_per_cell": 0},
                {"seed_kind": "zeros"}, {"loss_kind": "untargeted"}):
        with pytest.raises(ValueError):
            AttackConfig(**bad)
    assert AttackConfig().tag == "data_eps0.1_it10_n1000"
    with pytest.raises(ValueError):
        iterate_attack(PixelModel(_w()), np.zeros((1, 28, 28), np.float32), 1, AttackConfig(loss_kind="paired"))
    with pytest.raises(ValueError):
        fgsm_step(PixelModel(_w()), np.zeros((1, 28, 28), np.float32), 1, 2.0)


def test_seed_inputs(tiny_dataset):
    rng = np.random.default_rng(0)
    assert not seed_input("blank").any()
    noise = seed_input("noise", rng=rng)
    assert noise.shape == (1, 28, 28) and 0 <= noise.min() and noise.max() < 1
    img = seed_input("data", tiny_dataset, rng)
    assert any(np.array_equal(img, x) for x in tiny_dataset.images)
    with pytest.raises(ValueError):
        seed_input("data", None, rng)
    with pytest.raises(ValueError):
        seed_input("sketch", tiny_dataset, rng)


_cnn = build_cnn(6)


@settings(max_examples=30, deadline=None)
@given(eps=st.floats(0, 1), iters=st.integers(1, 4), seed=st.integers(0, 999), target=st.integers(0, 9),
       paired=st.booleans())
def test_fgsm_invariants_on_the_cnn(eps, iters, seed, target, paired):
    x0 = np.random.default_rng(seed).random((2, 1, 28, 28), dtype=np.float32)
    kind = "paired" if paired else "targeted"
    source = (target + 1) % 10 if paired else None
    cfg = AttackConfig(epsilon=eps, iterations=iters, loss_kind=kind, samples_per_cell=1)
    x_adv, _ = iterate_attack(_cnn, x0, target, cfg, y_source=source)
    assert x_adv.min() >= 0 and x_adv.max() <= 1
    assert np.abs(x_adv - x0).max() <= iters * eps + 1e-6
    zero = AttackConfig(epsilon=0.0, iterations=iters, loss_kind=kind, samples_per_cell=1)
    np.testing.assert_array_equal(iterate_attack(_cnn, x0, target, zero, y_source=source)[0], x0)
