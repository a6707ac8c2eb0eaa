import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ganatt.datasets import LinearBenchmarkSpec, ObservationalDataset, generate_linear
from ganatt.gan import (
    MODEL_MAGIC,
    DimensionMismatchError,
    ModelLoadError,
    TrainConfig,
    TrainingError,
    discriminator_loss,
    discriminator_step,
    load_model,
    save_model,
    synthesize,
    train,
)
from ganatt.metrics import inverted_ks
from ganatt.numerics import AdamState, FeedforwardNet, forward

SMALL = dict(generator_hidden=(16,), discriminator_hidden=(16,), noise_dim=4, batch_size=32)


def _gauss(n=5000, seed=0):
    rng = np.random.default_rng(seed)
    # the outcome only needs nonzero spread for standardization
    return ObservationalDataset(rng.normal(size=(n, 1)), 0.5 + 0.01 * rng.normal(size=n), rng.random(n) < 0.5)


@pytest.fixture(scope="module")
def tiny_model():
    model, _ = train(_gauss(400), TrainConfig(epochs=2, **SMALL))
    return model


def test_zero_epochs_returns_initialization():
    cfg = TrainConfig(epochs=0, ema_decay=0.0, seed=11, **SMALL)
    model, log = train(_gauss(200), cfg)
    rng = np.random.default_rng(11)
    gen = FeedforwardNet.initialize([4 + 2, 16, 2], rng, "relu", "linear")
    disc = FeedforwardNet.initialize([2 + 2, 16, 1], rng, "relu", "sigmoid")
    assert all(np.array_equal(a, b) for a, b in zip(model.generator.params, gen.params))
    assert all(np.array_equal(a, b) for a, b in zip(model.discriminator.params, disc.params))
    assert log.steps == 0
    assert np.isfinite(synthesize(model, 1, 50).covariates).all()


def test_synthesize_row_counts(tiny_model):
    with pytest.raises(ValueError):
        synthesize(tiny_model, 0, 0)
    one = synthesize(tiny_model, 1, 1)
    assert len(one) == 1 and one.treatment[0] == 1 and np.isfinite(one.outcomes).all()


def test_synthesize_is_deterministic(tiny_model):
    a = synthesize(tiny_model, 0, 300, seed=4)
    b = synthesize(tiny_model, 0, 300, seed=4)
    assert np.array_equal(a.covariates, b.covariates) and np.array_equal(a.outcomes, b.outcomes)


def test_synthesize_chunking_does_not_change_rows(tiny_model):
    a = synthesize(tiny_model, 1, 250, seed=2, chunk=250)
    b = synthesize(tiny_model, 1, 250, seed=2, chunk=1000)
    assert np.array_equal(a.covariates, b.covariates)


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=2, seed=3, **SMALL)
    m1, l1 = train(_gauss(300), cfg)
    m2, l2 = train(_gauss(300), cfg)
    assert l1.generator_loss == l2.generator_loss
    assert all(np.array_equal(a, b) for a, b in zip(m1.generator.params, m2.generator.params))


def test_save_load_round_trip(tmp_path, tiny_model):
    save_model(tiny_model, tmp_path / "m.gan")
    back = load_model(tmp_path / "m.gan", expected_data_dim=2)
    a = synthesize(tiny_model, 1, 100, seed=7)
    b = synthesize(back, 1, 100, seed=7)
    assert np.array_equal(a.covariates, b.covariates) and np.array_equal(a.outcomes, b.outcomes)


def test_truncated_file_is_load_error(tmp_path, tiny_model):
    save_model(tiny_model, tmp_path / "m.gan")
    raw = (tmp_path / "m.gan").read_bytes()
    for cut in (3, 20, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.gan").write_bytes(raw[:cut])
        with pytest.raises(ModelLoadError):
            load_model(tmp_path / "t.gan")


def test_corrupt_payload_is_load_error(tmp_path, tiny_model):
    save_model(tiny_model, tmp_path / "m.gan")
    raw = bytearray((tmp_path / "m.gan").read_bytes())
    raw[-5] ^= 0xFF
    (tmp_path / "c.gan").write_bytes(bytes(raw))
    with pytest.raises(ModelLoadError, match="checksum"):
        load_model(tmp_path / "c.gan")


def _rewrite_header(raw: bytes, edit) -> bytes:
    pos = len(MODEL_MAGIC)
    version, hlen = struct.unpack_from("<HI", raw, pos)
    header = json.loads(raw[pos + 6:pos + 6 + hlen])
    edit(header)
    hb = json.dumps(header, sort_keys=True).encode()
    return raw[:pos] + struct.pack("<HI", version, len(hb)) + hb + raw[pos + 6 + hlen:]


def test_dimension_mismatch(tmp_path, tiny_model):
    save_model(tiny_model, tmp_path / "m.gan")
    with pytest.raises(DimensionMismatchError):
        load_model(tmp_path / "m.gan", expected_data_dim=3)
    raw = (tmp_path / "m.gan").read_bytes()
    (tmp_path / "d.gan").write_bytes(_rewrite_header(raw, lambda h: h.update(data_dim=5)))
    with pytest.raises(DimensionMismatchError):
        load_model(tmp_path / "d.gan")


def test_version_mismatch(tmp_path, tiny_model):
    save_model(tiny_model, tmp_path / "m.gan")
    raw = bytearray((tmp_path / "m.gan").read_bytes())
    struct.pack_into("<H", raw, len(MODEL_MAGIC), 99)
    (tmp_path / "v.gan").write_bytes(bytes(raw))
    with pytest.raises(ModelLoadError, match="version"):
        load_model(tmp_path / "v.gan")


def test_degenerate_inputs_rejected():
    data = _gauss(100)
    flat = ObservationalDataset(np.ones((100, 1)), data.outcomes, data.treatment)
    with pytest.raises(TrainingError, match="zero variance"):
        train(flat, TrainConfig(epochs=1, **SMALL))
    with pytest.raises(TrainingError):
        train(data.subset(np.zeros(100, bool)), TrainConfig(**SMALL))
    with pytest.raises(TrainingError):
        train(data, TrainConfig(batch_size=500))


def test_discriminator_loss_drops_on_separable_batch(rng):
    disc = FeedforwardNet.initialize([3, 8, 1], rng, "relu", "sigmoid")
    real = np.column_stack([rng.normal(3, 0.1, (64, 1)), np.tile([1.0, 0.0], (64, 1))])
    fake = np.column_stack([rng.normal(-3, 0.1, (64, 1)), np.tile([1.0, 0.0], (64, 1))])
    before = discriminator_step(disc, AdamState(learning_rate=1e-2), real, fake)
    assert before == pytest.approx(discriminator_loss(FeedforwardNet.initialize([3, 8, 1], np.random.default_rng(12345), "relu", "sigmoid"), real, fake))
    assert discriminator_loss(disc, real, fake) < before


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**20), scale=st.floats(1e-3, 1e3))
def test_discriminator_output_in_unit_interval(seed, scale, tiny_model):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=scale, size=(20, tiny_model.discriminator.input_dim))
    out = forward(tiny_model.discriminator, x)
    assert np.all((out > 0) & (out < 1))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), group=st.sampled_from([0, 1]))
def test_generated_rows_finite(seed, group, tiny_model):
    s = synthesize(tiny_model, group, 64, seed=seed)
    assert np.isfinite(s.covariates).all() and np.isfinite(s.outcomes).all()


def test_discrete_covariate_generated_from_categories():
    rng = np.random.default_rng(0)
    n = 3000
    b = (rng.random(n) < 0.3).astype(float)
    x = np.column_stack([rng.normal(size=n), b])
    y = x[:, 0] + 2 * b + 0.1 * rng.normal(size=n)
    data = ObservationalDataset(x, y, rng.random(n) < 0.5, ("z", "flag"))
    model, _ = train(data, TrainConfig(epochs=20, seed=1))
    assert [c.kind for c in model.columns] == ["continuous", "discrete", "continuous"]
    s = synthesize(model, 0, 5000, seed=3)
    assert set(np.unique(s.covariates[:, 1])) <= {0.0, 1.0}
    assert abs(s.covariates[:, 1].mean() - 0.3) < 0.1


@pytest.mark.slow
def test_one_dimensional_gaussian_fit():
    data = _gauss(5000, seed=1)
    model, _ = train(data, TrainConfig(epochs=100, seed=0))
    s = synthesize(model, 0, 20_000, seed=5)
    x = s.covariates[:, 0]
    fresh = np.random.default_rng(99).normal(size=20_000)
    assert abs(x.mean() - fresh.mean()) <= 0.1
    assert abs(x.std() - fresh.std()) <= 0.15


@pytest.fixture(scope="module")
def linear_model():
    data = generate_linear(LinearBenchmarkSpec(n0=5000, n1=5000, seed=21))
    model, log = train(data, TrainConfig(epochs=60, seed=2))
    return data, model, log


@pytest.mark.slow
def test_conditioning_is_effective(linear_model):
    data, model, _ = linear_model
    gap_real = data.group(1).outcomes.mean() - data.group(0).outcomes.mean()
    gap_synth = synthesize(model, 1, 50_000, seed=1).outcomes.mean() - synthesize(model, 0, 50_000, seed=2).outcomes.mean()
    assert abs(gap_synth - gap_real) <= 0.3


@pytest.mark.slow
def test_synthetic_group_means_close_to_real(linear_model):
    data, model, _ = linear_model
    for g in (0, 1):
        assert abs(synthesize(model, g, 200_000, seed=g).outcomes.mean() - data.group(g).outcomes.mean()) <= 0.15


@pytest.mark.slow
def test_control_group_fidelity_against_held_out():
    spec = LinearBenchmarkSpec(n0=10_000, n1=10, seed=31)
    control = generate_linear(spec).group(0)
    model, _ = train(control, TrainConfig(epochs=60, seed=0))
    held = generate_linear(LinearBenchmarkSpec(n0=10_000, n1=10, seed=32)).group(0)
    s = synthesize(model, 0, 10_000, seed=4)
    assert inverted_ks(held.covariates[:, 0], s.covariates[:, 0]) >= 0.95
    assert inverted_ks(held.outcomes, s.outcomes) >= 0.95


def test_training_log_and_restarts(tmp_path):
    cfg = TrainConfig(epochs=4, snapshot_interval=2, restarts=2, **SMALL)
    _, log = train(_gauss(300), cfg)
    assert log.epochs == [1, 2, 3, 4]
    assert len(log.restart_distances) == 2
    assert log.chosen_restart == int(np.argmin(log.restart_distances))
    assert [s["epoch"] for s in log.snapshots] == [2, 4]
    log.write_csv(tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "epoch,generator_loss,discriminator_loss"
