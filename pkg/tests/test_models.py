import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rprm.corpus import BowVector, ItemSequence, Review
from rprm.models import Model, ModelConfig, ModelKind, UnsupportedCapability, step_terms_reference
from rprm.numerics import grad_check
from tests.helpers import bow, random_sequence, seq_from

V = 10


def make(kind, seed=0, d=4, e=3, V=V, **kw):
    return Model.init(ModelConfig(kind, d=d, e=e, V=V, **kw), seed=seed, scale=0.5)


def randomize(model, rng, scale=0.5):
    for name in model.store.names():
        x = model.store[name]
        x[...] = rng.uniform(-scale, scale, x.shape)
    return model


def zero_all(model):
    for name in model.store.names():
        model.store[name][...] = 0.0
    return model


def test_capability_table():
    assert ModelKind.RPRM.uses_text_input and ModelKind.RPRM.has_text_head and ModelKind.RPRM.intensity_head
    assert ModelKind.LSTM_BOW.uses_text_input and ModelKind.LSTM_BOW.has_text_head
    assert not ModelKind.LSTM_BOW.intensity_head
    assert not ModelKind.RPP.uses_text_input and not ModelKind.RPP.has_text_head and ModelKind.RPP.intensity_head
    assert not (ModelKind.LSTM.uses_text_input or ModelKind.LSTM.has_text_head or ModelKind.LSTM.intensity_head)


def test_trivial_rprm_loss():
    Vb = 2000
    m = zero_all(make(ModelKind.RPRM, V=Vb))
    seq = seq_from([0.0, 1.0], [bow({3: 1}), bow({4: 1, 9: 1})])
    assert m.sequence_loss(seq) == pytest.approx(1 + 2 * math.log(Vb), rel=1e-14)


def test_sequence_loss_needs_two_reviews():
    with pytest.raises(ValueError):
        make(ModelKind.RPRM).sequence_loss(seq_from([1.0]))


@pytest.mark.parametrize("kind", [ModelKind.RPP, ModelKind.LSTM])
def test_text_blindness(kind):
    rng = np.random.default_rng(1)
    m = randomize(make(kind), rng)
    seq = random_sequence(rng, 5, V)
    other = seq_from(seq.times, [bow({int(rng.integers(V)): 3}) for _ in range(5)])
    assert m.sequence_loss(seq).tobytes() == m.sequence_loss(other).tobytes()
    assert m.predict_next_gap(seq.prefix(3)) == m.predict_next_gap(other.prefix(3))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(list(ModelKind)))
def test_loss_additivity_against_single_step_path(seed, kind):
    rng = np.random.default_rng(seed)
    m = randomize(make(kind, seed=seed), rng)
    seq = random_sequence(rng, int(rng.integers(2, 7)), V)
    time_terms, text_terms = step_terms_reference(m, seq)
    assert m.sequence_loss(seq) == pytest.approx(-(math.fsum(time_terms) + math.fsum(text_terms)), rel=1e-12)
    r = m.forward([seq])
    np.testing.assert_allclose(r.time_ll[0], time_terms, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(r.text_ll[0], text_terms, rtol=1e-12, atol=1e-13)


def test_rprm_loss_decomposes_into_time_and_text():
    rng = np.random.default_rng(2)
    m = randomize(make(ModelKind.RPRM), rng)
    seq = random_sequence(rng, 6, V)
    r = m.forward([seq])
    time_nll, text_nll = -r.time_ll.sum(), -r.text_ll.sum()
    assert r.loss == pytest.approx(time_nll + text_nll, abs=1e-10)
    # the text head does not touch the time part and vice versa
    m2 = Model(m.config, m.store.copy())
    m2.store["text.R"][...] += 0.3
    m2.store["text.b"][...] -= 0.7
    assert (-m2.forward([seq]).time_ll.sum()).tobytes() == time_nll.tobytes()
    m3 = Model(m.config, m.store.copy())
    m3.store["tpp.v"][...] *= 2.0
    m3.store["tpp.w"][...] = 0.05
    assert (-m3.forward([seq]).text_ll.sum()).tobytes() == text_nll.tobytes()


def test_batch_loss_is_mean_of_sequence_losses():
    rng = np.random.default_rng(3)
    m = randomize(make(ModelKind.LSTM_BOW), rng)
    seqs = [random_sequence(rng, n, V) for n in (2, 5, 3)]
    per = [m.sequence_loss(s) for s in seqs]
    assert m.forward(seqs).loss == pytest.approx(sum(per) / 3, rel=1e-12)
    np.testing.assert_allclose(m.per_sequence_nll(seqs), per, rtol=1e-12)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_variant_gradients(kind):
    rng = np.random.default_rng(4)
    m = randomize(make(kind), rng)
    seq = random_sequence(rng, 3, V)
    rep = grad_check(m.objective([seq]), m.store, fd_dtype=np.longdouble)
    assert rep.ok, rep.max_rel_error


def test_mean_reading_of_exponential_head_gradients():
    rng = np.random.default_rng(5)
    m = randomize(make(ModelKind.LSTM, exp_head_param="mean"), rng)
    rep = grad_check(m.objective([random_sequence(rng, 4, V)]), m.store, fd_dtype=np.longdouble)
    assert rep.ok, rep.max_rel_error


def test_time_only_variants_have_no_embedding():
    assert "cell.embed" not in make(ModelKind.RPP).store
    assert "text.R" not in make(ModelKind.LSTM).store


# ------------------------------------------------------------- prediction


def test_prediction_examples():
    m = zero_all(make(ModelKind.RPRM))
    m.store["tpp.b"][...] = math.log(2)
    assert m.predict_next_gap(seq_from([0.0, 3.0])) == pytest.approx(0.5, rel=1e-10)

    lstm = zero_all(make(ModelKind.LSTM))
    # softplus(b2) + MIN_RATE = 4 with zero hidden layer
    lstm.store["exp.b2"][...] = math.log(math.expm1(4.0 - 1e-6))
    assert lstm.predict_next_gap(seq_from([0.0, 3.0])) == pytest.approx(0.25, rel=1e-12)


def test_median_option():
    m = zero_all(make(ModelKind.RPP, gap_estimate="median"))
    assert m.predict_next_gap(seq_from([0.0])) == pytest.approx(math.log(2), rel=1e-12)


def test_prediction_ignores_later_events():
    rng = np.random.default_rng(6)
    m = randomize(make(ModelKind.RPRM), rng)
    seq = random_sequence(rng, 6, V)
    alt = seq_from(seq.times[:3] + [t + 5 for t in seq.times[3:]], list(r.bow for r in seq.reviews[:3]) + [bow({0: 9})] * 3)
    assert m.predict_next_gap(seq.prefix(3)) == m.predict_next_gap(alt.prefix(3))
    np.testing.assert_array_equal(m.predict_next_text(seq.prefix(3)), m.predict_next_text(alt.prefix(3)))


def test_predict_next_text():
    m = Model.init(ModelConfig(ModelKind.RPRM, d=4, e=3, V=V), seed=0, text_init="uniform")
    p = m.predict_next_text(seq_from([0.0, 1.0]))
    np.testing.assert_allclose(p, 1 / V, rtol=1e-14)
    rng = np.random.default_rng(7)
    p = randomize(m, rng, 2.0).predict_next_text(random_sequence(rng, 3, V))
    assert abs(p.sum() - 1) < 1e-12
    for kind in (ModelKind.RPP, ModelKind.LSTM):
        with pytest.raises(UnsupportedCapability):
            make(kind).predict_next_text(seq_from([0.0]))


# ------------------------------------------------------------- simulation


def test_simulate_horizon_zero_and_determinism():
    rng = np.random.default_rng(8)
    m = randomize(make(ModelKind.RPRM), rng)
    prefix = random_sequence(rng, 3, V)
    assert m.simulate(prefix, 0.0, np.random.default_rng(0)) == []
    a = m.simulate(prefix, 20.0, np.random.default_rng(3), review_lengths=(2, 4))
    b = m.simulate(prefix, 20.0, np.random.default_rng(3), review_lengths=(2, 4))
    assert a == b
    t0 = prefix.reviews[-1].time_days
    times = [t for t, _ in a]
    assert all(t0 < x <= t0 + 20 for x in times) and times == sorted(times)
    assert all(x.total_words in (2, 4) for _, x in a)


def test_simulate_constant_intensity_event_count():
    rate, horizon, runs = 0.5, 20.0, 1000
    m = zero_all(make(ModelKind.RPP, d=2))
    m.store["tpp.b"][...] = math.log(rate)
    rng = np.random.default_rng(9)
    prefix = seq_from([0.0])
    counts = np.array([len(m.simulate(prefix, horizon, rng)) for _ in range(runs)])
    expected = rate * horizon
    assert abs(counts.mean() - expected) < 3 * math.sqrt(expected / runs)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    m = randomize(make(ModelKind.LSTM_BOW, exp_head_param="mean"), rng)
    m.save(tmp_path / "m.json")
    m2 = Model.load(tmp_path / "m.json")
    assert m2.config.meta() == m.config.meta()
    seq = random_sequence(rng, 4, V)
    assert m2.sequence_loss(seq) == m.sequence_loss(seq)
