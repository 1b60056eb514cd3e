import numpy as np
import pytest

from physpan import autodiff as ad
from physpan import spanselect as ss
from physpan.autodiff import Tape, Tensor
from physpan.errors import DomainError, ShapeError
from physpan.rng import SplitMix64

from fdcheck import check_gradients


def brute_force_weights(p_tilde: np.ndarray, q_tilde: np.ndarray) -> np.ndarray:
    """O(T^2) oracle: mass of all (start a <= t, end b >= t) pairs at each t."""
    t_len = len(p_tilde)
    outer = np.outer(p_tilde, q_tilde)
    return np.array([outer[:t + 1, t:].sum() for t in range(t_len)])


def random_dist(rng: np.random.Generator, t_len: int) -> np.ndarray:
    v = rng.uniform(0.0, 1.0, t_len) + 1e-9
    return v / v.sum()


# ---------------------------------------------------------------------------
# span_distributions


def test_zero_weights_give_uniform_start_distribution():
    feats = Tensor(np.random.default_rng(0).uniform(-1, 1, (6, 9)))
    p_tilde, q_tilde = ss.span_distributions(feats, Tensor(np.zeros(6)), Tensor(np.zeros(6)))
    assert np.allclose(p_tilde.data, 1.0 / 9, atol=1e-15)
    assert np.allclose(q_tilde.data, 1.0 / 9, atol=1e-15)


def test_single_frame_is_certain():
    feats = Tensor(np.random.default_rng(1).uniform(-1, 1, (4, 1)))
    p_tilde, q_tilde = ss.span_distributions(feats, Tensor(np.ones(4)), Tensor(np.ones(4)))
    assert p_tilde.data.tolist() == [1.0]
    assert q_tilde.data.tolist() == [1.0]


def test_span_distribution_gradcheck():
    feats = Tensor(np.random.default_rng(2).uniform(-1, 1, (5, 7)))
    w_p = Tensor(np.random.default_rng(3).uniform(-0.5, 0.5, 5), requires_grad=True)
    proj = Tensor(np.random.default_rng(4).uniform(-1, 1, 7))

    def loss():
        p_tilde, _ = ss.span_distributions(feats, w_p, Tensor(np.zeros(5)))
        return ad.sum_all(ad.mul(p_tilde, proj))

    assert check_gradients(loss, [w_p]) < 1e-6


# ---------------------------------------------------------------------------
# span_weights


def test_point_mass_span_is_uniform_interior():
    p_tilde = Tensor([0.0, 0.0, 1.0, 0.0, 0.0])
    q_tilde = Tensor([0.0, 0.0, 0.0, 0.0, 1.0])
    _, _, _, r = ss.span_weights(p_tilde, q_tilde, eps=1e-8)
    assert np.allclose(r.data, [0, 0, 1 / 3, 1 / 3, 1 / 3], atol=1e-7)


def test_uniform_inputs_match_threshold_profile():
    for n in (1, 2, 5, 37):
        uniform = Tensor(np.full(n, 1.0 / n))
        _, _, _, r = ss.span_weights(uniform, Tensor(uniform.data.copy()), eps=0.0)
        assert np.max(np.abs(r.data - ss.threshold_profile(n))) < 1e-12


def test_monotone_prefix_and_suffix():
    rng = np.random.default_rng(5)
    for _ in range(25):
        t_len = int(rng.integers(1, 30))
        p, q, _, _ = ss.span_weights(Tensor(random_dist(rng, t_len)),
                                     Tensor(random_dist(rng, t_len)))
        assert np.all(np.diff(p.data) >= -1e-15)
        assert np.all(np.diff(q.data) <= 1e-15)
        assert abs(p.data[-1] - 1.0) < 1e-9
        assert abs(q.data[0] - 1.0) < 1e-9


def test_against_brute_force_oracle():
    rng = np.random.default_rng(6)
    for _ in range(200):
        t_len = int(rng.integers(1, 51))
        p_tilde = random_dist(rng, t_len)
        q_tilde = random_dist(rng, t_len)
        _, _, r_tilde, _ = ss.span_weights(Tensor(p_tilde), Tensor(q_tilde))
        oracle = brute_force_weights(p_tilde, q_tilde)
        assert np.max(np.abs(r_tilde.data - oracle)) < 1e-12


def test_negative_probability_rejected():
    with pytest.raises(DomainError):
        ss.span_weights(Tensor([-0.1, 1.1]), Tensor([0.5, 0.5]))


# ---------------------------------------------------------------------------
# span_representation / classify


def test_one_hot_weights_pick_column():
    feats = Tensor(np.random.default_rng(7).uniform(-1, 1, (4, 5)))
    m = ss.span_representation(feats, Tensor([0.0, 0.0, 1.0, 0.0, 0.0]))
    assert np.array_equal(m.data, feats.data[:, 2])


def test_equal_columns_reduce_to_the_column():
    col = np.random.default_rng(8).uniform(-1, 1, 4)
    feats = Tensor(np.tile(col[:, None], (1, 6)))
    r = np.full(6, 1.0 / 6)
    m = ss.span_representation(feats, Tensor(r))
    assert np.allclose(m.data, col, atol=1e-12)


def test_span_representation_gradcheck():
    feats = Tensor(np.random.default_rng(9).uniform(-1, 1, (4, 6)), requires_grad=True)
    r = Tensor(random_dist(np.random.default_rng(10), 6), requires_grad=True)
    proj = Tensor(np.random.default_rng(11).uniform(-1, 1, 4))
    assert check_gradients(lambda: ad.sum_all(ad.mul(ss.span_representation(feats, r), proj)),
                           [feats, r]) < 1e-6


def test_classify_symmetries():
    ms = [Tensor(np.zeros(4)) for _ in range(3)]
    _, y_hat = ss.classify(ms, Tensor(np.ones(4)))
    assert y_hat.item() == 0.5

    rng = np.random.default_rng(12)
    ms = [Tensor(rng.uniform(-1, 1, 4)) for _ in range(3)]
    w = Tensor(rng.uniform(-1, 1, 4))
    _, pos = ss.classify(ms, w)
    _, neg = ss.classify(ms, Tensor(-w.data))
    assert abs(pos.item() + neg.item() - 1.0) < 1e-12


def test_classify_known_value():
    ms = [Tensor([1.0, 0.0]), Tensor([-1.0, 0.0]), Tensor([2.0, 0.0])]
    zs, y_hat = ss.classify(ms, Tensor([1.0, 0.0]))
    assert [z.item() for z in zs] == [1.0, -1.0, 2.0]
    assert abs(y_hat.item() - 0.8807970779778823) < 1e-12


# ---------------------------------------------------------------------------
# conciseness penalty


def test_penalty_identical_spans_zero():
    rng = np.random.default_rng(13)
    r = random_dist(rng, 8)
    assert ss.conciseness_penalty([Tensor(r), Tensor(r.copy())]).item() == 0.0


def test_penalty_disjoint_one_hot():
    out = ss.conciseness_penalty([Tensor([1.0, 0.0]), Tensor([0.0, 1.0])])
    assert abs(out.item() - np.log(2)) < 1e-12


def test_penalty_single_span_is_zero():
    assert ss.conciseness_penalty([Tensor([0.5, 0.5])]).item() == 0.0


def test_penalty_permutation_invariant():
    rng = np.random.default_rng(14)
    rs = [Tensor(random_dist(rng, 6)) for _ in range(3)]
    a = ss.conciseness_penalty(rs).item()
    b = ss.conciseness_penalty([rs[1], rs[2], rs[0]]).item()
    assert abs(a - b) < 1e-14


# ---------------------------------------------------------------------------
# threshold profile and salience


def test_threshold_profile_closed_forms():
    assert np.max(np.abs(ss.threshold_profile(2) - [0.5, 0.5])) < 1e-12
    assert np.max(np.abs(ss.threshold_profile(3) - [0.3, 0.4, 0.3])) < 1e-12


def test_threshold_profile_37():
    prof = ss.threshold_profile(37)
    assert abs(prof.sum() - 1.0) < 1e-12
    assert np.max(np.abs(prof - prof[::-1])) < 1e-15
    assert int(np.argmax(prof)) == 18  # center (1-based position 19)


def test_threshold_profile_rejects_empty():
    with pytest.raises(DomainError):
        ss.threshold_profile(0)


def test_salient_empty_for_uniform_attention():
    n = 12
    uniform = Tensor(np.full(n, 1.0 / n))
    _, _, _, r = ss.span_weights(uniform, Tensor(uniform.data.copy()), eps=1e-8)
    assert ss.select_salient_frames(r, ss.threshold_profile(n)) == []


def test_salient_point_span_case():
    r = np.array([0.0, 1 / 3, 1 / 3, 1 / 3, 0.0])
    assert ss.select_salient_frames(r, ss.threshold_profile(5)) == [1, 2, 3]


def test_salient_one_hot():
    r = np.zeros(9)
    r[4] = 1.0
    assert ss.select_salient_frames(r, ss.threshold_profile(9)) == [4]


# ---------------------------------------------------------------------------
# full head


def test_prediction_ignores_frames_outside_span_support():
    rng = np.random.default_rng(15)
    d, t_len = 6, 10
    feats = rng.uniform(-1, 1, (d, t_len))
    w_z = Tensor(rng.uniform(-1, 1, d))
    p_tilde = np.zeros(t_len)
    q_tilde = np.zeros(t_len)
    p_tilde[3] = 1.0
    q_tilde[6] = 1.0

    def predict(f):
        _, _, _, r = ss.span_weights(Tensor(p_tilde), Tensor(q_tilde))
        m = ss.span_representation(Tensor(f), r)
        _, y_hat = ss.classify([m], w_z)
        return y_hat.item()

    base = predict(feats)
    shuffled = feats.copy()
    outside = [0, 1, 2, 7, 8, 9]
    shuffled[:, outside] = shuffled[:, list(reversed(outside))]
    assert abs(predict(shuffled) - base) < 1e-9


def test_run_span_head_end_to_end_gradcheck():
    rng = SplitMix64(3)
    params = ss.SpanParams(feature_dim=5, n_spans=2, rng=rng)
    feats = Tensor(np.random.default_rng(16).uniform(-1, 1, (5, 6)), requires_grad=True)

    def loss():
        result = ss.run_span_head(feats, params)
        return ad.add(result.y_hat, ad.scale(result.penalty, 0.5))

    wrt = [feats] + list(params.parameters().values())
    assert check_gradients(loss, wrt) < 1e-4


def test_span_head_reports_all_fields():
    params = ss.SpanParams(feature_dim=4, n_spans=3, rng=SplitMix64(4))
    feats = Tensor(np.random.default_rng(17).uniform(-1, 1, (4, 8)))
    result = ss.run_span_head(feats, params)
    assert len(result.spans) == 3
    assert 0.0 < result.y_hat.item() < 1.0
    total_z = sum(rec.z.item() for rec in result.spans)
    assert abs(total_z - result.logit.item()) < 1e-12
    for rec in result.spans:
        assert rec.r.shape == (8,)
        assert float(np.sum(rec.r.data)) <= 1.0 + 1e-9
