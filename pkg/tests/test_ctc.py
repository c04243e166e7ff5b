import math

import numpy as np
import pytest

from lwfs import autodiff as ad
from lwfs import ctc


def _random_posteriors(rng, T, V):
    logits = rng.normal(size=(T, V))
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def test_min_frames():
    assert ctc.min_frames([]) == 0
    assert ctc.min_frames([1, 2]) == 2
    assert ctc.min_frames([1, 1]) == 3
    assert ctc.min_frames([1, 1, 2, 2]) == 6


def test_extended_labels():
    assert ctc.extended_labels([1, 2]).tolist() == [0, 1, 0, 2, 0]
    assert ctc.extended_labels([]).tolist() == [0]


def test_loss_single_frame():
    loss, _ = ctc.ctc_loss(np.array([[0.4, 0.6]]), [1])
    assert loss == 0.5108256237659907


def test_loss_two_uniform_frames():
    # paths collapsing to [1]: (b,1), (1,b), (1,1) -> mass 3/4
    loss, _ = ctc.ctc_loss(np.full((2, 2), 0.5), [1])
    assert loss == 0.2876820724517809


def test_loss_matches_brute_force():
    rng = np.random.default_rng(17)
    for _ in range(300):
        T = int(rng.integers(1, 7))
        V = int(rng.integers(2, 5))
        L = int(rng.integers(0, 4))
        y = rng.integers(1, V, size=L).tolist()
        post = _random_posteriors(rng, T, V)
        brute = ctc.ctc_brute_force(post, y)
        if T < ctc.min_frames(y):
            assert brute == math.inf
            with pytest.raises(ctc.InfeasibleLength):
                ctc.ctc_loss(post, y)
            continue
        loss, _ = ctc.ctc_loss(post, y)
        assert abs(loss - brute) <= 1e-9


def test_brute_force_guard():
    post = np.full((9, 2), 0.5)
    with pytest.raises(ValueError, match="T=9"):
        ctc.ctc_brute_force(post, [1])


def test_alpha_beta_totals_agree():
    rng = np.random.default_rng(19)
    for _ in range(40):
        T = int(rng.integers(3, 20))
        V = int(rng.integers(2, 8))
        L = int(rng.integers(0, min(5, T // 2) + 1))
        y = rng.integers(1, V, size=L).tolist()
        if T < ctc.min_frames(y):
            continue
        lat = ctc.ctc_lattice(_random_posteriors(rng, T, V), y)
        assert abs(lat.log_z - lat.log_z_beta) < 1e-10


def test_trailing_blank_frame_preserves_loss():
    # a forced-blank frame extends every path with probability 1
    rng = np.random.default_rng(23)
    post = _random_posteriors(rng, 5, 4)
    pure_blank = np.zeros((1, 4))
    pure_blank[0, 0] = 1.0
    y = [2, 3]
    loss, _ = ctc.ctc_loss(post, y)
    loss_ext, _ = ctc.ctc_loss(np.vstack([post, pure_blank]), y)
    assert abs(loss - loss_ext) < 1e-12


def test_zero_probability_target():
    post = np.zeros((2, 3))
    post[:, 0] = 1.0
    loss, grad = ctc.ctc_loss(post, [1])
    assert loss == math.inf
    assert np.array_equal(grad, post)


def test_label_logprob_infeasible_is_neg_inf():
    assert ctc.label_logprob(np.full((2, 2), 0.5), [1, 1]) == -math.inf


def test_label_validation():
    post = np.full((3, 3), 1 / 3)
    with pytest.raises(ValueError, match="blank"):
        ctc.ctc_loss(post, [0])
    with pytest.raises(ValueError, match="vocab size 3"):
        ctc.ctc_loss(post, [3])
    with pytest.raises(ValueError, match="not an integer"):
        ctc.ctc_loss(post, [1.5])


def test_posterior_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        ctc.ctc_loss(np.array([[0.9, 0.2]]), [1])
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        ctc.ctc_loss(np.array([[1.1, -0.1]]), [1])
    with pytest.raises(ValueError, match="non-finite"):
        ctc.ctc_loss(np.array([[np.nan, 1.0]]), [1])
    with pytest.raises(ValueError, match="shape"):
        ctc.ctc_loss(np.array([0.5, 0.5]), [1])


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(29)
    z = ad.leaf(rng.normal(size=(6, 4)), name="z")
    y = [1, 3, 2]

    def build(leaf):
        return ctc.ctc_node(ad.log_softmax(leaf), y)

    assert ad.grad_check(build, z, eps=1e-5) < 1e-4


def test_closed_form_gradient_matches_graph():
    # ctc_loss returns d(-logP)/d(logits) assuming post = softmax(z)
    rng = np.random.default_rng(31)
    zdata = rng.normal(size=(5, 4))
    y = [2, 1]
    post = np.exp(zdata - np.logaddexp.reduce(zdata, axis=1, keepdims=True))
    loss, grad = ctc.ctc_loss(post, y)

    z = ad.leaf(zdata, name="z")
    node = ctc.ctc_node(ad.log_softmax(z), y)
    node.backward()
    assert abs(loss - float(node.data)) < 1e-12
    assert np.allclose(grad, z.grad, atol=1e-12)


def test_ctc_node_shape_validation():
    lp = ad.constant(np.log(np.full((2, 3, 2), 0.5)))
    with pytest.raises(ad.GraphError, match="ctc_node"):
        ctc.ctc_node(lp, [1])
    with pytest.raises(ctc.InfeasibleLength):
        ctc.ctc_node(ad.constant(np.log(np.full((1, 2), 0.5))), [1, 1])


def test_greedy_decode_collapse():
    rows = {
        "blank": [0.8, 0.1, 0.1],
        "one": [0.1, 0.8, 0.1],
        "two": [0.1, 0.1, 0.8],
    }
    post = np.array([rows["blank"], rows["one"], rows["one"], rows["blank"], rows["two"]])
    assert ctc.greedy_decode(post) == [1, 2]
    assert ctc.greedy_decode(np.array([rows["one"], rows["one"]])) == [1]
    assert ctc.greedy_decode(np.array([rows["blank"], rows["blank"]])) == []


def test_beam_one_equals_greedy_on_peaked():
    rng = np.random.default_rng(37)
    for _ in range(20):
        T = int(rng.integers(2, 8))
        picks = rng.integers(0, 3, size=T)
        post = np.full((T, 3), 0.025)
        post[np.arange(T), picks] = 0.95
        assert ctc.beam_decode(post, beam=1) == ctc.greedy_decode(post)


def test_beam_score_monotone_in_width():
    rng = np.random.default_rng(41)
    for _ in range(10):
        post = _random_posteriors(rng, 6, 4)
        scores = [ctc.beam_decode_scored(post, beam=b)[1] for b in (1, 2, 4, 16)]
        for lo, hi in zip(scores, scores[1:]):
            assert hi >= lo - 1e-12


def test_wide_beam_recovers_label_mass():
    # with the beam wider than the hypothesis space, the winner's score is
    # exactly its total label probability
    rng = np.random.default_rng(43)
    post = _random_posteriors(rng, 4, 3)
    labels, score = ctc.beam_decode_scored(post, beam=1000)
    assert abs(score - ctc.label_logprob(post, labels)) < 1e-10 or (
        labels == [] and abs(score - ctc.label_logprob(post, [])) < 1e-10)


def test_beam_validation():
    post = np.full((2, 2), 0.5)
    with pytest.raises(ValueError, match="beam width"):
        ctc.beam_decode(post, beam=0)
    lm = ctc.train_ngram_lm(["ab"], n=2, smoothing=0.1)
    with pytest.raises(ValueError, match="symbol"):
        ctc.beam_decode(post, lm=lm)


def test_lm_fusion_breaks_acoustic_tie():
    # outer frames are symmetric between "ab" and "ba"; the LM has only seen "ab"
    post = np.array([[0.02, 0.49, 0.49], [0.96, 0.02, 0.02], [0.02, 0.49, 0.49]])
    lm = ctc.train_ngram_lm(["ab"] * 5, n=2, smoothing=0.1)
    symbols = {1: "a", 2: "b"}
    fused = ctc.beam_decode(post, lm=lm, beam=8, lm_weight=1.0, symbols=symbols)
    assert fused == [1, 2]
    assert lm.seq_logp(["a", "b"]) > lm.seq_logp(["b", "a"])


def test_ngram_hand_counts():
    lm = ctc.train_ngram_lm(["ab", "ab", "ac"], n=2, smoothing=0.1)
    assert lm.vocab == ["a", "b", "c"]
    assert lm.logp("b", ["a"]) == math.log(2.1 / 3.3)
    assert lm.logp("c", ["a"]) == math.log(1.1 / 3.3)
    # empty history pads with the start marker
    assert lm.logp("a", []) == math.log(3.1 / 3.3)


def test_conditional_distribution_normalizes():
    lm = ctc.train_ngram_lm(["abc", "abd", "ad"], n=3, smoothing=0.25)
    for history in ([], ["a"], ["a", "b"], ["q", "zz"]):
        assert abs(sum(lm.cond_dist(history).values()) - 1.0) < 1e-12


def test_seq_logp_is_stepwise_sum():
    lm = ctc.train_ngram_lm(["ab", "ba"], n=2, smoothing=0.5)
    expected = lm.logp("a", []) + lm.logp("b", ["a"])
    assert lm.seq_logp(["a", "b"]) == expected


def test_fusion_logp_floor_for_unknown_token():
    lm = ctc.train_ngram_lm(["ab", "ab"], n=2, smoothing=0.1)
    assert lm.fusion_logp("a", []) == lm.logp("a", [])
    tot = 2  # both transcripts start with "a"
    floor = math.log(0.1 / (tot + 0.1 * len(lm.vocab)))
    assert lm.fusion_logp("zz", []) == floor
    with pytest.raises(ValueError, match="not in LM vocabulary"):
        lm.logp("zz", [])


def test_lm_save_load_round_trip(tmp_path):
    lm = ctc.train_ngram_lm(["abc", "cab", "bca"], n=3, smoothing=0.3)
    path = tmp_path / "lm.json"
    lm.save(path)
    lm2 = ctc.NGramLM.load(path)
    assert lm2.order == lm.order
    assert lm2.smoothing == lm.smoothing
    assert lm2.vocab == lm.vocab
    assert lm2.counts == lm.counts
    for tok in lm.vocab:
        for hist in ([], ["a"], ["b", "c"]):
            assert lm2.logp(tok, hist) == lm.logp(tok, hist)


def test_lm_validation():
    with pytest.raises(ValueError, match="order"):
        ctc.NGramLM(0, 0.1, ["a"])
    with pytest.raises(ValueError, match="smoothing"):
        ctc.NGramLM(2, 0.0, ["a"])
    with pytest.raises(ValueError, match="unique"):
        ctc.NGramLM(2, 0.1, ["a", "a"])
    with pytest.raises(ValueError, match="reserved"):
        ctc.NGramLM(2, 0.1, ["a", ctc.BOS])
    with pytest.raises(ValueError, match="empty"):
        ctc.train_ngram_lm([])
    with pytest.raises(ValueError, match="missing from vocab"):
        ctc.train_ngram_lm(["ab"], vocab=["a"])
