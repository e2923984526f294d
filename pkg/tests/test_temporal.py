import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from factories import finite_difference_error, make_tubelet
from tubeground.core import ContractError, GroundingSample, QueryEmbedding, VideoRecord
from tubeground.crg import decompose, pos_tag, tokenize
from tubeground.temporal import MASK_TOKEN, TemporalModel, Vocabulary, best_salient_run, clip_frame_bounds, \
    featurize_temporal, highlight, item_salience, mask_query, predict_bounds, reconstruction_loss, \
    reconstruction_loss_crg, reconstruction_nll


def _model(vocab, d_c=5, d_w=4, d=4, seed=0):
    return TemporalModel(d_c, d_w, vocab, d=d, seed=seed, max_len=16)


def _sample(rng, text, d_c=5, d_w=4, clips=6, vid="v"):
    toks = tokenize(text)
    q = QueryEmbedding(text, toks, rng.normal(size=(len(toks), d_w)), pos_tag(toks))
    video = VideoRecord(vid, 16 * clips, [make_tubelet(0, 0, 16 * clips, rng)], rng.normal(size=(clips, d_c)))
    return GroundingSample(video, q)


# -- highlighting ----------------------------------------------------------------

def test_highlight_trivial_cases():
    rng = np.random.default_rng(0)
    m = _model(Vocabulary())
    _, sal = highlight(m, rng.normal(size=(1, 5)), rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(sal.detach().numpy(), [1.0])
    _, sal = highlight(m, np.tile(rng.normal(size=5), (4, 1)), rng.normal(size=(2, 4)))
    np.testing.assert_allclose(sal.detach().numpy(), np.full(4, 0.25), atol=1e-15)


def test_highlight_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    m = _model(Vocabulary(), seed=1)
    clips, words = rng.normal(size=(3, 5)), rng.normal(size=(2, 4))
    out, sal = highlight(m, clips, words)
    p = {k: v.detach().numpy() for k, v in m.p.items()}
    q = words @ p["hl_q_w"] + p["hl_q_b"]
    k = clips @ p["hl_k_w"] + p["hl_k_b"]
    v = clips @ p["hl_v_w"] + p["hl_v_b"]
    expected_sal = np.zeros(3)
    for j in range(2):
        s = np.array([sum(q[j, a] * k[c, a] for a in range(4)) / 2.0 for c in range(3)])
        w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        expected_sal += w / 2
        np.testing.assert_allclose(out[j].detach().numpy(), w @ v, atol=1e-12)
    np.testing.assert_allclose(sal.detach().numpy(), expected_sal, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 10_000))
def test_salience_is_a_distribution(c, n, seed):
    rng = np.random.default_rng(seed)
    m = _model(Vocabulary(), seed=seed % 5)
    _, sal = highlight(m, rng.normal(size=(c, 5)) * 3, rng.normal(size=(n, 4)) * 3)
    sal = sal.detach().numpy()
    assert (sal >= 0).all() and abs(sal.sum() - 1) < 1e-9


# -- masking ------------------------------------------------------------------------

def test_mask_query_examples(caplog):
    mq = mask_query(["the", "man", "runs"], ["OTHER", "NOUN", "VERB"])
    assert mq.masked_positions == [1, 2] and mq.tokens == ["the", MASK_TOKEN, MASK_TOKEN]
    assert mq.original_tokens == ["the", "man", "runs"]
    with caplog.at_level("WARNING"):
        skip = mask_query(["to", "the"], ["OTHER", "OTHER"])
    assert not skip.trainable and "no maskable" in caplog.text
    assert mask_query(["men", "women"], ["NOUN", "NOUN"]).masked_positions == [0, 1]


def test_mask_query_idempotent():
    tags = ["OTHER", "ADJ", "NOUN", "VERB", "OTHER", "NOUN"]
    once = mask_query("a tall man opens the door".split(), tags)
    twice = mask_query(once.tokens, tags)
    assert twice.tokens == once.tokens and twice.masked_positions == once.masked_positions


def test_featurize_skips_unmaskable_queries():
    rng = np.random.default_rng(2)
    s = _sample(rng, "to the of")
    assert featurize_temporal(s, Vocabulary.from_samples([s])) is None
    with pytest.raises(ContractError):
        reconstruction_loss(_model(Vocabulary()), [None])
    s2 = _sample(rng, "the man runs")
    with pytest.raises(ContractError):
        featurize_temporal(s2, Vocabulary(), score_positions="some")
    assert featurize_temporal(s2, Vocabulary(), score_positions="all").scored.all()


# -- reconstruction loss -------------------------------------------------------------

def test_uniform_decoder_loss():
    rng = np.random.default_rng(3)
    vocab = Vocabulary(f"w{i}" for i in range(48))
    assert len(vocab) == 50
    m = _model(vocab)
    with torch.no_grad():
        m.p["dec_out_w"].zero_()
        m.p["dec_out_b"].zero_()
    s = _sample(rng, "the tall man runs")  # three maskable words
    loss = float(reconstruction_loss(m, [featurize_temporal(s, vocab)]).detach())
    assert loss == pytest.approx(3 * math.log(50), abs=1e-12)
    assert loss == pytest.approx(11.7360, abs=1e-4)


def test_certain_decoder_gives_zero_nll():
    targets = torch.tensor([[2, 0, 4]])
    log_probs = torch.full((1, 3, 6), -1e300, dtype=torch.float64)
    for pos, t in enumerate(targets[0]):
        log_probs[0, pos, t] = 0.0
    assert float(reconstruction_nll(log_probs, targets, np.ones((1, 3), bool))) == 0.0


def test_loss_is_non_negative_and_batch_averaged():
    rng = np.random.default_rng(4)
    samples = [_sample(rng, t, vid=str(i)) for i, t in enumerate(["the man runs", "a woman in red jumps"])]
    vocab = Vocabulary.from_samples(samples)
    m = _model(vocab)
    items = [featurize_temporal(s, vocab) for s in samples]
    both = float(reconstruction_loss(m, items).detach())
    singles = [float(reconstruction_loss(m, [it]).detach()) for it in items]
    assert both >= 0 and both == pytest.approx(np.mean(singles), abs=1e-12)


def test_reconstruction_gradients():
    rng = np.random.default_rng(5)
    vocab = Vocabulary(["the", "man", "runs", "fast", "a"])
    assert len(vocab) == 7
    s = _sample(rng, "the man runs fast")
    m = _model(vocab)
    items = [featurize_temporal(s, vocab)]
    assert finite_difference_error(lambda: reconstruction_loss(m, items), m.named_tensors()) < 1e-4


def test_crg_loss_equalities_and_gradient():
    rng = np.random.default_rng(6)
    s = _sample(rng, "the bald man leaves the room and turns")
    vocab = Vocabulary.from_samples([s])
    m = _model(vocab)
    plain = float(reconstruction_loss(m, [featurize_temporal(s, vocab)]).detach())
    dq = decompose(s.query)
    dq.global_positions, dq.local_positions = list(range(len(s.query.tokens))), []
    s.decomposition = dq
    assert float(reconstruction_loss_crg(m, [s]).detach()) == pytest.approx(plain, abs=1e-12)

    # a single local phrase equals the plain loss computed on that phrase alone
    dq = decompose(s.query)
    phrase = dq.local_positions[0]
    dq.global_positions, dq.local_positions = [], [phrase]
    s.decomposition = dq
    sub = GroundingSample(s.video, QueryEmbedding(
        " ".join(s.query.tokens[i] for i in phrase), [s.query.tokens[i] for i in phrase],
        s.query.embeddings[phrase], [s.query.pos_tags[i] for i in phrase]))
    expected = float(reconstruction_loss(m, [featurize_temporal(sub, vocab)]).detach())
    assert float(reconstruction_loss_crg(m, [s]).detach()) == pytest.approx(expected, abs=1e-12)

    # some cross-attention key gradients are ~1e-6, where differencing noise (~1e-10) dominates
    s.decomposition = decompose(s.query)
    assert finite_difference_error(lambda: reconstruction_loss_crg(m, [s]), m.named_tensors(), floor=1e-4) < 1e-4


def test_crg_empty_decomposition_falls_back(caplog):
    rng = np.random.default_rng(7)
    s = _sample(rng, "the man runs")
    vocab = Vocabulary.from_samples([s])
    m = _model(vocab)
    dq = decompose(s.query)
    dq.global_positions, dq.local_positions = [], []
    s.decomposition = dq
    with caplog.at_level("WARNING"):
        got = float(reconstruction_loss_crg(m, [s]).detach())
    assert "empty decomposition" in caplog.text
    assert got == pytest.approx(float(reconstruction_loss(m, [featurize_temporal(s, vocab)]).detach()), abs=1e-12)


def test_item_salience_has_one_entry_per_clip():
    rng = np.random.default_rng(8)
    s = _sample(rng, "the man runs", clips=7)
    vocab = Vocabulary.from_samples([s])
    sal = item_salience(_model(vocab), featurize_temporal(s, vocab))
    assert sal.shape == (7,) and sal.sum() == pytest.approx(1.0, abs=1e-12)


# -- vocabulary file ----------------------------------------------------------------

def test_vocabulary_file_round_trip(tmp_path):
    vocab = Vocabulary(["the", "Man", "runs"])
    assert vocab.id("man") == 3 and vocab.id("zebra") == 1 and vocab.id(MASK_TOKEN) == 0
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert path.read_text().split("\n")[0] == MASK_TOKEN
    back = Vocabulary.load(path)
    assert back.tokens == vocab.tokens
    (tmp_path / "bad.txt").write_text("the\nman\n")
    with pytest.raises(ContractError):
        Vocabulary.load(tmp_path / "bad.txt")


# -- boundary prediction -------------------------------------------------------------

def _brute_force_run(sal, tau):
    thr = tau * max(sal)
    best, best_total = None, -math.inf
    for a in range(len(sal)):
        for b in range(a + 1, len(sal) + 1):
            if all(x >= thr for x in sal[a:b]):
                total = sum(sal[a:b])
                if total > best_total + 1e-15:
                    best, best_total = (a, b), total
    return best


def test_predict_bounds_examples():
    assert predict_bounds([0, 1, 0], 48) == (16, 32)
    assert predict_bounds([1 / 3] * 3, 48) == (0, 48)
    sal = [0.2, 0.9, 0.8, 0.1, 0.95]
    assert best_salient_run(sal, 0.5) == _brute_force_run(sal, 0.5) == (1, 3)
    assert predict_bounds(sal, 80) == (16, 48)
    with pytest.raises(ContractError):
        best_salient_run([0.5], tau=0.0)
    with pytest.raises(ContractError):
        best_salient_run([], tau=0.5)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=12), st.floats(0.05, 1.0))
def test_best_run_matches_brute_force(sal, tau):
    if max(sal) == 0:
        sal = [s + 1e-3 for s in sal]
    got = best_salient_run(sal, tau)
    thr = tau * max(sal)
    assert all(x >= thr for x in sal[got[0]:got[1]])
    assert sum(sal[got[0]:got[1]]) == pytest.approx(sum(sal[slice(*_brute_force_run(sal, tau))]), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.integers(1, 40), st.integers(0, 10_000), st.sampled_from([None, 8, 16]))
def test_bounds_inside_video(length, c, seed, clip_len):
    rng = np.random.default_rng(seed)
    sal = rng.dirichlet(np.ones(c))
    if clip_len is None and c > length:
        c = length
        sal = sal[:c]
    ts, te = predict_bounds(sal, length, clip_len)
    assert 0 <= ts < te <= length


def test_clip_frame_bounds():
    assert clip_frame_bounds(3, 40, 16) == [(0, 16), (16, 32), (32, 40)]
    assert clip_frame_bounds(2, 40, 16) == [(0, 16), (16, 40)]
    assert clip_frame_bounds(4, 10, None) == [(0, 2), (2, 5), (5, 7), (7, 10)]
