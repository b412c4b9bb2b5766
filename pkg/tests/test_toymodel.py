import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langshift.errors import ConfigurationError, InvalidInputError
from langshift.toymodel import (
    BOS,
    EOS,
    PAD,
    Hook,
    ModelConfig,
    SyntheticCorpusSpec,
    TokenScheme,
    collect_activations,
    forward_with_hooks,
    generate,
    init_params,
    load_checkpoint,
    load_corpus,
    make_parallel_corpus,
    save_checkpoint,
    save_corpus,
)

SMALL = SyntheticCorpusSpec(num_concepts=16, num_train=400, num_calibration=20, num_test=10)


@pytest.fixture(scope="module")
def params():
    cfg = ModelConfig(vocab_size=SMALL.scheme.vocab_size, num_layers=3, hidden_dim=8, num_heads=2,
                      max_positions=16)
    return init_params(cfg, seed=3)


def test_token_offsets():
    s = TokenScheme(4, 64)
    assert s.encode(0, 0) == 3 and s.encode(1, 0) == 67
    assert s.language_of(67) == 1 and s.concept_of(67) == 0
    assert s.language_of(BOS) == -1


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(2, 50), st.data())
def test_scheme_bijection(k, c, data):
    s = TokenScheme(k, c)
    lang, concept = data.draw(st.integers(0, k - 1)), data.draw(st.integers(0, c - 1))
    tok = s.encode(lang, concept)
    assert (s.language_of(tok), s.concept_of(tok)) == (lang, concept)
    assert 3 <= tok < s.vocab_size


def test_scheme_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        TokenScheme(2, 5).encode(2, 0)


@pytest.mark.parametrize("kwargs", [
    {"data_share": (0.5, 0.5, 0.0, 0.0)},
    {"data_share": (0.7, 0.1, 0.1)},
    {"data_share": (0.7, 0.1, 0.1, 0.2)},
    {"num_languages": 1, "data_share": (1.0,)},
    {"sentence_length": (5, 3)},
])
def test_corpus_spec_validation(kwargs):
    with pytest.raises(ConfigurationError):
        SyntheticCorpusSpec(**kwargs)


def test_corpus_is_deterministic_and_quota_exact():
    a, b = make_parallel_corpus(SMALL), make_parallel_corpus(SMALL)
    assert a.checksum() == b.checksum()
    assert np.bincount(a.train_languages).tolist() == [304, 32, 32, 32]
    other = make_parallel_corpus(SyntheticCorpusSpec(**{**SMALL.to_dict(), "seed": 1}))
    assert other.checksum() != a.checksum()


def test_translations_share_concepts():
    corpus = make_parallel_corpus(SMALL)
    s = corpus.scheme
    for concepts in corpus.train_concepts[:50]:
        rendered = [s.render(lang, concepts) for lang in range(4)]
        for r in rendered:
            np.testing.assert_array_equal(s.concept_of(r), concepts)
        assert [set(s.language_of(r).tolist()) for r in rendered] == [{0}, {1}, {2}, {3}]


def test_sentence_lengths_in_range():
    corpus = make_parallel_corpus(SMALL)
    lengths = [len(c) for c in corpus.train_concepts + corpus.calibration + corpus.test]
    assert min(lengths) >= 6 and max(lengths) <= 12


def test_corpus_round_trip(tmp_path):
    corpus = make_parallel_corpus(SMALL)
    save_corpus(corpus, tmp_path / "c.shfc")
    back = load_corpus(tmp_path / "c.shfc")
    assert back.checksum() == corpus.checksum() and back.spec == corpus.spec


def test_init_is_seeded():
    cfg = ModelConfig(vocab_size=20, num_layers=2, hidden_dim=4, num_heads=1)
    assert init_params(cfg, 1).checksum() == init_params(cfg, 1).checksum()
    assert init_params(cfg, 1).checksum() != init_params(cfg, 2).checksum()
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=20, hidden_dim=6, num_heads=4)


def test_pad_only_input_is_finite(params):
    tr = forward_with_hooks(params, np.full((2, 5), PAD))
    assert np.all(np.isfinite(tr.logits))


def test_identity_hooks_leave_logits_unchanged(params):
    toks = np.array([[BOS, 5, 9, 30, EOS]])
    plain = forward_with_hooks(params, toks).logits
    hooks = [Hook(i, lambda h: h) for i in range(1, 4)]
    np.testing.assert_allclose(forward_with_hooks(params, toks, hooks).logits, plain, atol=1e-12)


def test_constant_hook_is_exact_and_local(params):
    toks = np.array([[BOS, 5, 9, 30]])
    c = np.linspace(-1, 1, 8)
    plain = forward_with_hooks(params, toks)
    tr = forward_with_hooks(params, toks, [Hook(2, lambda h: h + c)])
    np.testing.assert_array_equal(tr.hidden[1], tr.pre_hook[2] + c)
    np.testing.assert_array_equal(tr.hidden[0], plain.hidden[0])
    assert tr.interventions == [(2, "hook")]


def test_hook_shape_and_layer_errors(params):
    toks = np.array([[BOS, 5]])
    with pytest.raises(InvalidInputError, match="layer 2"):
        forward_with_hooks(params, toks, [Hook(2, lambda h: h[:, :1])])
    with pytest.raises(InvalidInputError):
        forward_with_hooks(params, toks, [Hook(4, lambda h: h)])
    with pytest.raises(InvalidInputError):
        forward_with_hooks(params, np.array([[BOS, 999]]))


def test_causality(params):
    a = np.array([[BOS, 5, 9, 30, 11]])
    b = a.copy()
    b[0, 3:] = [40, 41]
    la, lb = forward_with_hooks(params, a).logits, forward_with_hooks(params, b).logits
    np.testing.assert_array_equal(la[:, :3], lb[:, :3])
    assert not np.allclose(la[:, 3:], lb[:, 3:])


def test_generation_greedy_and_eos(params):
    forced = params.copy()
    forced.weights["head.b"] = np.zeros_like(forced.weights["head.b"])
    forced.weights["head.b"][EOS] = 1e3
    assert generate(forced, [BOS, 5]) == [EOS]
    out1 = generate(params, [BOS, 5], max_tokens=6)
    assert out1 == generate(params, [BOS, 5], max_tokens=6) and len(out1) <= 6
    with pytest.raises(InvalidInputError):
        generate(params, [])


def test_generation_follows_hooks_into_the_head(params):
    # rank-1 head reading hidden coordinate 0: its sign picks a language-1 or language-2 token
    rigged = params.copy()
    d, v = 8, params.config.vocab_size
    head = np.zeros((d, v))
    head[0, SMALL.scheme.encode(2, 0)] = 1.0
    head[0, SMALL.scheme.encode(1, 0)] = -1.0
    rigged.weights["head.w"] = head
    rigged.weights["head.b"] = np.full(v, -1e3)
    rigged.weights["head.b"][[SMALL.scheme.encode(1, 0), SMALL.scheme.encode(2, 0)]] = 0.0

    def push(sign):
        def fn(h):
            out = h.data.copy()
            out[..., 0] = sign * 100.0
            return out
        return Hook(3, fn, "push")

    for sign, lang in ((1, 2), (-1, 1)):
        tokens = generate(rigged, [BOS, 5], [push(sign)], max_tokens=3)
        assert set(SMALL.scheme.language_of(np.array(tokens)).tolist()) == {lang}


def test_collect_activations_shapes(params):
    corpus = make_parallel_corpus(SMALL)
    sents = {lang: [corpus.scheme.sentence(lang, c) for c in corpus.calibration[:5]] for lang in (0, 1)}
    dump = collect_activations(params, sents, batch_size=2)
    mat, off = dump.block(1, 3)
    assert off[-1] == sum(len(c) for c in corpus.calibration[:5]) and mat.shape[1] == 8


def test_checkpoint_round_trip(params, tmp_path):
    save_checkpoint(params, tmp_path / "m.shfc")
    back = load_checkpoint(tmp_path / "m.shfc")
    assert back.checksum() == params.checksum() and back.config == params.config
