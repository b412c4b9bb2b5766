"""A tiny pre-norm decoder-only transformer and a synthetic parallel corpus for it.

The corpus renders concept sequences drawn from one shared Markov chain into
``K`` disjoint token ranges, one per language, so every sentence has an exact
translation in every other language and the language of any token is known.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigurationError, InvalidInputError
from .repstore import ActivationDump, read_container, write_container

PAD, BOS, EOS = 0, 1, 2
NUM_SPECIALS = 3


@dataclass(frozen=True)
class TokenScheme:
    num_languages: int
    num_concepts: int

    @property
    def vocab_size(self):
        return NUM_SPECIALS + self.num_languages * self.num_concepts

    def encode(self, language, concept):
        if not (0 <= language < self.num_languages and 0 <= concept < self.num_concepts):
            raise InvalidInputError(f"no token for language {language}, concept {concept}")
        return NUM_SPECIALS + language * self.num_concepts + concept

    def is_special(self, token):
        return np.asarray(token) < NUM_SPECIALS

    def language_of(self, token):
        """Language id of a content token (``-1`` for specials); works on arrays."""
        t = np.asarray(token)
        out = np.where(t < NUM_SPECIALS, -1, (t - NUM_SPECIALS) // self.num_concepts)
        return int(out) if out.ndim == 0 else out

    def concept_of(self, token):
        t = np.asarray(token)
        out = np.where(t < NUM_SPECIALS, -1, (t - NUM_SPECIALS) % self.num_concepts)
        return int(out) if out.ndim == 0 else out

    def render(self, language, concepts):
        """Token ids of a concept sequence in ``language`` (no BOS/EOS)."""
        concepts = np.asarray(concepts, dtype=np.int64)
        return NUM_SPECIALS + language * self.num_concepts + concepts

    def sentence(self, language, concepts):
        """``[BOS] + render(...) + [EOS]``."""
        return np.concatenate([[BOS], self.render(language, concepts), [EOS]]).astype(np.int64)


# ---------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    num_languages: int = 4
    num_concepts: int = 64
    dominant_language: int = 0
    sentence_length: tuple = (6, 12)
    transition_seed: int = 0
    data_share: tuple = (0.76, 0.08, 0.08, 0.08)
    branching: int = 4
    num_train: int = 4000
    num_calibration: int = 256
    num_test: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sentence_length", tuple(self.sentence_length))
        object.__setattr__(self, "data_share", tuple(float(s) for s in self.data_share))
        if self.num_languages < 2:
            raise ConfigurationError("need at least 2 languages")
        if self.num_concepts < 2:
            raise ConfigurationError("need at least 2 concepts")
        if len(self.data_share) != self.num_languages:
            raise ConfigurationError("data_share must list one fraction per language")
        if abs(sum(self.data_share) - 1.0) > 1e-9:
            raise ConfigurationError(f"data shares sum to {sum(self.data_share)}, not 1")
        if not 0 <= self.dominant_language < self.num_languages:
            raise ConfigurationError("dominant_language out of range")
        dom = self.data_share[self.dominant_language]
        if any(s >= dom for i, s in enumerate(self.data_share) if i != self.dominant_language):
            raise ConfigurationError("the dominant language must have the strictly largest share")
        lo, hi = self.sentence_length
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"bad sentence_length range {self.sentence_length}")
        if not 1 <= self.branching <= self.num_concepts:
            raise ConfigurationError("branching must lie in 1..num_concepts")

    @property
    def scheme(self):
        return TokenScheme(self.num_languages, self.num_concepts)

    @property
    def non_dominant(self):
        return tuple(i for i in range(self.num_languages) if i != self.dominant_language)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["sentence_length"] = list(self.sentence_length)
        d["data_share"] = list(self.data_share)
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown corpus options: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ParallelCorpus:
    """Concept sequences for every split plus the chain that generated them.

    ``train_languages[i]`` is the language sentence ``i`` of the training split
    is rendered in; its dominant-language translation is the same concept
    sequence rendered in the dominant language. Calibration and test sentences
    are rendered in every language.
    """

    spec: SyntheticCorpusSpec
    transitions: np.ndarray
    train_languages: np.ndarray
    train_concepts: list
    calibration: list
    test: list

    @property
    def scheme(self):
        return self.spec.scheme

    def train_sentences(self, language=None):
        sel = range(len(self.train_concepts)) if language is None else np.flatnonzero(
            self.train_languages == language)
        return [self.scheme.sentence(int(self.train_languages[i]), self.train_concepts[i]) for i in sel]

    def checksum(self):
        h = hashlib.sha256()
        h.update(self.transitions.tobytes())
        h.update(self.train_languages.astype("<i8").tobytes())
        for split in (self.train_concepts, self.calibration, self.test):
            for seq in split:
                h.update(np.asarray(seq, dtype="<i8").tobytes())
                h.update(b"|")
        return h.hexdigest()[:16]


def _quota(n, shares):
    """Largest-remainder allocation of ``n`` items across ``shares``."""
    raw = np.asarray(shares) * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def _markov_chain(spec):
    rng = np.random.default_rng(spec.transition_seed)
    c = spec.num_concepts
    trans = np.zeros((c, c))
    for i in range(c):
        succ = rng.choice(c, size=spec.branching, replace=False)
        trans[i, succ] = rng.dirichlet(np.ones(spec.branching))
    return trans


def _sample_sequences(rng, trans, count, length_range):
    c = trans.shape[0]
    cdf = np.cumsum(trans, axis=1)
    lo, hi = length_range
    out = []
    for _ in range(count):
        length = int(rng.integers(lo, hi + 1))
        seq = np.empty(length, dtype=np.int64)
        seq[0] = rng.integers(c)
        for t in range(1, length):
            seq[t] = min(int(np.searchsorted(cdf[seq[t - 1]], rng.random(), side="right")), c - 1)
        out.append(seq)
    return out


def make_parallel_corpus(spec):
    """Sample the training, calibration and test splits described by ``spec``."""
    trans = _markov_chain(spec)
    rng = np.random.default_rng(spec.seed)
    counts = _quota(spec.num_train, spec.data_share)
    langs = np.repeat(np.arange(spec.num_languages), counts)
    rng.shuffle(langs)
    train = _sample_sequences(rng, trans, spec.num_train, spec.sentence_length)
    calib = _sample_sequences(rng, trans, spec.num_calibration, spec.sentence_length)
    test = _sample_sequences(rng, trans, spec.num_test, spec.sentence_length)
    return ParallelCorpus(spec, trans, langs, train, calib, test)


def _flatten(seqs):
    offsets = np.concatenate([[0], np.cumsum([len(s) for s in seqs])]).astype(np.int64)
    flat = np.concatenate(seqs).astype(np.int64) if seqs else np.zeros(0, np.int64)
    return flat, offsets


def _unflatten(flat, offsets):
    return [flat[offsets[i]:offsets[i + 1]].copy() for i in range(len(offsets) - 1)]


def save_corpus(corpus, path):
    blocks = [("transitions", corpus.transitions, {}),
              ("train_languages", corpus.train_languages, {})]
    for name in ("train_concepts", "calibration", "test"):
        flat, off = _flatten(getattr(corpus, name))
        blocks += [(f"{name}.flat", flat, {}), (f"{name}.offsets", off, {})]
    write_container(path, "corpus", {"spec": corpus.spec.to_dict()}, blocks)


def load_corpus(path):
    _, meta, _, arrays = read_container(path, expected_kind="corpus")
    parts = {name: _unflatten(arrays[f"{name}.flat"], arrays[f"{name}.offsets"])
             for name in ("train_concepts", "calibration", "test")}
    return ParallelCorpus(SyntheticCorpusSpec.from_dict(meta["spec"]), arrays["transitions"],
                          arrays["train_languages"], **parts)


def pad_batch(sequences, length=None):
    """Stack token sequences into a PAD-filled ``(B, T)`` array."""
    length = max(len(s) for s in sequences) if length is None else length
    out = np.full((len(sequences), length), PAD, dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, :len(s)] = s
    return out


def content_mask(tokens):
    """True at non-special tokens."""
    return np.asarray(tokens) >= NUM_SPECIALS


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_layers: int = 8
    hidden_dim: int = 32
    num_heads: int = 2
    mlp_ratio: int = 4
    max_positions: int = 32
    init_scale: float = 1.0

    def __post_init__(self):
        if min(self.vocab_size, self.num_layers, self.hidden_dim, self.num_heads,
               self.mlp_ratio, self.max_positions) < 1:
            raise ConfigurationError(f"all model dimensions must be positive: {self}")
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError("hidden_dim must be divisible by num_heads")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class ToyModelParams:
    config: ModelConfig
    seed: int
    weights: dict = field(default_factory=dict)

    def copy(self):
        return ToyModelParams(self.config, self.seed, {k: v.copy() for k, v in self.weights.items()})

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name], dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    @property
    def num_parameters(self):
        return sum(w.size for w in self.weights.values())


def parameter_shapes(cfg):
    d, f = cfg.hidden_dim, cfg.hidden_dim * cfg.mlp_ratio
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_positions, d)}
    for i in range(1, cfg.num_layers + 1):
        p = f"block{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
            p + "attn.w_out": (d, d), p + "attn.b_out": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w_in": (d, f), p + "mlp.b_in": (f,),
            p + "mlp.w_out": (f, d), p + "mlp.b_out": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, cfg.vocab_size),
                   "head.b": (cfg.vocab_size,)})
    return shapes


def init_params(config, seed=0):
    """Scaled-Gaussian initialization.

    Matrices get ``N(0, init_scale / fan_in)``, with residual output projections
    further divided by ``sqrt(2 L)``; embeddings get ``N(0, 1/d)``; layer-norm
    gains are 1 and every bias is 0.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    resid = 1.0 / np.sqrt(2.0 * config.num_layers)
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".g"):
            weights[name] = np.ones(shape)
        elif len(shape) == 1:
            weights[name] = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            weights[name] = rng.standard_normal(shape) / np.sqrt(config.hidden_dim)
        else:
            std = np.sqrt(config.init_scale / shape[0])
            if name.endswith("attn.w_out") or name.endswith("mlp.w_out"):
                std *= resid
            weights[name] = rng.standard_normal(shape) * std
    return ToyModelParams(config, seed, weights)


@dataclass
class Hook:
    """Transform applied to the ``(B, T, d)`` output of block ``layer`` (1-based)."""

    layer: int
    transform: object
    name: str = "hook"


def _as_hooks(hooks, num_layers):
    out = []
    for h in hooks or ():
        if not isinstance(h, Hook):
            layer, fn = h[0], h[1]
            h = Hook(layer, fn, getattr(fn, "__name__", "hook"))
        if not 1 <= h.layer <= num_layers:
            raise InvalidInputError(f"hook layer {h.layer} outside 1..{num_layers}")
        out.append(h)
    return out


@dataclass
class ForwardTrace:
    """Outputs of one forward pass.

    ``hidden[i - 1]`` is the output of block ``i`` after any hooks at that layer;
    ``pre_hook[i]`` holds the state before the first hook fired at layer ``i``.
    Arrays are plain numpy unless the trace came from a differentiable run.
    """

    hidden: list
    pre_hook: dict
    logits: object
    interventions: list


def _attention(x, w, p, cfg, mask):
    b, t, d = x.shape
    h = cfg.num_heads
    dh = d // h
    qkv = x @ w[p + "attn.w_qkv"] + w[p + "attn.b_qkv"]
    qkv = qkv.reshape(b, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    probs = ag.softmax(scores, axis=-1, mask=mask)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return ctx @ w[p + "attn.w_out"] + w[p + "attn.b_out"]


def run(weights, cfg, tokens, hooks=(), until=None):
    """Differentiable forward; ``weights`` maps names to :class:`~langshift.autograd.Tensor`.

    With ``until`` set, blocks after that layer are skipped and ``logits`` is None.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    b, t = tokens.shape
    if t > cfg.max_positions:
        raise InvalidInputError(f"sequence length {t} exceeds max_positions {cfg.max_positions}")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cfg.vocab_size:
        raise InvalidInputError("token id outside the vocabulary")
    hooks = _as_hooks(hooks, cfg.num_layers)
    by_layer = {}
    for h in hooks:
        by_layer.setdefault(h.layer, []).append(h)
    mask = np.tril(np.ones((t, t), dtype=bool))
    x = weights["tok_emb"][tokens] + weights["pos_emb"][:t]
    hidden, pre_hook, log = [], {}, []
    last = cfg.num_layers if until is None else until
    for i in range(1, last + 1):
        p = f"block{i}."
        x = x + _attention(ag.layer_norm(x, weights[p + "ln1.g"], weights[p + "ln1.b"]),
                           weights, p, cfg, mask)
        m = ag.layer_norm(x, weights[p + "ln2.g"], weights[p + "ln2.b"])
        x = x + ag.gelu(m @ weights[p + "mlp.w_in"] + weights[p + "mlp.b_in"]) @ weights[
            p + "mlp.w_out"] + weights[p + "mlp.b_out"]
        for h in by_layer.get(i, ()):
            if i not in pre_hook:
                pre_hook[i] = x
            y = h.transform(x)
            if not isinstance(y, ag.Tensor):
                y = ag.Tensor(y)
            if y.shape != x.shape:
                raise InvalidInputError(
                    f"hook {h.name!r} at layer {i} changed shape {x.shape} -> {y.shape}"
                )
            x = y
            log.append((i, h.name))
        hidden.append(x)
    if until is not None:
        return ForwardTrace(hidden, pre_hook, None, log)
    logits = ag.layer_norm(x, weights["ln_f.g"], weights["ln_f.b"]) @ weights["head.w"] + weights["head.b"]
    return ForwardTrace(hidden, pre_hook, logits, log)


def constant_weights(params):
    return {k: ag.Tensor(v) for k, v in params.weights.items()}


def forward_with_hooks(params, tokens, hooks=()):
    """Forward pass returning plain numpy arrays; hooks fire after their block."""
    tr = run(constant_weights(params), params.config, tokens, hooks)
    return ForwardTrace([h.data for h in tr.hidden], {k: v.data for k, v in tr.pre_hook.items()},
                        tr.logits.data, tr.interventions)


def generate(params, prompt, hooks=(), max_tokens=16):
    """Greedy decoding.

    ``prompt`` is one token sequence or a 2-D batch of equal-length prompts. Hooks
    are applied on every forward pass. Each returned sequence stops after its
    first EOS or after ``max_tokens`` new tokens.
    """
    seq = np.asarray(prompt, dtype=np.int64)
    single = seq.ndim == 1
    if single:
        seq = seq[None, :]
    if seq.shape[1] == 0:
        raise InvalidInputError("prompt must be non-empty")
    weights = constant_weights(params)
    steps = min(max_tokens, params.config.max_positions - seq.shape[1])
    outputs = [[] for _ in range(seq.shape[0])]
    done = np.zeros(seq.shape[0], dtype=bool)
    for _ in range(steps):
        logits = run(weights, params.config, seq, hooks).logits.data[:, -1]
        nxt = logits.argmax(axis=-1)
        for i, tok in enumerate(nxt):
            if not done[i]:
                outputs[i].append(int(tok))
                done[i] = tok == EOS
        if done.all():
            break
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return outputs[0] if single else outputs


def collect_activations(params, sentences_by_language, hooks_for=None, model_id="toy",
                        batch_size=64, use_pre_hook=None):
    """Content-token hidden states at every layer, as an :class:`ActivationDump`.

    ``sentences_by_language`` maps a language id to a list of token sequences
    (with BOS/EOS). ``hooks_for(language)`` optionally supplies hooks per language.
    ``use_pre_hook`` is a set of layers at which the pre-hook state is recorded
    instead of the post-hook state. BOS, EOS and PAD positions are excluded.
    """
    cfg = params.config
    dump = ActivationDump(model_id, cfg.num_layers, cfg.hidden_dim, list(sentences_by_language))
    use_pre_hook = set(use_pre_hook or ())
    for lang, sents in sentences_by_language.items():
        hooks = hooks_for(lang) if hooks_for else ()
        per_layer = [[] for _ in range(cfg.num_layers)]
        lengths = []
        for start in range(0, len(sents), batch_size):
            chunk = sents[start:start + batch_size]
            toks = pad_batch(chunk)
            tr = forward_with_hooks(params, toks, hooks)
            mask = content_mask(toks)
            for i in range(cfg.num_layers):
                state = tr.pre_hook.get(i + 1, tr.hidden[i]) if (i + 1) in use_pre_hook else tr.hidden[i]
                per_layer[i].append(state[mask])
            lengths.extend(mask.sum(axis=1).tolist())
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        for i in range(cfg.num_layers):
            dump.tokens[(lang, i + 1)] = np.concatenate(per_layer[i])
            dump.offsets[(lang, i + 1)] = offsets
    return dump.validate()


def save_checkpoint(params, path, extra=None):
    meta = {"config": params.config.to_dict(), "seed": params.seed, "extra": extra or {}}
    blocks = [(name, params.weights[name], {}) for name in sorted(params.weights)]
    write_container(path, "checkpoint", meta, blocks)


def load_checkpoint(path):
    _, meta, _, arrays = read_container(path, expected_kind="checkpoint")
    cfg = ModelConfig.from_dict(meta["config"])
    expected = parameter_shapes(cfg)
    if set(arrays) != set(expected):
        raise InvalidInputError("checkpoint weights do not match the stored model config")
    return ToyModelParams(cfg, meta["seed"], dict(arrays))
