"""Losses, gradient verification and the two-stage training driver."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigurationError, InvalidInputError, NumericalFailure
from .geometry import (
    DEFAULT_BETA,
    DEFAULT_VARIANCE,
    OnlineVectorEstimator,
    ShiftArea,
    average_profiles,
    compute_language_vectors,
    distance_profile,
    online_update,
    select_shift_area,
)
from .intervention import ShiftPlan, batch_hooks, build_hooks, dominant_like_layers
from .repstore import PoolingMethod
from .toymodel import (
    PAD,
    ModelConfig,
    collect_activations,
    constant_weights,
    content_mask,
    init_params,
    pad_batch,
    run,
)

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.05
ALPHA_GRID = (0.5, 1.0, 1.5, 2.0)


# ---------------------------------------------------------------------------
# batches and configs


@dataclass
class LmBatch:
    """PAD-filled token rows (with BOS/EOS) and the language of each row."""

    tokens: np.ndarray
    languages: list

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise InvalidInputError("empty batch")


@dataclass
class TranslationPairBatch:
    """``non_dominant[i]`` and ``dominant[i]`` render the same concept sequence."""

    non_dominant: list
    dominant: list
    language: object
    dominant_language: object

    def __post_init__(self):
        if len(self.non_dominant) != len(self.dominant):
            raise InvalidInputError("pair batch sides differ in length")

    @property
    def size(self):
        return len(self.non_dominant)


@dataclass(frozen=True)
class MclConfig:
    temperature: float = DEFAULT_TEMPERATURE
    pooling: PoolingMethod = PoolingMethod.MEAN
    layers: tuple = ()

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        object.__setattr__(self, "pooling", PoolingMethod(self.pooling))
        object.__setattr__(self, "layers", tuple(self.layers))


@dataclass(frozen=True)
class TrainingConfig:
    """Hyper-parameters of both stages.

    ``shift`` and ``mcl`` switch the two ingredients of stage 2 on and off; with
    both off stage 2 is plain continued fine-tuning.
    """

    alpha: float = 0.5
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    mcl_batch_size: int = 8
    stage1_steps: int = 1500
    stage2_steps: int = 1200
    seed: int = 0
    temperature: float = DEFAULT_TEMPERATURE
    pooling: str = "mean"
    beta: float = DEFAULT_BETA
    variance_threshold: float = DEFAULT_VARIANCE
    shift: bool = True
    mcl: bool = True
    mix_mcl_languages: bool = False
    online_w_new: float = 0.25
    eta: float | None = None
    area: tuple | None = None
    max_grad_norm: float | None = 1.0
    log_every: int = 50

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if self.stage1_steps < 1 or self.stage2_steps < 0:
            raise ConfigurationError("need stage1_steps >= 1 and stage2_steps >= 0")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("learning_rate must be >= 0 and momentum in [0, 1)")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigurationError("max_grad_norm must be positive when set")
        PoolingMethod(self.pooling)
        if self.area is not None:
            object.__setattr__(self, "area", tuple(int(a) for a in self.area))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["area"] = list(self.area) if self.area is not None else None
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# losses


def _tensors(params):
    return {k: ag.Tensor(v, requires_grad=True) for k, v in params.weights.items()}


def _grads(weights):
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in weights.items()}


def msft_loss_tensor(weights, cfg, batch, plan=None):
    tokens = np.asarray(batch.tokens)
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    hooks = batch_hooks(plan, batch.languages) if plan is not None else []
    trace = run(weights, cfg, inputs, hooks)
    return ag.cross_entropy(trace.logits, targets, targets != PAD)


def msft_loss(params, batch, plan=None):
    """Mean next-token cross-entropy over non-PAD targets, with exact gradients.

    Non-dominant rows run with the plan's shift hooks when ``plan`` is given; the
    language vectors inside the hooks are constants.
    """
    weights = _tensors(params)
    loss = msft_loss_tensor(weights, params.config, batch, plan)
    loss.backward()
    return float(loss.data), _grads(weights)


def pool_tensor(h, mask, method):
    """Pool a (B, T, d) tensor over the positions flagged in ``mask``."""
    method = PoolingMethod(method)
    if method is PoolingMethod.MEAN:
        return ag.masked_mean(h, mask)
    if method is PoolingMethod.MAX:
        return ag.masked_max(h, mask)
    last = mask.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)
    return h[(np.arange(mask.shape[0]), last)]


def infonce(shifted, dominant, temperature):
    """Summed InfoNCE over rows: positives on the diagonal, in-batch negatives.

    ``shifted`` and ``dominant`` are (N, d) tensors; rows are compared by cosine
    similarity. Zero-norm rows raise ``NumericalFailure``.
    """
    for name, e in (("shifted", shifted), ("dominant", dominant)):
        norms = np.sqrt((e.data * e.data).sum(axis=-1))
        bad = np.flatnonzero(norms == 0.0)
        if bad.size:
            raise NumericalFailure(f"zero-norm {name} embedding at sample {int(bad[0])}; cosine undefined")
    zs, zd = ag.normalize_rows(shifted), ag.normalize_rows(dominant)
    sims = (zs @ zd.transpose(1, 0)) * (1.0 / temperature)
    n = shifted.shape[0]
    return ag.cross_entropy(sims, np.arange(n), reduction="sum")


def mcl_loss_tensors(weights, cfg, batch, mcl_cfg, plan=None, layers=None):
    """Per-layer contrastive losses from a single forward over both sides of ``batch``.

    Non-dominant rows pass through the plan's hooks (dominant-like states); with
    ``plan=None`` the original states are used.
    """
    if batch.size == 0:
        raise InvalidInputError("contrastive loss needs at least one pair")
    layers = tuple(mcl_cfg.layers if layers is None else layers)
    if not layers:
        raise InvalidInputError("no layers selected for the contrastive loss")
    n = batch.size
    tokens = pad_batch(list(batch.non_dominant) + list(batch.dominant))
    languages = [batch.language] * n + [batch.dominant_language] * n
    hooks = batch_hooks(plan, languages) if plan is not None else []
    trace = run(weights, cfg, tokens, hooks, until=max(layers))
    mask = content_mask(tokens)
    out = {}
    for t in layers:
        e = pool_tensor(trace.hidden[t - 1], mask, mcl_cfg.pooling)
        out[t] = infonce(e[:n], e[n:], mcl_cfg.temperature)
    return out


def mcl_loss_layer(params, batch, layer, mcl_cfg, plan=None):
    """Contrastive loss at one layer and its exact gradient."""
    if mcl_cfg.layers and layer not in mcl_cfg.layers:
        raise InvalidInputError(f"layer {layer} not among the configured layers {mcl_cfg.layers}")
    weights = _tensors(params)
    loss = mcl_loss_tensors(weights, params.config, batch, mcl_cfg, plan, layers=(layer,))[layer]
    loss.backward()
    return float(loss.data), _grads(weights)


def combined_loss(params, msft_batch, mcl_batch, mcl_cfg, plan, alpha):
    """``L_msft + alpha * sum_t L_mcl^t`` over ``mcl_cfg.layers``.

    Returns ``(value, grads, parts)`` where ``parts`` holds the MSFT value and the
    per-layer contrastive values. ``alpha == 0`` skips the contrastive pass.
    """
    weights = _tensors(params)
    msft = msft_loss_tensor(weights, params.config, msft_batch, plan)
    parts = {"msft": float(msft.data), "mcl": {}}
    total = msft
    if alpha != 0:
        per_layer = mcl_loss_tensors(weights, params.config, mcl_batch, mcl_cfg, plan)
        mcl_sum = None
        for t in sorted(per_layer):
            parts["mcl"][t] = float(per_layer[t].data)
            mcl_sum = per_layer[t] if mcl_sum is None else mcl_sum + per_layer[t]
        total = msft + mcl_sum * alpha
    total.backward()
    return float(total.data), _grads(weights), parts


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradientReport:
    max_relative_error: float
    tolerance: float
    num_coordinates: int
    passed: bool
    worst: tuple = ()

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}: max relative error {self.max_relative_error:.3e} over "
                f"{self.num_coordinates} coordinates (tolerance {self.tolerance:.0e})")


def check_gradient(loss_fn, params, tolerance=1e-5, num_coords=200, step=1e-6, seed=0,
                   floor_scale=1e-3):
    """Compare analytic gradients with central finite differences.

    ``loss_fn(weights)`` returns ``(value, grads)`` for a dict of float64 arrays.
    Coordinates are drawn at random, mostly where the analytic gradient is
    non-zero plus a tenth elsewhere to confirm true zeros. The relative error of
    a coordinate is ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = floor_scale * max(1, |loss|)``, because finite-difference roundoff
    grows with the loss value and swamps gradients below that level.
    """
    weights = params.weights if hasattr(params, "weights") else params
    weights = {k: np.array(v, dtype=np.float64) for k, v in weights.items()}
    value, grads = loss_fn(weights)
    if not np.isfinite(value):
        raise NumericalFailure("loss is not finite at the given parameters")
    rng = np.random.default_rng(seed)
    names = sorted(weights)
    coords = [(n, i) for n in names for i in range(weights[n].size)]
    flat_grad = np.concatenate([np.ravel(grads[n]) for n in names])
    nonzero = np.flatnonzero(flat_grad != 0.0)
    zero = np.flatnonzero(flat_grad == 0.0)
    n_zero = min(len(zero), max(1, num_coords // 10)) if len(zero) else 0
    n_nonzero = min(len(nonzero), num_coords - n_zero)
    picks = list(rng.choice(nonzero, size=n_nonzero, replace=False)) if n_nonzero else []
    if n_zero:
        picks += list(rng.choice(zero, size=n_zero, replace=False))
    if len(picks) < min(num_coords, len(coords)):
        rest = np.setdiff1d(np.arange(len(coords)), picks)
        picks += list(rng.choice(rest, size=min(num_coords, len(coords)) - len(picks), replace=False))
    floor = floor_scale * max(1.0, abs(value))
    worst = (0.0, None, 0.0, 0.0)
    for flat in picks:
        name, idx = coords[int(flat)]
        arr = weights[name].reshape(-1)
        orig = arr[idx]
        arr[idx] = orig + step
        plus, _ = loss_fn(weights)
        arr[idx] = orig - step
        minus, _ = loss_fn(weights)
        arr[idx] = orig
        numeric = (plus - minus) / (2 * step)
        analytic = float(np.ravel(grads[name])[idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if err > worst[0]:
            worst = (err, (name, idx), analytic, numeric)
    return GradientReport(worst[0], tolerance, len(picks), worst[0] <= tolerance, worst)


# ---------------------------------------------------------------------------
# optimizer


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients by one factor so their joint norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class SGD:
    """Plain SGD with optional heavy-ball momentum, updating arrays in place."""

    def __init__(self, learning_rate, momentum=0.0, max_grad_norm=None):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.max_grad_norm = max_grad_norm
        self.velocity = {}

    def step(self, weights, grads):
        grads, _ = clip_by_global_norm(grads, self.max_grad_norm)
        for name, g in grads.items():
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
            else:
                v = g
            weights[name] -= self.learning_rate * v


# ---------------------------------------------------------------------------
# geometry services on a model


def calibration_sentences(corpus, languages=None):
    sch = corpus.scheme
    langs = range(corpus.spec.num_languages) if languages is None else languages
    return {lang: [sch.sentence(lang, c) for c in corpus.calibration] for lang in langs}


def language_vectors(params, corpus, pooling=PoolingMethod.MEAN):
    """Language vectors of every language from unhooked calibration forwards."""
    dump = collect_activations(params, calibration_sentences(corpus))
    return compute_language_vectors(dump, pooling), dump


def layer_profiles(params, corpus, table=None, dump=None, variance_threshold=DEFAULT_VARIANCE,
                   pooling=PoolingMethod.MEAN):
    """Distance profile of each non-dominant language after per-layer shifting."""
    if table is None or dump is None:
        table, dump = language_vectors(params, corpus, pooling)
    dom = corpus.spec.dominant_language
    dominant_stream = [dump.block(dom, i)[0] for i in range(1, dump.num_layers + 1)]
    profiles = {}
    for lang in corpus.spec.non_dominant:
        shifted = dominant_like_layers(dump, table, lang, dom)
        profiles[lang] = distance_profile(shifted, dominant_stream, variance_threshold,
                                          language_pair=(lang, dom))
    return table, profiles


def area_distances(params, corpus, plan, layers=None, variance_threshold=DEFAULT_VARIANCE):
    """Mean distance between dominant-like and dominant subspaces over ``layers``.

    Non-dominant calibration sentences run through the plan's hooks; at
    ``L_bk`` the state before the backward shift is used, so every layer of
    ``L_to..L_bk`` is measured on dominant-like representations.
    """
    layers = plan.area.area_layers if layers is None else tuple(layers)
    dom = corpus.spec.dominant_language
    sents = calibration_sentences(corpus)
    dump = collect_activations(params, sents, hooks_for=lambda lang: build_hooks(plan, lang),
                               use_pre_hook={plan.l_bk})
    per_layer = {}
    for t in layers:
        xd = dump.block(dom, t)[0]
        vals = []
        for lang in corpus.spec.non_dominant:
            prof = distance_profile([dump.block(lang, t)[0]], [xd], variance_threshold)
            vals.append(float(prof.layer_distances[0]))
        per_layer[t] = float(np.mean(vals))
    return per_layer


# ---------------------------------------------------------------------------
# two-stage driver


@dataclass
class TrainResult:
    params: object
    stage1_params: object
    plan: ShiftPlan | None
    area: ShiftArea
    calibration_table: object
    profiles: dict
    log: list = field(default_factory=list)

    def write_log(self, path):
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _sample_lm_batch(rng, corpus, size):
    idx = rng.choice(len(corpus.train_concepts), size=size, replace=False)
    sch = corpus.scheme
    sents = [sch.sentence(int(corpus.train_languages[i]), corpus.train_concepts[i]) for i in idx]
    return LmBatch(pad_batch(sents), [int(corpus.train_languages[i]) for i in idx])


def _sample_pair_batch(rng, corpus, language, size):
    dom = corpus.spec.dominant_language
    pool = np.flatnonzero(corpus.train_languages == language)
    idx = rng.choice(pool, size=min(size, len(pool)), replace=False)
    sch = corpus.scheme
    return TranslationPairBatch([sch.sentence(language, corpus.train_concepts[i]) for i in idx],
                                [sch.sentence(dom, corpus.train_concepts[i]) for i in idx],
                                language, dom)


def _batch_means(params, batch, layers, pooling):
    """Unhooked pooled means of each side of a pair batch at ``layers``."""
    n = batch.size
    tokens = pad_batch(list(batch.non_dominant) + list(batch.dominant))
    trace = run(constant_weights(params), params.config, tokens, until=max(layers))
    mask = content_mask(tokens)
    out = {}
    for t in layers:
        e = pool_tensor(trace.hidden[t - 1], mask, pooling).data
        out[(batch.language, t)] = e[:n].mean(axis=0)
        out[(batch.dominant_language, t)] = e[n:].mean(axis=0)
    return out


def run_stage1(cfg, corpus, model_cfg=None, params=None):
    """MSFT-only training from a fresh initialization (or from ``params``)."""
    if corpus.spec.num_languages < 2:
        raise ConfigurationError("training needs at least two languages")
    if model_cfg is None:
        model_cfg = ModelConfig(vocab_size=corpus.scheme.vocab_size)
    params = init_params(model_cfg, cfg.seed) if params is None else params.copy()
    rng = np.random.default_rng([cfg.seed, 1])
    opt = SGD(cfg.learning_rate, cfg.momentum, cfg.max_grad_norm)
    records = []
    for step in range(1, cfg.stage1_steps + 1):
        batch = _sample_lm_batch(rng, corpus, cfg.batch_size)
        value, grads = msft_loss(params, batch)
        if not math.isfinite(value):
            raise NumericalFailure(f"stage 1 loss diverged at step {step}")
        opt.step(params.weights, grads)
        if step % cfg.log_every == 0 or step == cfg.stage1_steps:
            records.append({"stage": 1, "step": step, "msft": value, "total": value})
    return params, records


def select_area(cfg, params, corpus):
    """Language vectors, per-language profiles and the chosen shift area."""
    pooling = PoolingMethod(cfg.pooling)
    table, dump = language_vectors(params, corpus, pooling)
    table, profiles = layer_profiles(params, corpus, table, dump, cfg.variance_threshold, pooling)
    if cfg.area is not None:
        l_to, l_bk = cfg.area
        area = ShiftArea(l_to, l_bk, cfg.beta, tuple(range(l_to, l_bk + 1)), True)
    else:
        area = select_shift_area(average_profiles(list(profiles.values())), cfg.beta)
    return table, profiles, area


def run_stage2(cfg, corpus, stage1_params, table, area):
    """Stage 2: MSFT plus the contrastive loss, with shift hooks when enabled.

    Returns ``(params, plan, records)``. The plan carries the language vectors as
    last updated by the online estimator (``None`` when shifting is off).
    """
    params = stage1_params.copy()
    dom = corpus.spec.dominant_language
    plan = ShiftPlan(dom, area, table) if cfg.shift else None
    mcl_cfg = MclConfig(cfg.temperature, cfg.pooling, area.mcl_layers)
    alpha = cfg.alpha if cfg.mcl else 0.0
    rng = np.random.default_rng([cfg.seed, 2])
    opt = SGD(cfg.learning_rate, cfg.momentum, cfg.max_grad_norm)
    estimators = {}
    if plan is not None:
        for lang in table.languages:
            for t in (area.l_to, area.l_bk):
                kw = {"eta": cfg.eta, "step": 1} if cfg.eta is not None else {
                    "w_new": cfg.online_w_new, "w_old": 1.0 - cfg.online_w_new}
                estimators[(lang, t)] = OnlineVectorEstimator(table.get(lang, t).copy(), **kw)
    languages = corpus.spec.non_dominant
    records = []
    for step in range(1, cfg.stage2_steps + 1):
        lm_batch = _sample_lm_batch(rng, corpus, cfg.batch_size)
        if cfg.mix_mcl_languages:
            lang = languages[int(rng.integers(len(languages)))]
        else:
            lang = languages[(step - 1) % len(languages)]
        pair_batch = _sample_pair_batch(rng, corpus, lang, cfg.mcl_batch_size)
        value, grads, parts = combined_loss(params, lm_batch, pair_batch, mcl_cfg, plan, alpha)
        if not math.isfinite(value):
            raise NumericalFailure(f"stage 2 loss diverged at step {step}")
        if plan is not None:
            # batch means come from the model that produced this step's losses
            means = _batch_means(params, pair_batch, (area.l_to, area.l_bk), mcl_cfg.pooling)
        opt.step(params.weights, grads)
        if plan is not None:
            for key, u in means.items():
                estimators[key] = online_update(estimators[key], u)
                table = table.replace(key[0], key[1], estimators[key].current)
            plan = plan.with_table(table)
        if step % cfg.log_every == 0 or step == cfg.stage2_steps:
            rec = {"stage": 2, "step": step, "msft": parts["msft"],
                   "mcl": {str(k): v for k, v in parts["mcl"].items()}, "total": value}
            if plan is not None:
                rec["vector_checksum"] = table.checksum(layers=(area.l_to, area.l_bk))
            records.append(rec)
    return params, plan, records


def train_two_stage(cfg, corpus, model_cfg=None, stage1_params=None):
    """Stage 1 (MSFT), area selection on the stage-1 model, then stage 2.

    Pass ``stage1_params`` to reuse an existing stage-1 checkpoint; stage 1 is
    then skipped.
    """
    records = []
    if stage1_params is None:
        stage1_params, records = run_stage1(cfg, corpus, model_cfg)
    table, profiles, area = select_area(cfg, stage1_params, corpus)
    records.append({"stage": "select", "area": area.to_dict(),
                    "vector_checksum": table.checksum(),
                    "profile": [float(x) for x in average_profiles(list(profiles.values())).layer_distances]})
    params, plan, rec2 = run_stage2(cfg, corpus, stage1_params, table, area)
    records += rec2
    return TrainResult(params, stage1_params, plan, area, table, profiles, records)
