"""Evaluation harness, pipeline commands and the ``langshift`` command line."""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    AreaTooSmallError,
    ComponentIndexError,
    ConfigurationError,
    InvalidInputError,
    LangshiftError,
)
from .geometry import (
    LanguageVectorTable,
    ShiftArea,
    average_profiles,
    lda_fit,
    lda_project,
    lda_rows_to_csv,
    select_shift_area,
)
from .intervention import ShiftPlan, build_hooks
from .repstore import PoolingMethod, read_container, read_dump, sentence_vectors, write_container, write_dump
from .toymodel import (
    BOS,
    PAD,
    ModelConfig,
    SyntheticCorpusSpec,
    collect_activations,
    forward_with_hooks,
    generate,
    load_checkpoint,
    load_corpus,
    make_parallel_corpus,
    pad_batch,
    save_checkpoint,
    save_corpus,
)
from .training import (
    TrainingConfig,
    area_distances,
    calibration_sentences,
    language_vectors,
    layer_profiles,
    run_stage1,
    run_stage2,
    select_area,
)

log = logging.getLogger("langshift")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG = 0, 1, 2
CONFIG_ERRORS = (ConfigurationError, AreaTooSmallError, ComponentIndexError)

VARIANTS = {
    # name: (shift, mcl)
    "msft_only": (False, False),
    "full": (True, True),
    "no_shift": (False, True),
    "no_mcl": (True, False),
}


# ---------------------------------------------------------------------------
# evaluation


def language_consistency(outputs, query_languages, scheme, threshold=0.9):
    """Fraction of generated sequences per query language that stay in that language.

    A sequence counts as consistent when at least ``threshold`` of its
    non-special tokens belong to the query language. A sequence with no
    content tokens at all is inconsistent.
    """
    if len(outputs) == 0:
        raise InvalidInputError("no generated outputs to score")
    if len(outputs) != len(query_languages):
        raise InvalidInputError("outputs and query languages differ in length")
    if not 0.0 < threshold <= 1.0:
        raise ConfigurationError(f"consistency threshold must lie in (0, 1], got {threshold}")
    hits, totals = {}, {}
    for seq, lang in zip(outputs, query_languages):
        langs = [scheme.language_of(t) for t in seq if not scheme.is_special(t)]
        ok = bool(langs) and sum(x == lang for x in langs) >= threshold * len(langs) - 1e-12
        hits[lang] = hits.get(lang, 0) + int(ok)
        totals[lang] = totals.get(lang, 0) + 1
    return {lang: hits[lang] / totals[lang] for lang in sorted(totals)}


def next_token_accuracy(params, sentences, hooks=(), batch_size=64):
    """Greedy next-token accuracy over every non-PAD target position."""
    correct = total = 0
    for start in range(0, len(sentences), batch_size):
        toks = pad_batch(sentences[start:start + batch_size])
        logits = forward_with_hooks(params, toks[:, :-1], hooks).logits
        targets = toks[:, 1:]
        keep = targets != PAD
        correct += int(((logits.argmax(axis=-1) == targets) & keep).sum())
        total += int(keep.sum())
    return correct / total


@dataclass
class EvalReport:
    variant: str
    shift: bool
    mcl: bool
    accuracy: dict
    consistency: dict
    area_distances: dict
    mean_area_distance: float
    seed: int

    def __post_init__(self):
        for name in ("accuracy", "consistency"):
            for lang, v in getattr(self, name).items():
                if not 0.0 <= v <= 1.0:
                    raise InvalidInputError(f"{name} for language {lang} is {v}, outside [0, 1]")

    def non_dominant_accuracy(self, dominant):
        vals = [v for k, v in self.accuracy.items() if int(k) != dominant]
        return float(np.mean(vals))

    def mean_consistency(self, dominant=None):
        vals = [v for k, v in self.consistency.items() if dominant is None or int(k) != dominant]
        return float(np.mean(vals))

    def to_dict(self):
        return {
            "variant": self.variant,
            "shift": self.shift,
            "mcl": self.mcl,
            "seed": self.seed,
            "accuracy": {str(k): _r(v) for k, v in self.accuracy.items()},
            "consistency": {str(k): _r(v) for k, v in self.consistency.items()},
            "area_distances": {str(k): _r(v) for k, v in self.area_distances.items()},
            "mean_area_distance": _r(self.mean_area_distance),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["variant"], d["shift"], d["mcl"], dict(d["accuracy"]), dict(d["consistency"]),
                   dict(d["area_distances"]), d["mean_area_distance"], d["seed"])


def _r(x):
    # reports carry 12 significant digits; enough for comparison, stable as text
    return float(f"{x:.12g}")


def measurement_plan(params, corpus, area, pooling=PoolingMethod.MEAN):
    """Shift plan built from vectors recomputed on the calibration split."""
    table, _ = language_vectors(params, corpus, pooling)
    return ShiftPlan(corpus.spec.dominant_language, area, table)


def evaluate(params, corpus, area, plan=None, variant="model", shift=False, mcl=False, seed=0,
             eval_cfg=None):
    """Accuracy, consistency and area distance of one trained model.

    ``plan`` supplies the hooks used at inference (``None`` runs unhooked). The
    area distance is always measured with vectors recomputed from the model's
    own calibration forwards, so different variants are measured the same way.
    """
    eval_cfg = {**DEFAULT_CONFIG["eval"], **(eval_cfg or {})}
    sch = corpus.scheme
    accuracy, outputs, queries = {}, [], []
    k = int(eval_cfg["prompt_tokens"])
    for lang in range(corpus.spec.num_languages):
        hooks = build_hooks(plan, lang) if plan is not None else ()
        sents = [sch.sentence(lang, c) for c in corpus.test]
        accuracy[lang] = next_token_accuracy(params, sents, hooks)
        prompts = np.array([s[:1 + k] for s in sents])
        outputs += generate(params, prompts, hooks, max_tokens=int(eval_cfg["max_new_tokens"]))
        queries += [lang] * len(sents)
    consistency = language_consistency(outputs, queries, sch, eval_cfg["consistency_threshold"])
    dists = area_distances(params, corpus, measurement_plan(params, corpus, area))
    return EvalReport(variant, shift, mcl, accuracy, consistency, dists,
                      float(np.mean(list(dists.values()))), seed)


# ---------------------------------------------------------------------------
# configuration


DEFAULT_CONFIG = {
    "corpus": SyntheticCorpusSpec().to_dict(),
    "model": {"num_layers": 8, "hidden_dim": 32, "num_heads": 2, "mlp_ratio": 4,
              "max_positions": 32, "init_scale": 1.0},
    "training": TrainingConfig().to_dict(),
    "eval": {"prompt_tokens": 2, "max_new_tokens": 12, "consistency_threshold": 0.9},
    "sweep": {"betas": [0.1, 0.3, 0.5]},
    "lda": {"layer": None, "components": [1, 3]},
    "parallel": False,
}


def default_config():
    return copy.deepcopy(DEFAULT_CONFIG)


def merge_config(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = merge_config(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_config(path=None, seed=None, beta=None, layers=None):
    """Defaults, overlaid by the JSON file at ``path`` and then by CLI flags."""
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigurationError("config root must be a JSON object")
        cfg = merge_config(cfg, user)
    if seed is not None:
        cfg["corpus"]["seed"] = seed
        cfg["training"]["seed"] = seed
    if beta is not None:
        cfg["training"]["beta"] = beta
    if layers is not None:
        cfg["training"]["area"] = list(layers)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    corpus_spec(cfg)
    training_config(cfg)
    model_config(cfg, corpus_spec(cfg))
    e = cfg["eval"]
    if int(e["prompt_tokens"]) < 1 or int(e["max_new_tokens"]) < 1:
        raise ConfigurationError("eval.prompt_tokens and eval.max_new_tokens must be >= 1")
    if not 0.0 < float(e["consistency_threshold"]) <= 1.0:
        raise ConfigurationError("eval.consistency_threshold must lie in (0, 1]")
    if int(e["prompt_tokens"]) >= cfg["corpus"]["sentence_length"][0]:
        raise ConfigurationError("eval.prompt_tokens must be shorter than the shortest sentence")


def corpus_spec(cfg):
    try:
        return SyntheticCorpusSpec.from_dict(cfg["corpus"])
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"corpus: {exc}") from exc


def model_config(cfg, spec):
    try:
        mc = ModelConfig(vocab_size=spec.scheme.vocab_size, **cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"model: {exc}") from exc
    if spec.sentence_length[1] + 2 > mc.max_positions:
        raise ConfigurationError("model.max_positions is shorter than the longest sentence")
    area = cfg["training"].get("area")
    if area is not None and not 1 <= area[0] < area[1] <= mc.num_layers:
        raise ConfigurationError(f"--layers {area[0]}:{area[1]} outside 1..{mc.num_layers}")
    return mc


def training_config(cfg):
    try:
        return TrainingConfig.from_dict(cfg["training"])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"training: {exc}") from exc


def config_hash(cfg):
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def worker_count(requested):
    raw = os.environ.get("SHIFCON_THREADS")
    if raw is None:
        return max(1, min(requested, os.cpu_count() or 1))
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"SHIFCON_THREADS must be a positive integer, got {raw!r}") from exc
    if cap < 1:
        raise ConfigurationError(f"SHIFCON_THREADS must be a positive integer, got {raw!r}")
    return max(1, min(requested, cap))


def parse_layers(text):
    try:
        a, b = (int(x) for x in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected A:B, got {text!r}") from exc
    if not 1 <= a < b:
        raise argparse.ArgumentTypeError(f"need 1 <= A < B, got {text!r}")
    return a, b


# ---------------------------------------------------------------------------
# output directory and manifest


class StageError(LangshiftError):
    def __init__(self, stage, error):
        super().__init__(f"stage '{stage}' failed: {error}")
        self.stage = stage
        self.error = error


class Run:
    """Output directory of one command; records every artifact for the manifest."""

    def __init__(self, command, cfg, out):
        self.command = command
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts = []
        self.extra = {}

    def path(self, name):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(name)
        return p

    def write_text(self, name, text):
        self.path(name).write_text(text)

    def write_json(self, name, obj):
        self.write_text(name, canonical_json(obj))

    def stage(self, name):
        return _Stage(name)

    def manifest(self):
        files = {}
        for name in sorted(set(self.artifacts)):
            p = self.out / name
            if p.is_file():
                files[name] = hashlib.sha256(p.read_bytes()).hexdigest()
        return {
            "command": self.command,
            "version": __version__,
            "config_hash": config_hash(self.cfg),
            "seeds": {"corpus": self.cfg["corpus"]["seed"],
                      "transitions": self.cfg["corpus"]["transition_seed"],
                      "training": self.cfg["training"]["seed"]},
            "artifacts": files,
            **self.extra,
        }

    def finish(self):
        text = canonical_json(self.manifest())
        (self.out / "manifest.json").write_text(text)
        return text


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, StageError) or not isinstance(exc, Exception):
            return False
        raise StageError(self.name, exc) from exc


# ---------------------------------------------------------------------------
# shared building blocks


def _lang_key(lang):
    return str(lang)


def save_vector_table(table, path):
    blocks = [(f"lang{lang}", table.vectors[lang], {"language": lang}) for lang in table.languages]
    write_container(path, "vectors", {"languages": list(table.languages), "num_layers": table.num_layers},
                    blocks)


def load_vector_table(path):
    _, meta, entries, arrays = read_container(path, expected_kind="vectors")
    langs = tuple(meta["languages"])
    return LanguageVectorTable(langs, meta["num_layers"], {lang: arrays[f"lang{lang}"] for lang in langs})


def vectors_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = table.hidden_dim
    w.writerow(["language", "layer"] + [f"dim{i}" for i in range(d)])
    for lang in table.languages:
        for layer in range(1, table.num_layers + 1):
            w.writerow([lang, layer] + [repr(float(x)) for x in table.get(lang, layer)])
    return buf.getvalue()


def profiles_csv(profiles, mean_profile):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    langs = sorted(profiles)
    w.writerow(["layer"] + [f"language_{lang}" for lang in langs] + ["mean"])
    for i in range(mean_profile.num_layers):
        w.writerow([i + 1] + [repr(float(profiles[lang].layer_distances[i])) for lang in langs]
                   + [repr(float(mean_profile.layer_distances[i]))])
    return buf.getvalue()


class Workspace:
    """Lazily builds (or loads from ``source``) the upstream artifacts a command needs."""

    def __init__(self, cfg, run, source=None):
        self.cfg = cfg
        self.run = run
        self.source = Path(source) if source else None
        self.train_cfg = training_config(cfg)
        self._corpus = self._stage1 = self._dump = self._table = None
        self._profiles = self._area = None

    def _src(self, name):
        if self.source is not None and (self.source / name).is_file():
            return self.source / name
        return None

    @property
    def corpus(self):
        if self._corpus is None:
            with self.run.stage("corpus"):
                if (p := self._src("corpus.shfc")) is not None:
                    self._corpus = load_corpus(p)
                else:
                    self._corpus = make_parallel_corpus(corpus_spec(self.cfg))
                save_corpus(self._corpus, self.run.path("corpus.shfc"))
                self.run.extra["corpus_checksum"] = self._corpus.checksum()
        return self._corpus

    @property
    def stage1(self):
        if self._stage1 is None:
            corpus = self.corpus
            with self.run.stage("stage1-train"):
                if (p := self._src("stage1.shfc")) is not None:
                    self._stage1 = load_checkpoint(p)
                else:
                    mc = model_config(self.cfg, corpus.spec)
                    self._stage1, records = run_stage1(self.train_cfg, corpus, mc)
                    self.run.write_text("stage1_log.jsonl",
                                        "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
                save_checkpoint(self._stage1, self.run.path("stage1.shfc"))
                self.run.extra["stage1_checksum"] = self._stage1.checksum()
        return self._stage1

    @property
    def dump(self):
        if self._dump is None:
            params = self.stage1
            with self.run.stage("dump"):
                if (p := self._src("activations.shfc")) is not None:
                    self._dump = read_dump(p)
                else:
                    self._dump = collect_activations(params, calibration_sentences(self.corpus),
                                                     model_id=f"stage1-{params.checksum()}")
                write_dump(self._dump, self.run.path("activations.shfc"))
        return self._dump

    @property
    def table(self):
        if self._table is None:
            dump = self.dump
            with self.run.stage("vectors"):
                if (p := self._src("vectors.shfc")) is not None:
                    self._table = load_vector_table(p)
                else:
                    from .geometry import compute_language_vectors
                    self._table = compute_language_vectors(dump, PoolingMethod(self.train_cfg.pooling))
                save_vector_table(self._table, self.run.path("vectors.shfc"))
                self.run.write_text("vectors.csv", vectors_csv(self._table))
        return self._table

    @property
    def profiles(self):
        if self._profiles is None:
            table, dump = self.table, self.dump
            with self.run.stage("profile"):
                _, self._profiles = layer_profiles(self.stage1, self.corpus, table, dump,
                                                   self.train_cfg.variance_threshold)
                self.run.write_text("profile.csv", profiles_csv(self._profiles, self.mean_profile))
        return self._profiles

    @property
    def mean_profile(self):
        return average_profiles([self._profiles[k] for k in sorted(self._profiles)])

    @property
    def area(self):
        if self._area is None:
            if self.train_cfg.area is not None:
                l_to, l_bk = self.train_cfg.area
                self._area = ShiftArea(l_to, l_bk, self.train_cfg.beta, tuple(range(l_to, l_bk + 1)), True)
                self.run.write_json("area.json", self._area.to_dict())
                return self._area
            if (p := self._src("area.json")) is not None and self.train_cfg.beta == json.loads(
                    p.read_text())["beta"]:
                self._area = ShiftArea.from_dict(json.loads(p.read_text()))
            else:
                self.profiles
                with self.run.stage("select"):
                    self._area = select_shift_area(self.mean_profile, self.train_cfg.beta)
            self.run.write_json("area.json", self._area.to_dict())
        return self._area


def train_variant(train_cfg, corpus, stage1, table, area, variant, eval_cfg):
    """Stage 2 for one ablation variant followed by its evaluation."""
    shift, mcl = VARIANTS[variant]
    tc = train_cfg.replace(shift=shift, mcl=mcl)
    params, plan, records = run_stage2(tc, corpus, stage1, table, area)
    report = evaluate(params, corpus, area, plan, variant, shift, mcl, tc.seed, eval_cfg)
    return params, plan, records, report


def _variant_job(args):
    train_cfg, corpus, stage1, table, area, variant, eval_cfg = args
    return train_variant(train_cfg, corpus, stage1, table, area, variant, eval_cfg)


def write_variant(run, prefix, params, plan, records, report):
    save_checkpoint(params, run.path(f"{prefix}model.shfc"))
    run.write_text(f"{prefix}train_log.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    if plan is not None:
        run.write_text(f"{prefix}plan.json", plan.to_json() + "\n")
        save_vector_table(plan.vector_table, run.path(f"{prefix}plan_vectors.shfc"))
    run.write_json(f"{prefix}report.json", report.to_dict())


def _run_jobs(cfg, jobs):
    workers = worker_count(len(jobs)) if cfg.get("parallel") else 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_variant_job, jobs))
    return [_variant_job(j) for j in jobs]


def stage1_reference(ws):
    """Evaluation of the stage-1 model with hooks from its calibration vectors."""
    with ws.run.stage("eval-stage1"):
        plan = ShiftPlan(ws.corpus.spec.dominant_language, ws.area, ws.table)
        return evaluate(ws.stage1, ws.corpus, ws.area, plan, "stage1", True, False,
                        ws.train_cfg.seed, ws.cfg["eval"])


# ---------------------------------------------------------------------------
# commands


def cmd_dump(cfg, out, source=None):
    run = Run("dump", cfg, out)
    Workspace(cfg, run, source).dump
    return run


def cmd_vectors(cfg, out, source=None):
    run = Run("vectors", cfg, out)
    ws = Workspace(cfg, run, source)
    ws.table
    run.extra["vector_checksum"] = ws.table.checksum()
    return run


def cmd_profile(cfg, out, source=None):
    run = Run("profile", cfg, out)
    Workspace(cfg, run, source).profiles
    return run


def cmd_select(cfg, out, source=None):
    run = Run("select", cfg, out)
    ws = Workspace(cfg, run, source)
    run.extra["area"] = ws.area.to_dict()
    return run


def cmd_train(cfg, out, source=None):
    """Two-stage training of the full method; writes the model, plan and log."""
    run = Run("train", cfg, out)
    ws = Workspace(cfg, run, source)
    area, table = ws.area, ws.table
    with run.stage("stage2-train"):
        params, plan, records = run_stage2(ws.train_cfg, ws.corpus, ws.stage1, table, area)
    save_checkpoint(params, run.path("model.shfc"))
    run.write_text("train_log.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    if plan is not None:
        run.write_text("plan.json", plan.to_json() + "\n")
        save_vector_table(plan.vector_table, run.path("plan_vectors.shfc"))
    run.extra["area"] = area.to_dict()
    return run


def cmd_eval(cfg, out, source=None):
    """Evaluate a model produced by ``train`` (read from ``source``)."""
    if source is None or not (Path(source) / "model.shfc").is_file():
        raise ConfigurationError("eval needs --from DIR holding the output of 'train'")
    run = Run("eval", cfg, out)
    ws = Workspace(cfg, run, source)
    src = Path(source)
    with run.stage("eval"):
        params = load_checkpoint(src / "model.shfc")
        area = ws.area
        plan = None
        if (src / "plan_vectors.shfc").is_file():
            plan = ShiftPlan(ws.corpus.spec.dominant_language, area, load_vector_table(src / "plan_vectors.shfc"))
        tc = ws.train_cfg
        report = evaluate(params, ws.corpus, area, plan, "full", tc.shift, tc.mcl, tc.seed, cfg["eval"])
    run.write_json("report.json", report.to_dict())
    return run


def cmd_pipeline(cfg, out, source=None):
    """Corpus, stage 1, dump, vectors, profile, selection, stage 2 and evaluation."""
    run = Run("pipeline", cfg, out)
    ws = Workspace(cfg, run, source)
    area, table = ws.area, ws.table
    reference = stage1_reference(ws)
    with run.stage("stage2-train"):
        params, plan, records, report = train_variant(ws.train_cfg, ws.corpus, ws.stage1, table, area,
                                                      "full", cfg["eval"])
    write_variant(run, "", params, plan, records, report)
    run.write_json("stage1_report.json", reference.to_dict())
    summary = {
        "area": area.to_dict(),
        "stage1_mean_area_distance": reference.to_dict()["mean_area_distance"],
        "stage2_mean_area_distance": report.to_dict()["mean_area_distance"],
        "distance_reduction": _r(1.0 - report.mean_area_distance / reference.mean_area_distance),
    }
    run.write_json("summary.json", summary)
    run.extra["area"] = area.to_dict()
    return run


def ablation_table(reports, dominant):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "shift", "mcl", "non_dominant_accuracy", "dominant_accuracy",
                "non_dominant_consistency", "mean_area_distance"])
    for r in reports:
        w.writerow([r.variant, int(r.shift), int(r.mcl), repr(_r(r.non_dominant_accuracy(dominant))),
                    repr(_r(r.accuracy[dominant] if dominant in r.accuracy else r.accuracy[str(dominant)])),
                    repr(_r(r.mean_consistency(dominant))), repr(_r(r.mean_area_distance))])
    return buf.getvalue()


def cmd_ablate(cfg, out, source=None):
    """Four stage-2 variants trained from one stage-1 checkpoint."""
    run = Run("ablate", cfg, out)
    ws = Workspace(cfg, run, source)
    area, table = ws.area, ws.table
    reference = stage1_reference(ws)
    names = list(VARIANTS)
    jobs = [(ws.train_cfg, ws.corpus, ws.stage1, table, area, v, cfg["eval"]) for v in names]
    with run.stage("ablate"):
        results = _run_jobs(cfg, jobs)
    reports = []
    for name, (params, plan, records, report) in zip(names, results):
        write_variant(run, f"{name}/", params, plan, records, report)
        reports.append(report)
    run.write_json("stage1_report.json", reference.to_dict())
    dom = ws.corpus.spec.dominant_language
    run.write_text("ablation.csv", ablation_table([reference] + reports, dom))
    run.extra["area"] = area.to_dict()
    return run


def cmd_beta_sweep(cfg, out, source=None, betas=None):
    """One stage-2 model per beta, all from the same stage-1 checkpoint."""
    run = Run("beta-sweep", cfg, out)
    betas = list(cfg["sweep"]["betas"] if betas is None else betas)
    if not betas:
        raise ConfigurationError("beta sweep needs at least one beta")
    ws = Workspace(cfg, run, source)
    ws.profiles
    mean_profile = ws.mean_profile
    dom = ws.corpus.spec.dominant_language
    rows, jobs, areas = [], [], {}
    for beta in betas:
        try:
            areas[beta] = select_shift_area(mean_profile, beta)
        except (AreaTooSmallError, InvalidInputError) as exc:
            rows.append((beta, None, str(exc)))
            continue
        tc = ws.train_cfg.replace(beta=beta)
        jobs.append((tc, ws.corpus, ws.stage1, ws.table, areas[beta], "full", cfg["eval"]))
    results = iter(_run_jobs(cfg, jobs)) if jobs else iter(())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["beta", "L_to", "L_bk", "num_layers", "non_dominant_accuracy", "non_dominant_consistency",
                "mean_area_distance", "error"])
    failed = {b for b, _, _ in rows}
    errors = {b: e for b, _, e in rows}
    for beta in betas:
        if beta in failed:
            w.writerow([beta, "", "", "", "", "", "", errors[beta]])
            continue
        params, plan, records, report = next(results)
        a = areas[beta]
        write_variant(run, f"beta_{beta}/", params, plan, records, report)
        w.writerow([beta, a.l_to, a.l_bk, len(a.area_layers), repr(_r(report.non_dominant_accuracy(dom))),
                    repr(_r(report.mean_consistency(dom))), repr(_r(report.mean_area_distance)), ""])
    run.write_text("beta_sweep.csv", buf.getvalue())
    return run


def cmd_export_lda(cfg, out, source=None, layer=None, components=None):
    """LDA projection of calibration sentence vectors at one layer, as CSV."""
    run = Run("export-lda", cfg, out)
    ws = Workspace(cfg, run, source)
    dump = ws.dump
    layer = layer or cfg["lda"]["layer"] or (dump.num_layers + 1) // 2
    components = tuple(components or cfg["lda"]["components"])
    if not 1 <= layer <= dump.num_layers:
        raise ConfigurationError(f"layer {layer} outside 1..{dump.num_layers}")
    if len(dump.languages) < 2:
        raise ConfigurationError("LDA needs at least two languages in the dump")
    with run.stage("lda"):
        pooling = PoolingMethod(ws.train_cfg.pooling)
        xs, labels = [], []
        for lang in dump.languages:
            sv = sentence_vectors(dump, lang, layer, pooling)
            xs.append(sv)
            labels += [lang] * len(sv)
        x = np.concatenate(xs)
        proj = lda_fit(x, np.array(labels))
        coords = lda_project(proj, x, components)
        lda_rows_to_csv(run.path(f"lda_layer{layer}.csv"), labels, coords, components)
    run.extra["lda"] = {"layer": layer, "components": list(components)}
    return run


COMMANDS = {
    "pipeline": cmd_pipeline,
    "dump": cmd_dump,
    "vectors": cmd_vectors,
    "profile": cmd_profile,
    "select": cmd_select,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "beta-sweep": cmd_beta_sweep,
    "export-lda": cmd_export_lda,
}


# ---------------------------------------------------------------------------
# command line


def build_parser():
    parser = argparse.ArgumentParser(prog="langshift", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config; missing keys take defaults")
        p.add_argument("--seed", type=int, help="seed for the corpus and training")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--beta", type=float, help="fraction of layers in the shift area")
        p.add_argument("--layers", type=parse_layers, metavar="A:B", help="manual shift area L_to:L_bk")
        p.add_argument("--from", dest="source", metavar="DIR",
                       help="reuse artifacts (corpus, stage-1 model, dump, ...) from an earlier output")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "beta-sweep":
            p.add_argument("--betas", type=lambda s: [float(x) for x in s.split(",")],
                           help="comma-separated list, e.g. 0.1,0.3,0.5")
        if name == "export-lda":
            p.add_argument("--layer", type=int)
            p.add_argument("--components", type=lambda s: [int(x) for x in s.split(",")],
                           help="1-based components, e.g. 1,3")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.beta, args.layers)
        worker_count(1)  # reject a malformed SHIFCON_THREADS before any work starts
        extra = {}
        if args.command == "beta-sweep":
            extra["betas"] = args.betas
        if args.command == "export-lda":
            extra.update(layer=args.layer, components=args.components)
        run = COMMANDS[args.command](cfg, args.out, args.source, **extra)
        run.finish()
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc.error, CONFIG_ERRORS) else EXIT_INTERNAL
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - last-resort reporting for the CLI
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    print(f"wrote {args.out}/manifest.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
