"""Two-stage training on a small corpus, then an ablation of the stage-2 ingredients.

Stage 1 trains the toy model on next-token prediction alone. Its language
vectors pick the shift area. Stage 2 then continues training four ways:

* with shifting and the contrastive loss (``full``),
* with neither (``msft_only``),
* and with each one dropped.

The contrastive loss first disturbs the non-dominant languages, and the model
needs a few hundred steps to recover; with a much shorter stage 2 the
``full`` and ``no_shift`` rows show low consistency.

Run with ``python demos/02_two_stage_training.py`` (about a minute on one core).
"""

from langshift.clieval import VARIANTS, evaluate, train_variant
from langshift.intervention import ShiftPlan
from langshift.toymodel import ModelConfig, SyntheticCorpusSpec, make_parallel_corpus
from langshift.training import TrainingConfig, run_stage1, select_area

spec = SyntheticCorpusSpec(num_concepts=24, num_train=1500, num_calibration=96, num_test=48)
corpus = make_parallel_corpus(spec)
model_cfg = ModelConfig(vocab_size=spec.scheme.vocab_size, num_layers=6, hidden_dim=16)
cfg = TrainingConfig(stage1_steps=400, stage2_steps=500)
eval_cfg = {"prompt_tokens": 2, "max_new_tokens": 8, "consistency_threshold": 0.9}

stage1, log = run_stage1(cfg, corpus, model_cfg)
print(f"stage 1 final loss {log[-1]['msft']:.3f}")
table, _, area = select_area(cfg, stage1, corpus)
print(f"shift area [{area.l_to}, {area.l_bk}]")

dom = spec.dominant_language
reference = evaluate(stage1, corpus, area, ShiftPlan(dom, area, table), "stage1", True, False, cfg.seed, eval_cfg)
print(f"{'variant':10s} {'nd-acc':>7s} {'consist':>8s} {'area dist':>10s}")
print(f"{'stage1':10s} {reference.non_dominant_accuracy(dom):7.3f} {reference.mean_consistency(dom):8.3f} "
      f"{reference.mean_area_distance:10.2f}")
for variant in VARIANTS:
    _, _, _, rep = train_variant(cfg, corpus, stage1, table, area, variant, eval_cfg)
    print(f"{variant:10s} {rep.non_dominant_accuracy(dom):7.3f} {rep.mean_consistency(dom):8.3f} "
          f"{rep.mean_area_distance:10.2f}")
