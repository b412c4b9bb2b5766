"""Language vectors, subspace distances and the shift area on an untrained toy model.

Run with ``python demos/01_shift_geometry.py``. Nothing is written to disk.
"""

import numpy as np

from langshift.geometry import average_profiles, select_shift_area
from langshift.intervention import ShiftPlan, build_hooks, shift_backward, shift_toward
from langshift.toymodel import ModelConfig, SyntheticCorpusSpec, forward_with_hooks, init_params, make_parallel_corpus
from langshift.training import language_vectors, layer_profiles

spec = SyntheticCorpusSpec(num_concepts=16, num_train=400, num_calibration=64, num_test=16)
corpus = make_parallel_corpus(spec)
params = init_params(ModelConfig(vocab_size=spec.scheme.vocab_size, num_layers=6, hidden_dim=16), seed=0)

# One vector per (language, layer): the mean of mean-pooled calibration sentences.
table, dump = language_vectors(params, corpus)
print("language vector norms at layer 3:",
      {lang: round(float(np.linalg.norm(table.get(lang, 3))), 3) for lang in table.languages})

# Shifting toward the dominant language and back is an exact round trip.
h = dump.block(1, 3)[0]
moved = shift_toward(h, table.get(1, 3), table.get(0, 3))
print("round-trip error:", np.abs(shift_backward(moved, table.get(0, 3), table.get(1, 3)) - h).max())

# Distance between each shifted non-dominant language and the dominant one, per layer.
table, profiles = layer_profiles(params, corpus, table, dump)
mean_profile = average_profiles(list(profiles.values()))
print("mean distance per layer:", np.round(mean_profile.layer_distances, 2))

# The shift area: the ceil(L * beta) closest layers.
area = select_shift_area(mean_profile, beta=0.5)
print(f"shift area: L_to={area.l_to}, L_bk={area.l_bk}, chosen layers {area.selected_layers}")

# Hooks fire only for non-dominant queries.
plan = ShiftPlan(spec.dominant_language, area, table)
tokens = np.array([corpus.scheme.sentence(2, corpus.test[0])])
trace = forward_with_hooks(params, tokens, build_hooks(plan, 2))
print("interventions on a language-2 query:", trace.interventions)
print("interventions on a dominant query:", build_hooks(plan, spec.dominant_language))
