"""How far apart the languages sit, before and after shifting, seen through LDA.

Fits Fisher discriminant directions on pooled sentence vectors of every
language at one layer. Then it reports the spread of the per-language centroids
along the first direction, once for the raw states and once after moving each
non-dominant language onto the dominant centroid. A CSV of the projected points
is written to the working directory for plotting.

Run with ``python demos/03_lda_view.py``.
"""

from pathlib import Path

import numpy as np

from langshift.geometry import lda_fit, lda_project, lda_rows_to_csv
from langshift.intervention import shift_toward
from langshift.repstore import sentence_vectors
from langshift.toymodel import ModelConfig, SyntheticCorpusSpec, init_params, make_parallel_corpus
from langshift.training import language_vectors

LAYER = 3
spec = SyntheticCorpusSpec(num_concepts=16, num_train=400, num_calibration=80, num_test=16)
corpus = make_parallel_corpus(spec)
params = init_params(ModelConfig(vocab_size=spec.scheme.vocab_size, num_layers=6, hidden_dim=16), seed=0)
table, dump = language_vectors(params, corpus)
dom = spec.dominant_language

raw, shifted, labels = [], [], []
for lang in table.languages:
    x = sentence_vectors(dump, lang, LAYER)
    raw.append(x)
    shifted.append(x if lang == dom else shift_toward(x, table.get(lang, LAYER), table.get(dom, LAYER)))
    labels += [lang] * len(x)
labels = np.array(labels)

proj = lda_fit(np.vstack(raw), labels, components=3)
for name, parts in (("raw", raw), ("shifted", shifted)):
    coords = lda_project(proj, np.vstack(parts), components=(1,))[:, 0]
    centroids = [coords[labels == lang].mean() for lang in table.languages]
    print(f"{name:8s} centroid spread on component 1: {np.ptp(centroids):.4f}")

out = Path("lda_layer3.csv")
lda_rows_to_csv(out, labels.tolist(), lda_project(proj, np.vstack(raw), components=(1, 2)), (1, 2))
print(f"wrote {out}")
