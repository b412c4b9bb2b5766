"""Shift hooks: move non-dominant hidden states into the dominant language's
region at ``L_to`` and back to their own region at ``L_bk``."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, UnknownKeyError
from .geometry import LanguageVectorTable, ShiftArea
from .toymodel import Hook


def _check_dims(h, *vectors):
    d = h.shape[-1]
    for v in vectors:
        if np.shape(v) != (d,) and np.shape(v)[-1:] != (d,):
            raise InvalidInputError(f"vector of shape {np.shape(v)} does not match hidden size {d}")


def shift_toward(h, v_l, v_d):
    """``h - v_l + v_d`` row by row (works on arrays and autograd tensors)."""
    _check_dims(h, v_l, v_d)
    return h - v_l + v_d


def shift_backward(h_tilde, v_d, v_l):
    """``h_tilde - v_d + v_l``: undo a shift toward the dominant language."""
    _check_dims(h_tilde, v_d, v_l)
    return h_tilde - v_d + v_l


@dataclass(frozen=True)
class ShiftPlan:
    dominant_language: object
    area: ShiftArea
    vector_table: LanguageVectorTable
    enabled: bool = True

    def __post_init__(self):
        if not 1 <= self.area.l_to < self.area.l_bk <= self.vector_table.num_layers:
            raise InvalidInputError(
                f"area [{self.area.l_to}, {self.area.l_bk}] does not fit "
                f"1 <= L_to < L_bk <= {self.vector_table.num_layers}"
            )
        if self.dominant_language not in self.vector_table.vectors:
            raise InvalidInputError(f"dominant language {self.dominant_language!r} has no vectors")

    @property
    def l_to(self):
        return self.area.l_to

    @property
    def l_bk(self):
        return self.area.l_bk

    def with_table(self, table):
        return ShiftPlan(self.dominant_language, self.area, table, self.enabled)

    def to_dict(self):
        t = self.vector_table
        layers = (self.l_to, self.l_bk)
        return {
            "dominant_language": self.dominant_language,
            "L_to": self.l_to,
            "L_bk": self.l_bk,
            "enabled": self.enabled,
            "area": self.area.to_dict(),
            "vector_checksums": {str(lang): t.checksum(lang, layers) for lang in t.languages},
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def build_hooks(plan, query_language):
    """Hooks for a batch whose every sequence is in ``query_language``."""
    if query_language not in plan.vector_table.vectors:
        raise UnknownKeyError(f"unknown language {query_language!r}")
    if not plan.enabled:
        warnings.warn("shift plan is disabled; no hooks installed", RuntimeWarning, stacklevel=2)
        return []
    if query_language == plan.dominant_language:
        return []
    t, dom = plan.vector_table, plan.dominant_language
    vl_to, vd_to = t.get(query_language, plan.l_to), t.get(dom, plan.l_to)
    vl_bk, vd_bk = t.get(query_language, plan.l_bk), t.get(dom, plan.l_bk)
    return [
        Hook(plan.l_to, lambda h: shift_toward(h, vl_to, vd_to), "shift_toward"),
        Hook(plan.l_bk, lambda h: shift_backward(h, vd_bk, vl_bk), "shift_backward"),
    ]


def batch_hooks(plan, languages):
    """Hooks for a batch mixing languages; ``languages[b]`` is the language of row ``b``.

    Dominant-language rows receive zero vectors on both sides, so their states
    pass through unchanged.
    """
    languages = list(languages)
    if plan is None or not plan.enabled:
        return []
    if all(lang == plan.dominant_language for lang in languages):
        return []
    t, dom = plan.vector_table, plan.dominant_language
    d = t.hidden_dim

    def rows(layer, own):
        out = np.zeros((len(languages), 1, d))
        for b, lang in enumerate(languages):
            if lang != dom:
                out[b, 0] = t.get(lang if own else dom, layer)
        return out

    vl_to, vd_to = rows(plan.l_to, True), rows(plan.l_to, False)
    vl_bk, vd_bk = rows(plan.l_bk, True), rows(plan.l_bk, False)
    return [
        Hook(plan.l_to, lambda h: shift_toward(h, vl_to, vd_to), "shift_toward"),
        Hook(plan.l_bk, lambda h: shift_backward(h, vd_bk, vl_bk), "shift_backward"),
    ]


def dominant_like_layers(dump, table, language, dominant):
    """Per-layer shifted token streams: layer ``i`` moved by ``v_d^i - v_l^i``."""
    return [shift_toward(dump.block(language, i)[0], table.get(language, i), table.get(dominant, i))
            for i in range(1, dump.num_layers + 1)]
