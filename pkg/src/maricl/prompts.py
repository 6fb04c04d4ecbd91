"""Prompt template loading, rendering, and feature anonymization.

Templates are editable text assets with $placeholders (string.Template);
their hashes go into the run artifact so a run records exactly which prompt
text produced it.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template
from typing import Optional, Sequence

import numpy as np

from .formula import _FUNCTIONS, template_hash

TEMPLATE_NAMES = ("encoder_error_patterns", "encoder_sample_patterns",
                  "decoder", "critique", "refinement")

ALLOWED_OPERATORS = "+ - * / ( ) " + " ".join(
    f"{name}({','.join(['x'] * arity)})" for name, arity in
    sorted(_FUNCTIONS.items()))


@dataclass(frozen=True)
class PromptTemplates:
    texts: dict[str, str]

    def render(self, name: str, **fields: str) -> str:
        return Template(self.texts[name]).substitute(**fields)

    def hashes(self) -> dict[str, str]:
        return {name: template_hash(text)
                for name, text in sorted(self.texts.items())}


def load_templates(directory: Optional[str | Path] = None) -> PromptTemplates:
    """Load templates from a directory, defaulting to the packaged assets."""
    texts = {}
    for name in TEMPLATE_NAMES:
        if directory is not None:
            texts[name] = (Path(directory) / f"{name}.txt").read_text()
        else:
            ref = resources.files("maricl.assets") / f"{name}.txt"
            texts[name] = ref.read_text()
    return PromptTemplates(texts=texts)


def anonymous_names(n: int) -> tuple[str, ...]:
    return tuple(f"feat_{i}" for i in range(n))


def format_residual_table(feature_names: Sequence[str], x: np.ndarray,
                          y: np.ndarray, y_hat: np.ndarray,
                          r: np.ndarray) -> str:
    header = list(feature_names) + ["target", "base_pred", "residual"]
    lines = ["\t".join(header)]
    for i in range(len(y)):
        row = [f"{v:.4g}" for v in x[i]]
        row += [f"{y[i]:.4g}", f"{y_hat[i]:.4g}", f"{r[i]:+.4g}"]
        lines.append("\t".join(row))
    return "\n".join(lines)


def format_failure_table(feature_names: Sequence[str], x: np.ndarray,
                         y: np.ndarray, y_hat: np.ndarray,
                         err: np.ndarray) -> str:
    if len(y) == 0:
        return "(no failures: every row is within the failure threshold)"
    header = list(feature_names) + ["target", "prediction", "error"]
    lines = ["\t".join(header)]
    for i in range(len(y)):
        row = [f"{v:.4g}" for v in x[i]]
        row += [f"{y[i]:.4g}", f"{y_hat[i]:.4g}", f"{err[i]:+.4g}"]
        lines.append("\t".join(row))
    return "\n".join(lines)


def feature_description_block(names: Sequence[str],
                              descriptions: Optional[dict[str, str]] = None
                              ) -> str:
    lines = []
    for name in names:
        desc = (descriptions or {}).get(name, "numeric feature")
        lines.append(f"- {name}: {desc}")
    return "\n".join(lines)


def class_instruction_block(num_classes: Optional[int]) -> str:
    if not num_classes:
        return ""
    return ("\nThis is a classification task with classes 1.." +
            str(num_classes) + ": emit one line per class, 'Formula[c]: "
            "<expression>' for c = 1.." + str(num_classes) +
            ", each a per-class score.")
