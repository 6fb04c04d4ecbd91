"""Multi-agent residual-correction training loop.

Flow per run: residuals -> high-residual pool -> batched context ->
K agents x (encode, decode, validate) -> T refinement passes (loss,
ensemble-conditioned failure set, critique, refine, validate) -> per-agent
best iteration by train loss -> global scores -> retention filter.

Agents advance in lockstep: each refinement pass snapshots every live
agent's current mechanism so the failure set conditions on the ensemble of
that instant. The provider ledger is the only shared mutable state.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .basemodels import BaseModel
from .data import (CLASSIFICATION, REGRESSION, Dataset, ResolvedSplit,
                   ScalerStats)
from .ensemble import (EnsembleModel, GAMMA_DEFAULT, Mechanism,
                       P_MIN_DEFAULT, TAU_SCALE, default_output_bounds,
                       global_score, mechanism_class_probs)
from .formula import (ExtractionError, FormulaAst, FormulaError,
                      evaluate_per_row, extract_class_formulas,
                      extract_formula, format_mechanism_block, parse)
from .prompts import (ALLOWED_OPERATORS, PromptTemplates, anonymous_names,
                      class_instruction_block, feature_description_block,
                      format_failure_table, format_residual_table,
                      load_templates)
from .providers import LlmProvider
from .residuals import (DEFAULT_GAMMA_S, HighResidualPool, residuals,
                        score_examples, select_pool)

log = logging.getLogger(__name__)

BATCH_SEPARATOR = "\n\n[next insight]\n\n"


@dataclass(frozen=True)
class AgentConfig:
    k_agents: int = 2
    iterations: int = 10            # refinement passes T
    batch_size: int = 10            # encoder batch size B
    kappa: float = 0.3              # high-residual fraction
    tau_fail: float = 0.5
    p_min: float = P_MIN_DEFAULT
    gamma: float = GAMMA_DEFAULT
    gamma_s: float = DEFAULT_GAMMA_S
    retry_budget: int = 3
    include_domain_context: bool = True
    anonymize_features: bool = False
    train_beta: float = 0.5         # classification blend during training
    temperature: float = 0.7
    max_tokens: int = 2048
    critique_rows: int = 20
    domain_context: str = ""
    feature_descriptions: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.k_agents < 1 or self.iterations < 0 or self.batch_size < 1:
            raise ValueError("need K >= 1, T >= 0, B >= 1")
        if not 0.0 < self.tau_fail < 1.0:
            raise ValueError("tau_fail must be in (0, 1)")
        if self.p_min < 0:
            raise ValueError("p_min must be >= 0")


def count_calls(k_agents: int, iterations: int, pool_size: int,
                batch_size: int) -> int:
    """Exact provider-call budget: K * ceil(pool/B) encoder calls plus
    K * (1 + 2T) decode/critique/refine calls (retries excluded)."""
    if min(k_agents, pool_size, batch_size) < 1 or iterations < 0:
        raise ValueError("all sizes must be positive (T may be 0)")
    batches = math.ceil(pool_size / batch_size)
    return k_agents * batches + k_agents * (1 + 2 * iterations)


@dataclass(frozen=True)
class AugmentedContext:
    feature_names: tuple[str, ...]
    features_block: str
    domain_block: str
    base_digest: str
    batch_tables: tuple[str, ...]
    alias_map: dict[str, str]       # original -> prompt name (identity if off)


@dataclass(frozen=True)
class Hypothesis:
    text: str
    implicated_features: tuple[str, ...] = ()


@dataclass
class IterationRecord:
    iteration: int
    hypothesis: str
    explanation: str
    formula_texts: tuple[str, ...]
    asts: tuple[FormulaAst, ...]
    loss: Optional[float] = None
    critique: Optional[str] = None


@dataclass
class MechanismState:
    agent_id: int
    records: list[IterationRecord] = field(default_factory=list)
    dropped: bool = False
    skipped_iterations: list[int] = field(default_factory=list)

    @property
    def best_index(self) -> int:
        losses = [r.loss if r.loss is not None else math.inf
                  for r in self.records]
        return int(np.argmin(losses))

    @property
    def current(self) -> IterationRecord:
        return self.records[-1]


@dataclass
class TrainTrace:
    config: AgentConfig
    template_hashes: dict[str, str]
    states: list[MechanismState]
    scores: list[float]
    retained_agents: list[int]
    events: list[str]
    expected_calls: int
    pool_size: int
    iteration_blocks: dict[int, list[str]]   # t -> mechanism file blocks

    def as_dict(self) -> dict:
        return {
            "template_hashes": self.template_hashes,
            "scores": self.scores,
            "retained_agents": self.retained_agents,
            "selected_iterations": [s.records[s.best_index].iteration
                                    if s.records and not s.dropped else None
                                    for s in self.states],
            "dropped_agents": [s.agent_id for s in self.states if s.dropped],
            "skipped_iterations": {s.agent_id: s.skipped_iterations
                                   for s in self.states},
            "expected_calls": self.expected_calls,
            "pool_size": self.pool_size,
            "events": self.events,
        }


def _replace_names(text: str, mapping: dict[str, str]) -> str:
    for original in sorted(mapping, key=len, reverse=True):
        text = text.replace(original, mapping[original])
    return text


def build_context(dataset: Dataset, pool: HighResidualPool,
                  base_model: BaseModel, config: AgentConfig,
                  original_names: Optional[Sequence[str]] = None
                  ) -> AugmentedContext:
    """Assemble the prompt-side view of the evidence.

    Batches come pre-ordered from the residual engine. When anonymization is
    on, every feature name is replaced by feat_i in every artifact; the
    replacement map is keyed by the original schema (pass original_names if
    the dataset columns were renamed upstream) so names embedded in the
    domain-context text are scrubbed too.
    """
    if pool.size == 0:
        raise ValueError("empty high-residual pool")
    names = dataset.feature_names
    if config.anonymize_features:
        aliases = anonymous_names(len(names))
        alias_map = dict(zip(original_names or names, aliases))
        prompt_names = aliases
        descriptions = {}
        domain = _replace_names(config.domain_context, alias_map) \
            if config.include_domain_context else ""
        digest = _replace_names(base_model.knowledge_digest(), alias_map)
    else:
        alias_map = {n: n for n in names}
        prompt_names = names
        descriptions = config.feature_descriptions
        domain = config.domain_context if config.include_domain_context else ""
        digest = base_model.knowledge_digest()

    batches = score_examples(pool, config.batch_size)
    tables = tuple(
        format_residual_table(prompt_names, pool.x_raw[b], pool.y[b],
                              pool.y_hat[b], pool.residuals[b])
        for b in batches)
    return AugmentedContext(
        feature_names=tuple(prompt_names),
        features_block=feature_description_block(prompt_names, descriptions),
        domain_block=domain if domain else "(none provided)",
        base_digest=digest,
        batch_tables=tables,
        alias_map=alias_map)


def encoder_template_name(agent_id: int) -> str:
    # odd agents study error patterns, even agents sample patterns
    return ("encoder_error_patterns" if agent_id % 2 == 1
            else "encoder_sample_patterns")


def encode(context: AugmentedContext, agent_id: int, provider: LlmProvider,
           templates: PromptTemplates, config: AgentConfig,
           events: Optional[list[str]] = None) -> Optional[Hypothesis]:
    """One provider call per batch; the hypothesis is the concatenation.

    An empty response retries up to the budget; a batch that stays empty is
    a training fault for this agent (returns None, caller drops it).
    """
    events = events if events is not None else []
    pieces = []
    for b, table in enumerate(context.batch_tables):
        prompt = templates.render(
            encoder_template_name(agent_id),
            features=context.features_block,
            domain_context=context.domain_block,
            base_digest=context.base_digest,
            high_residual_table=table)
        response = ""
        for attempt in range(config.retry_budget + 1):
            response = provider.complete(prompt,
                                         temperature=config.temperature,
                                         max_tokens=config.max_tokens,
                                         retry=attempt > 0)
            if response.strip():
                break
            events.append(f"agent {agent_id}: empty encoder response for "
                          f"batch {b} (attempt {attempt + 1})")
        if not response.strip():
            return None
        pieces.append(response)
    text = BATCH_SEPARATOR.join(pieces)
    implicated = ()
    for line in text.splitlines():
        if line.strip().startswith("implicated_features:"):
            raw = line.split(":", 1)[1]
            implicated = tuple(p.strip() for p in raw.split(",") if p.strip())
    unknown = set(implicated) - set(context.feature_names)
    if unknown:
        log.info("hypothesis implicates unknown feature(s) %s", sorted(unknown))
    return Hypothesis(text=text, implicated_features=implicated)


def _strip_formula_lines(text: str) -> str:
    keep = [ln for ln in text.splitlines()
            if not ln.lstrip().startswith("Formula")]
    return "\n".join(keep).strip()


def _parse_and_validate(response: str, dataset: Dataset,
                        train_x: np.ndarray) -> tuple[str, tuple[str, ...],
                                                      tuple[FormulaAst, ...]]:
    """Extraction + parse + sandbox evaluation on the train matrix.

    Raises ExtractionError / FormulaError (syntax, type) or FormulaError
    with numeric kind when outputs go non-finite.
    """
    if dataset.task == REGRESSION:
        sources = [extract_formula(response)]
    else:
        sources = extract_class_formulas(response, dataset.num_classes)
    asts = []
    for src in sources:
        ast = parse(src, dataset.feature_names)
        for warning in ast.lint_warnings:
            log.warning("formula lint: %s", warning)
        _, finite = evaluate_per_row(ast, train_x)
        if not finite.all():
            err = FormulaError(f"formula produced {int((~finite).sum())} "
                               "non-finite value(s) on training rows")
            err.kind = "numeric"
            raise err
        asts.append(ast)
    explanation = _strip_formula_lines(response)
    return explanation, tuple(s.text for s in sources), tuple(asts)


def _generate_mechanism(render_prompt, dataset: Dataset, train_x: np.ndarray,
                        provider: LlmProvider, config: AgentConfig,
                        events: list[str], agent_id: int):
    """Call-the-provider-and-validate with the regeneration protocol.

    The first call is primary; each regeneration appends the validator
    message to the prompt and is ledgered as a retry. Returns None when the
    retry budget is exhausted.
    """
    error_note = ""
    for attempt in range(config.retry_budget + 1):
        prompt = render_prompt(error_note)
        response = provider.complete(prompt,
                                     temperature=config.temperature,
                                     max_tokens=config.max_tokens,
                                     retry=attempt > 0)
        if not response.strip():
            events.append(f"agent {agent_id}: empty response "
                          f"(attempt {attempt + 1})")
            error_note = "\nYour previous reply was empty. Try again.\n"
            continue
        try:
            return _parse_and_validate(response, dataset, train_x)
        except (ExtractionError, FormulaError) as exc:
            kind = getattr(exc, "kind", "syntax")
            events.append(f"agent {agent_id}: regeneration after {kind} "
                          f"failure: {exc}")
            error_note = (f"\nYour previous formula was rejected "
                          f"({kind} problem: {exc}). Fix it and reply in the "
                          "same format.\n")
    return None


def mechanism_loss(asts: Sequence[FormulaAst], base_model: BaseModel,
                   x: np.ndarray, y: np.ndarray, task: str,
                   output_bounds: tuple[float, float],
                   train_beta: float = 0.5, tau_k: float = 1.0,
                   num_classes: Optional[int] = None,
                   row_ids: Optional[np.ndarray] = None) -> float:
    """Per-agent training loss with the correction at full weight.

    Regression: mean squared error of f_ML(x) + Delta(x) (Delta clipped to
    the symmetric correction band, the sum left unclipped). Classification:
    mean cross-entropy of beta * P_ML + (1 - beta) * Q. Rejected evaluation
    returns +inf so it can never be selected as best.
    """
    if task == REGRESSION:
        vals, finite = evaluate_per_row(asts[0], x)
        if not finite.all():
            return math.inf
        lo, hi = output_bounds
        width = hi - lo
        delta = np.clip(vals, -width, width)
        pred = base_model.predict(x, row_ids=row_ids) + delta
        return float(((pred - y) ** 2).mean())
    q = mechanism_class_probs(asts, x, tau_k)
    if q is None:
        return math.inf
    p_ml = base_model.predict_proba(x, row_ids=row_ids)
    blend = train_beta * p_ml + (1.0 - train_beta) * q
    labels = y.astype(int)
    p_true = np.clip(blend[np.arange(len(labels)), labels - 1], 1e-12, None)
    return float(-np.log(p_true).mean())


def failure_set(predictions: np.ndarray, y: np.ndarray, tau_fail: float,
                task: str) -> np.ndarray:
    """Indices where the ensemble still fails.

    Regression: |y_hat - y| > tau_fail. Classification: predictions are the
    ensemble probability rows and a row fails when the true-class
    probability is strictly below 1 - tau_fail.
    """
    if task == REGRESSION:
        return np.flatnonzero(np.abs(predictions - y) > tau_fail)
    labels = y.astype(int)
    p_true = predictions[np.arange(len(labels)), labels - 1]
    return np.flatnonzero(p_true < 1.0 - tau_fail)


def _ensemble_training_predictions(states: list[MechanismState],
                                   base_model: BaseModel, x: np.ndarray,
                                   task: str,
                                   output_bounds: tuple[float, float],
                                   train_beta: float,
                                   row_ids: Optional[np.ndarray]) -> np.ndarray:
    """Snapshot ensemble with uniform weights over live agents.

    Per-agent scores are not known during training, so live mechanisms get
    equal attention; mechanisms that reject on the train matrix drop out of
    the snapshot.
    """
    live: list[IterationRecord] = [s.current for s in states if not s.dropped]
    lo, hi = output_bounds
    if task == REGRESSION:
        base = base_model.predict(x, row_ids=row_ids)
        deltas = []
        width = hi - lo
        for rec in live:
            vals, finite = evaluate_per_row(rec.asts[0], x)
            if finite.all():
                deltas.append(np.clip(vals, -width, width))
        if not deltas:
            return np.clip(base, lo, hi)
        return np.clip(base + np.mean(deltas, axis=0), lo, hi)
    p_ml = base_model.predict_proba(x, row_ids=row_ids)
    qs = []
    for rec in live:
        q = mechanism_class_probs(rec.asts, x, 1.0)
        if q is not None:
            qs.append(q)
    if not qs:
        return p_ml
    return train_beta * p_ml + (1.0 - train_beta) * np.mean(qs, axis=0)


def critique(state: MechanismState, context: AugmentedContext,
             failures_table: str, provider: LlmProvider,
             templates: PromptTemplates, config: AgentConfig,
             events: list[str]) -> Optional[str]:
    """One textual-gradient call; empty responses after retries skip the
    iteration (previous mechanism carries forward)."""
    rec = state.current
    prompt = templates.render(
        "critique",
        hypothesis=rec.hypothesis,
        explanation=rec.explanation,
        formula="; ".join(rec.formula_texts),
        loss=f"{rec.loss:.6f}" if rec.loss is not None else "n/a",
        failure_table=failures_table)
    for attempt in range(config.retry_budget + 1):
        response = provider.complete(prompt,
                                     temperature=config.temperature,
                                     max_tokens=config.max_tokens,
                                     retry=attempt > 0)
        if response.strip():
            return response
        events.append(f"agent {state.agent_id}: empty critique "
                      f"(attempt {attempt + 1})")
    return None


def _serialize_state(state: MechanismState) -> str:
    parts = []
    for rec in state.records:
        parts.append(
            f"[iteration {rec.iteration}]\n"
            f"hypothesis: {rec.hypothesis}\n"
            f"formula: {'; '.join(rec.formula_texts)}\n"
            f"loss: {rec.loss if rec.loss is not None else 'n/a'}\n"
            f"critique: {rec.critique or '(none)'}")
    return "\n\n".join(parts)


def train(dataset: Dataset, split: ResolvedSplit, base_model: BaseModel,
          config: AgentConfig, provider: LlmProvider,
          scaler: ScalerStats,
          source_feature_names: Optional[Sequence[str]] = None,
          templates: Optional[PromptTemplates] = None,
          ) -> tuple[EnsembleModel, TrainTrace]:
    """Run the full training procedure and assemble the inference ensemble.

    `dataset` must already be in model space (scaler applied); `scaler` is
    recorded so the bundle can map raw inputs at prediction time. With a
    scripted provider and a fixed split seed the result is bit-identical
    across runs.
    """
    templates = templates or load_templates()
    events: list[str] = []
    source_names = tuple(source_feature_names or dataset.feature_names)

    if config.anonymize_features:
        aliases = anonymous_names(dataset.n_features)
        work = dataset.rename_features(aliases)
        base_model = dataclasses.replace(base_model, feature_names=aliases)
    else:
        work = dataset

    train_idx = split.train
    train_x = work.features[train_idx]
    train_y = work.targets[train_idx]
    output_bounds = default_output_bounds(train_y) \
        if work.task == REGRESSION else (0.0, 1.0)
    tau = TAU_SCALE * (output_bounds[1] - output_bounds[0])

    table = residuals(base_model, work, split)
    pool = select_pool(table, config.kappa, work, split,
                       gamma_s=config.gamma_s)
    context = build_context(work, pool, base_model, config,
                            original_names=source_names)
    expected = count_calls(config.k_agents, config.iterations, pool.size,
                           config.batch_size)

    # initialization pass: encode + decode per agent
    states: list[MechanismState] = []
    for agent_id in range(1, config.k_agents + 1):
        state = MechanismState(agent_id=agent_id)
        states.append(state)
        hypothesis = encode(context, agent_id, provider, templates, config,
                            events)
        if hypothesis is None:
            state.dropped = True
            events.append(f"agent {agent_id}: dropped (empty encoder "
                          f"response after {config.retry_budget} retries)")
            continue

        def render_decoder(error_note: str, _h=hypothesis) -> str:
            return templates.render(
                "decoder",
                hypothesis=_h.text,
                feature_names=", ".join(context.feature_names),
                allowed_operators=ALLOWED_OPERATORS,
                class_instructions=class_instruction_block(
                    work.num_classes if work.task == CLASSIFICATION
                    else None)) + error_note

        result = _generate_mechanism(render_decoder, work, train_x, provider,
                                     config, events, agent_id)
        if result is None:
            state.dropped = True
            events.append(f"agent {agent_id}: dropped (initial decode failed "
                          f"after {config.retry_budget} retries)")
            continue
        explanation, texts, asts = result
        state.records.append(IterationRecord(
            iteration=0, hypothesis=hypothesis.text, explanation=explanation,
            formula_texts=texts, asts=asts))

    iteration_blocks: dict[int, list[str]] = {
        0: [format_mechanism_block(s.current.explanation,
                                   s.current.formula_texts[0]
                                   if len(s.current.formula_texts) == 1
                                   else list(s.current.formula_texts))
            for s in states if not s.dropped]}

    # refinement passes (lockstep across agents)
    for t in range(config.iterations):
        snapshot = _ensemble_training_predictions(
            states, base_model, train_x, work.task, output_bounds,
            config.train_beta, train_idx)
        for state in states:
            if state.dropped:
                continue
            rec = state.current
            rec.loss = mechanism_loss(
                rec.asts, base_model, train_x, train_y, work.task,
                output_bounds, config.train_beta, num_classes=work.num_classes,
                row_ids=train_idx)
            fail_idx = failure_set(snapshot, train_y, config.tau_fail,
                                   work.task)
            if work.task == REGRESSION:
                errs = snapshot[fail_idx] - train_y[fail_idx]
                preds_shown = snapshot[fail_idx]
            else:
                labels = train_y.astype(int)
                p_true = snapshot[np.arange(len(labels)), labels - 1]
                errs = p_true[fail_idx] - 1.0
                preds_shown = p_true[fail_idx]
            top = np.argsort(-np.abs(errs))[: config.critique_rows]
            fail_table = format_failure_table(
                context.feature_names, train_x[fail_idx][top],
                train_y[fail_idx][top], preds_shown[top], errs[top])

            g = critique(state, context, fail_table, provider, templates,
                         config, events)
            if g is None:
                state.skipped_iterations.append(t)
                events.append(f"agent {state.agent_id}: iteration {t} "
                              "skipped (no critique); mechanism carried "
                              "forward")
                continue
            rec.critique = g

            def render_refinement(error_note: str, _s=state) -> str:
                return templates.render(
                    "refinement",
                    high_residual_table="\n\n".join(context.batch_tables),
                    feature_names=", ".join(context.feature_names),
                    state=_serialize_state(_s),
                    allowed_operators=ALLOWED_OPERATORS,
                    class_instructions=class_instruction_block(
                        work.num_classes if work.task == CLASSIFICATION
                        else None)) + error_note

            refined = _generate_mechanism(render_refinement, work, train_x,
                                          provider, config, events,
                                          state.agent_id)
            if refined is None:
                best = state.records[state.best_index]
                events.append(f"agent {state.agent_id}: iteration {t} "
                              "refinement invalid after retries; best-so-far "
                              f"mechanism (iteration {best.iteration}) "
                              "retained")
                state.records.append(dataclasses.replace(
                    best, iteration=t + 1, loss=None, critique=None))
                continue
            explanation, texts, asts = refined
            state.records.append(IterationRecord(
                iteration=t + 1, hypothesis=explanation,
                explanation=explanation, formula_texts=texts, asts=asts))
        iteration_blocks[t + 1] = [
            format_mechanism_block(s.current.explanation,
                                   s.current.formula_texts[0]
                                   if len(s.current.formula_texts) == 1
                                   else list(s.current.formula_texts))
            for s in states if not s.dropped]

    # final losses, selection, scoring, retention
    mechanisms = []
    scores: list[float] = []
    retained: list[int] = []
    for state in states:
        if state.dropped:
            scores.append(0.0)
            continue
        for rec in state.records:
            if rec.loss is None:
                rec.loss = mechanism_loss(
                    rec.asts, base_model, train_x, train_y, work.task,
                    output_bounds, config.train_beta,
                    num_classes=work.num_classes, row_ids=train_idx)
        best = state.records[state.best_index]
        p = global_score(best.asts, base_model, train_x, train_y, work.task,
                         tau, beta=config.train_beta,
                         output_bounds=output_bounds,
                         num_classes=work.num_classes, row_ids=train_idx)
        scores.append(p)
        if p > config.p_min:
            retained.append(state.agent_id)
            mechanisms.append(Mechanism(
                agent_id=state.agent_id, explanation=best.explanation,
                formula_texts=best.formula_texts, asts=best.asts, p=p,
                pool=pool, selected_iteration=best.iteration))
        else:
            events.append(f"agent {state.agent_id}: filtered "
                          f"(p={p:.4f} <= p_min={config.p_min})")
    if not mechanisms:
        events.append("no mechanisms retained; inference degrades to the "
                      "base model")

    model = EnsembleModel(
        base_model=base_model, mechanisms=tuple(mechanisms), task=work.task,
        feature_names=work.feature_names,
        source_feature_names=source_names, scaler=scaler,
        output_bounds=output_bounds, beta=config.train_beta,
        gamma=config.gamma, tau=tau, p_min=config.p_min,
        num_classes=work.num_classes)
    trace = TrainTrace(
        config=config, template_hashes=templates.hashes(), states=states,
        scores=scores, retained_agents=retained, events=events,
        expected_calls=expected, pool_size=pool.size,
        iteration_blocks=iteration_blocks)
    return model, trace
