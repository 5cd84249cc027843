"""Global-and-local training: scheme losses, Adam, clipping, grad checks.

The joint objective is ``lambda * L_experts + (1 - lambda) * L_chair``:

* ``L_experts`` sums each decoder's own negative log-likelihood over the
  samples it is localized to (expert l sees only its intent's partition;
  the chair sees every sample), each term weighted by mu_l.
* ``L_chair`` is the negative log-likelihood of the combined distribution
  over all samples.

Losses are summed (not averaged) within a batch; gradients therefore
accumulate additively and are zeroed after each optimizer step. The
per-batch order of operations is fixed for reproducibility: forward,
backward, add l2 to gradients, clamp gradient values, Adam step, zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import OptimizerConfig, SchemeConfig
from .data import Corpus, EncodedSample, Sample
from .errors import ConfigError, DataError, DomainError
from .model import (
    COMBINE_CHAIR,
    COMBINE_MIXTURE,
    ModelParams,
    StepOutput,
    backward_teacher_forced,
    forward_teacher_forced,
)
from .tensor import Array, ParamSlot


def partition_by_intent(corpus: Corpus) -> dict[str, list[Sample]]:
    """Disjoint cover of the corpus keyed by intent label (sorted keys)."""
    parts: dict[str, list[Sample]] = {}
    for index, sample in enumerate(corpus.samples):
        if not sample.intent:
            raise DataError(f"sample {index} has no intent label")
        parts.setdefault(sample.intent, []).append(sample)
    return {intent: parts[intent] for intent in sorted(parts)}


def expert_index_map(intents: list[str]) -> dict[str, int]:
    return {intent: i for i, intent in enumerate(sorted(intents))}


# ---------------------------------------------------------------------------
# Scheme weights (mu, lambda)


@dataclass
class SchemeWeights:
    """Learnable loss weights for scheme S1: softmax mu, sigmoid lambda."""

    mu_logits: ParamSlot
    lambda_logit: ParamSlot

    @classmethod
    def fresh(cls, num_experts: int) -> "SchemeWeights":
        # Zero logits start at uniform mu and lambda = 0.5.
        return cls(
            ParamSlot("scheme.mu_logits", T.zeros(num_experts)),
            ParamSlot("scheme.lambda_logit", T.zeros(1)),
        )

    def slots(self) -> list[ParamSlot]:
        return [self.mu_logits, self.lambda_logit]


def learnable_weights_forward(
    scheme: SchemeConfig, weights: SchemeWeights
) -> tuple[Array, float]:
    """(mu over the k experts, lambda in (0, 1)); S1 only."""
    if scheme.scheme != "S1":
        raise ConfigError("learnable loss weights are only defined for scheme S1")
    mu = T.softmax(weights.mu_logits.value)
    lam = float(T.sigmoid(weights.lambda_logit.value)[0])
    return mu, lam


def resolve_scheme_weights(
    scheme: SchemeConfig, num_experts: int, weights: SchemeWeights | None
) -> tuple[Array, float]:
    """Full per-decoder weight vector (chair last) and lambda for one batch.

    The chair's term in the expert loss always carries the uniform 1/k
    weight; under S1 only the k expert entries are learnable.
    """
    k = max(num_experts, 1)
    if scheme.scheme == "S1":
        if weights is None:
            raise ConfigError("scheme S1 requires SchemeWeights")
        mu_experts, lam = learnable_weights_forward(scheme, weights)
        mu = np.concatenate([mu_experts, [1.0 / k]])
        return mu, lam
    mu = np.full(num_experts + 1, 1.0 / k)
    lam = scheme.lambda_value
    if lam is None or not 0.0 <= lam <= 1.0:
        raise ConfigError(f"scheme {scheme.scheme} has no fixed lambda in [0, 1]")
    return mu, float(lam)


# ---------------------------------------------------------------------------
# Losses


def nll_sequence(dists: list[Array], targets: list[int]) -> float:
    """Sum of -log p[y] over the sequence, with the probability floor."""
    total = 0.0
    floor = T.PROB_FLOOR
    for dist, y in zip(dists, targets):
        p = dist[y]
        total -= math.log(p if p > floor else floor)
    return total


def loss_experts(
    per_sample_steps: list[list[StepOutput]],
    per_sample_targets: list[list[int]],
    intents: list[str],
    expert_of: dict[str, int],
    mu: Array,
) -> float:
    """Localized expert loss: each decoder's own NLL on its own partition.

    Expert l accrues loss only on samples of its intent; the chair (last
    weight entry) accrues loss on every sample. Each decoder scores with
    its OWN distribution, not the combination.
    """
    chair = len(mu) - 1
    total = 0.0
    for steps, targets, intent in zip(per_sample_steps, per_sample_targets, intents):
        if intent not in expert_of and chair > 0:
            raise DataError(f"intent {intent!r} has no assigned expert")
        if chair > 0:
            owner = expert_of[intent]
            total += mu[owner] * nll_sequence([s.dists[owner] for s in steps], targets)
        total += mu[chair] * nll_sequence([s.dists[chair] for s in steps], targets)
    return total


def loss_chair(
    per_sample_steps: list[list[StepOutput]], per_sample_targets: list[list[int]]
) -> float:
    """Global chair loss: NLL of the combined distribution over all samples."""
    total = 0.0
    for steps, targets in zip(per_sample_steps, per_sample_targets):
        total += nll_sequence([s.combined for s in steps], targets)
    return total


def loss_total(expert_loss: float, chair_loss: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    return lam * expert_loss + (1.0 - lam) * chair_loss


@dataclass
class LossReport:
    """Per-batch (or epoch-mean) loss accounting.

    ``expert_losses`` are the raw per-decoder localized NLL values (chair
    last); ``total`` equals lambda * sum(mu * expert_losses) +
    (1 - lambda) * chair_loss for the reported mu and lambda.
    """

    expert_losses: list[float]
    chair_loss: float
    total: float
    token_count: int
    mu: list[float]
    lambda_value: float


def _nll_grad_seed(dist: Array, target: int, weight: float) -> Array | None:
    """Gradient of weight * -log(max(p[target], floor)) w.r.t. the distribution."""
    if weight == 0.0:
        return None
    seed = np.zeros_like(dist)
    p = dist[target]
    if p > T.PROB_FLOOR:
        seed[target] = -weight / p
    return seed


def train_batch(
    params: ModelParams,
    batch: list[EncodedSample],
    scheme: SchemeConfig,
    expert_of: dict[str, int],
    weights: SchemeWeights | None = None,
    compute_grads: bool = True,
) -> LossReport:
    """Forward (and optionally backward) over one mini-batch, losses summed.

    Gradients accumulate into the parameter slots; callers own the
    l2/clip/step/zero sequence. In single-decoder mode the total is the
    chair loss alone and lambda is reported as 0.
    """
    n_dec = params.num_decoders
    chair = params.chair_index
    single = n_dec == 1
    mode = COMBINE_MIXTURE if (scheme.moe_enabled and not single) else COMBINE_CHAIR
    if single:
        mu = np.array([1.0])
        lam = 0.0
    else:
        mu, lam = resolve_scheme_weights(scheme, params.num_experts, weights)

    raw_expert = [0.0] * n_dec
    chair_total = 0.0
    token_count = 0
    for enc_sample in batch:
        if not single and enc_sample.intent not in expert_of:
            raise DataError(f"intent {enc_sample.intent!r} has no assigned expert")
        owner = chair if single else expert_of[enc_sample.intent]
        targets = enc_sample.response_ids
        steps, cache = forward_teacher_forced(
            params, enc_sample.context_ids, targets, combine=mode
        )
        token_count += len(targets)
        sample_owner_nll = nll_sequence([s.dists[owner] for s in steps], targets)
        raw_expert[owner] += sample_owner_nll
        if not single and owner != chair:
            raw_expert[chair] += nll_sequence([s.dists[chair] for s in steps], targets)
        if single:
            chair_total += sample_owner_nll
        else:
            chair_total += loss_chair([steps], [targets])

        if compute_grads:
            d_dists: list[list[Array | None]] = []
            d_combined: list[Array | None] = []
            for step, y in zip(steps, targets):
                per_dec: list[Array | None] = [None] * n_dec
                if not single:
                    per_dec[owner] = _nll_grad_seed(step.dists[owner], y, lam * mu[owner])
                    if owner != chair:
                        extra = _nll_grad_seed(step.dists[chair], y, lam * mu[chair])
                        if extra is not None:
                            if per_dec[chair] is None:
                                per_dec[chair] = extra
                            else:
                                per_dec[chair] += extra
                d_dists.append(per_dec)
                d_combined.append(_nll_grad_seed(step.combined, y, 1.0 if single else 1.0 - lam))
            backward_teacher_forced(params, cache, d_dists, d_combined)

    if single:
        experts_weighted = chair_total
        total = chair_total
    else:
        experts_weighted = float(np.dot(mu, raw_expert))
        total = loss_total(experts_weighted, chair_total, lam)

    if compute_grads and scheme.scheme == "S1" and weights is not None and not single:
        # d total / d mu_l = lambda * E_l for the k learnable expert entries.
        d_mu = lam * np.asarray(raw_expert[:-1])
        mu_experts = mu[:-1]
        weights.mu_logits.grad += T.softmax_backward(d_mu, mu_experts)
        d_lam = experts_weighted - chair_total
        weights.lambda_logit.grad += d_lam * lam * (1.0 - lam)

    return LossReport(
        expert_losses=[float(v) for v in raw_expert],
        chair_loss=float(chair_total),
        total=float(total),
        token_count=token_count,
        mu=[float(v) for v in mu],
        lambda_value=float(lam),
    )


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    step_count: int = 0

    def ensure(self, slots: list[ParamSlot]) -> None:
        for slot in slots:
            if slot.name not in self.m:
                self.m[slot.name] = np.zeros_like(slot.value)
                self.v[slot.name] = np.zeros_like(slot.value)


def apply_l2(slots: list[ParamSlot], weight: float) -> None:
    if weight == 0.0:
        return
    for slot in slots:
        slot.grad += weight * slot.value


def clip_gradients(slots: list[ParamSlot], low: float = -5.0, high: float = 5.0) -> None:
    """Element-wise value clamp of every gradient into [low, high]."""
    for slot in slots:
        np.clip(slot.grad, low, high, out=slot.grad)


def adam_step(opt: OptimizerConfig, slots: list[ParamSlot], state: AdamState) -> None:
    """Bias-corrected Adam: theta -= alpha * m_hat / (sqrt(v_hat) + eps)."""
    state.ensure(slots)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for slot in slots:
        m = state.m[slot.name]
        v = state.v[slot.name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * slot.grad
        v *= opt.beta2
        v += (1.0 - opt.beta2) * slot.grad * slot.grad
        slot.value -= opt.alpha * (m / bc1) / (np.sqrt(v / bc2) + opt.epsilon)


def all_slots(params: ModelParams, weights: SchemeWeights | None) -> list[ParamSlot]:
    slots = params.slots()
    if weights is not None:
        slots.extend(weights.slots())
    return slots


# ---------------------------------------------------------------------------
# Epoch loop


def train_epoch(
    params: ModelParams,
    samples: list[EncodedSample],
    scheme: SchemeConfig,
    opt: OptimizerConfig,
    adam_state: AdamState,
    rng: np.random.Generator,
    expert_of: dict[str, int],
    weights: SchemeWeights | None = None,
) -> LossReport:
    """One pass over the corpus in shuffled mini-batches; token-mean report.

    Every report component is divided by the same epoch token count, so the
    total-decomposition identity survives the averaging (for fixed-weight
    schemes; under S1 the weights move between batches).
    """
    if not samples:
        raise DomainError("cannot train on an empty corpus")
    order = rng.permutation(len(samples))
    slots = all_slots(params, weights)
    n_dec = params.num_decoders
    sums = np.zeros(n_dec)
    chair_sum = 0.0
    total_sum = 0.0
    tokens = 0
    report = None
    for start in range(0, len(order), opt.batch_size):
        batch = [samples[i] for i in order[start:start + opt.batch_size]]
        report = train_batch(params, batch, scheme, expert_of, weights, compute_grads=True)
        apply_l2(slots, opt.l2_weight)
        clip_gradients(slots, opt.clip_low, opt.clip_high)
        adam_step(opt, slots, adam_state)
        for slot in slots:
            slot.zero_grad()
        sums += report.expert_losses
        chair_sum += report.chair_loss
        total_sum += report.total
        tokens += report.token_count
    assert report is not None
    return LossReport(
        expert_losses=[float(v / tokens) for v in sums],
        chair_loss=chair_sum / tokens,
        total=total_sum / tokens,
        token_count=tokens,
        mu=report.mu,
        lambda_value=report.lambda_value,
    )


@dataclass
class EpochRecord:
    epoch: int
    report: LossReport
    valid_score: float | None = None


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_score: float | None


def train_run(
    params: ModelParams,
    samples: list[EncodedSample],
    scheme: SchemeConfig,
    opt: OptimizerConfig,
    epochs: int,
    seed: int,
    expert_of: dict[str, int],
    weights: SchemeWeights | None = None,
    valid_scorer=None,
    progress=None,
) -> TrainResult:
    """Multi-epoch training with optional best-epoch selection.

    ``valid_scorer(params) -> float`` is called after every epoch; the
    parameter snapshot with the highest score is restored at the end. With
    no scorer the final-epoch parameters stand.
    """
    rng = np.random.default_rng(seed)
    adam_state = AdamState()
    history: list[EpochRecord] = []
    best_score: float | None = None
    best_epoch = epochs
    best_values: dict[str, Array] | None = None
    slots = all_slots(params, weights)
    for epoch in range(1, epochs + 1):
        report = train_epoch(params, samples, scheme, opt, adam_state, rng, expert_of, weights)
        record = EpochRecord(epoch, report)
        if valid_scorer is not None:
            record.valid_score = float(valid_scorer(params))
            if best_score is None or record.valid_score > best_score:
                best_score = record.valid_score
                best_epoch = epoch
                best_values = {slot.name: slot.value.copy() for slot in slots}
        history.append(record)
        if progress is not None:
            progress(record)
    if best_values is not None:
        for slot in slots:
            slot.value[...] = best_values[slot.name]
    return TrainResult(history, best_epoch, best_score)


# ---------------------------------------------------------------------------
# Verification


def teacher_forced_accuracy(
    params: ModelParams,
    samples: list[EncodedSample],
    scheme: SchemeConfig,
) -> float:
    """Fraction of response tokens where argmax(combined) hits the target."""
    single = params.num_decoders == 1
    mode = COMBINE_MIXTURE if (scheme.moe_enabled and not single) else COMBINE_CHAIR
    hits = 0
    total = 0
    for enc_sample in samples:
        steps, _ = forward_teacher_forced(
            params, enc_sample.context_ids, enc_sample.response_ids, combine=mode
        )
        for step, y in zip(steps, enc_sample.response_ids):
            hits += int(np.argmax(step.combined) == y)
            total += 1
    return hits / total if total else 0.0


def decoder_token_nll(
    params: ModelParams, samples: list[EncodedSample], decoder_index: int
) -> float:
    """Mean per-token NLL of one decoder's own distribution on a sample set."""
    total = 0.0
    tokens = 0
    for enc_sample in samples:
        steps, _ = forward_teacher_forced(
            params, enc_sample.context_ids, enc_sample.response_ids, combine=COMBINE_CHAIR
        )
        total += nll_sequence([s.dists[decoder_index] for s in steps], enc_sample.response_ids)
        tokens += len(enc_sample.response_ids)
    return total / tokens if tokens else math.inf


# Relative disagreement below this gradient magnitude is treated as absolute
# (finite-difference noise would otherwise dominate near-zero coordinates).
GRAD_CHECK_FLOOR = 1e-4


def grad_check(
    params: ModelParams,
    samples: list[EncodedSample],
    scheme: SchemeConfig,
    expert_of: dict[str, int],
    weights: SchemeWeights | None = None,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Compares every coordinate of every parameter slot (scheme weights
    included) on the summed batch loss. Intended for tiny instances; cost
    is two forward passes per coordinate.
    """
    slots = all_slots(params, weights)
    for slot in slots:
        slot.zero_grad()
    train_batch(params, samples, scheme, expert_of, weights, compute_grads=True)
    analytic = {slot.name: slot.grad.copy() for slot in slots}
    for slot in slots:
        slot.zero_grad()

    def loss_value() -> float:
        return train_batch(params, samples, scheme, expert_of, weights, compute_grads=False).total

    worst = 0.0
    for slot in slots:
        flat = slot.value.reshape(-1)
        grads = analytic[slot.name].reshape(-1)
        for idx in range(flat.shape[0]):
            original = flat[idx]
            flat[idx] = original + epsilon
            up = loss_value()
            flat[idx] = original - epsilon
            down = loss_value()
            flat[idx] = original
            numeric = (up - down) / (2.0 * epsilon)
            a = grads[idx]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), GRAD_CHECK_FLOOR)
            worst = max(worst, err)
    return worst
