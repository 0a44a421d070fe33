"""Routing-conditioned supervised fine-tuning.

Batches are mode-pure (the decoder takes a single route per forward
pass) and the schedule strictly alternates no-think/think batches while
both pools have work left, which makes the paired-step divergence
identity well defined: under plain SGD the expert gap beta1 - beta0
equals minus the learning rate times the cumulative difference of the
per-step mode gradients, exactly. Momentum is available for convergence
speed but breaks that identity, so the log only asserts it for plain SGD.

Loss is per-token mean within an example and example-mean within a
batch by default; ``token_sum`` is exposed for the length-asymmetry
study. The loss mask covers the full target including the end token;
prompt and control tokens contribute no loss.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import BatchingError, DataError
from .model import (
    DenseModel,
    ModelParams,
    _swiglu,
    decoder_logits,
    dense_mlp_apply,
    routed_mlp_apply,
    segment_group,
)
from .params import ParamVector, as_leaves, value_and_grad
from .tensor import Tensor, add, mul, no_grad, softmax_cross_entropy
from .tokenizer import (
    BOS_ID,
    CTRL_NOTHINK_ID,
    CTRL_THINK_ID,
    EOS_ID,
    PAD_ID,
    Route,
    Vocabulary,
    control_token_id,
    encode,
    resolve_route,
)


@dataclass(frozen=True)
class ChatExample:
    """One supervised example: prompt ids ending in a control token, target ids, mode."""

    prompt_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    mode: Route
    loss_mask: tuple[bool, ...]

    @classmethod
    def build(cls, prompt_ids: Sequence[int], target_ids: Sequence[int], mode: Route) -> "ChatExample":
        mask = (False,) * len(prompt_ids) + (True,) * len(target_ids)
        return cls(tuple(prompt_ids), tuple(target_ids), Route(mode), mask)

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prompt_ids + self.target_ids


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "sgd"  # sgd | sgd_momentum
    momentum: float = 0.9
    reduction: str = "example_mean"  # example_mean | token_sum
    shuffle: bool = True
    update_segments: str = "all"  # all | experts_only (freezes the shared backbone)
    grad_clip: float | None = None  # global-norm clip; breaks the exact step identities

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.reduction not in ("example_mean", "token_sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.update_segments not in ("all", "experts_only"):
            raise ValueError(f"unknown update_segments {self.update_segments!r}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "momentum": self.momentum,
            "reduction": self.reduction,
            "shuffle": self.shuffle,
            "update_segments": self.update_segments,
            "grad_clip": self.grad_clip,
        }


def _xent_reduction(reduction: str) -> str:
    return "example_mean" if reduction == "example_mean" else "sum"


def make_batch(examples: Sequence[ChatExample]) -> dict:
    """Pad to a rectangle and shift: inputs predict the next token."""
    width = max(len(ex.tokens) for ex in examples)
    n = len(examples)
    tokens = np.full((n, width), PAD_ID, dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    for i, ex in enumerate(examples):
        seq = ex.tokens
        tokens[i, : len(seq)] = seq
        mask[i, : len(seq)] = ex.loss_mask
    return {
        "inputs": tokens[:, :-1],
        "labels": tokens[:, 1:],
        "label_mask": mask[:, 1:],
    }


def _single_mode(examples: Sequence[ChatExample]) -> Route:
    modes = {ex.mode for ex in examples}
    if len(modes) != 1:
        raise BatchingError(f"batch mixes modes {sorted(int(m) for m in modes)}")
    return modes.pop()


def batch_loss_fn(model: ModelParams | DenseModel, route: Route | None, reduction: str):
    """Loss closure over parameter leaves, for value_and_grad."""
    cfg = model.config
    routed = isinstance(model, ModelParams)

    def loss_fn(leaves: Mapping[str, Tensor], batch: dict) -> Tensor:
        apply = routed_mlp_apply(leaves, route) if routed else dense_mlp_apply(leaves)
        logits = decoder_logits(cfg, leaves, batch["inputs"], apply)
        return softmax_cross_entropy(
            logits, batch["labels"], batch["label_mask"], reduction=_xent_reduction(reduction)
        )

    return loss_fn


def mode_loss(
    model: ModelParams | DenseModel,
    examples: Sequence[ChatExample],
    reduction: str = "example_mean",
) -> float:
    """Mean causal LM loss of a mode-pure batch, using that mode's route."""
    route = _single_mode(examples)
    batch = make_batch(examples)
    with no_grad():
        leaves = as_leaves(model.params)
        loss = batch_loss_fn(model, route, reduction)(leaves, batch)
    return float(loss.data)


def mode_loss_grad(
    model: ModelParams | DenseModel,
    examples: Sequence[ChatExample],
    reduction: str = "example_mean",
) -> tuple[float, ParamVector]:
    route = _single_mode(examples)
    batch = make_batch(examples)
    return value_and_grad(batch_loss_fn(model, route, reduction), model.params, batch)


def split_by_mode(dataset: Sequence[ChatExample]) -> tuple[list[ChatExample], list[ChatExample]]:
    d0 = [ex for ex in dataset if ex.mode is Route.NO_THINK]
    d1 = [ex for ex in dataset if ex.mode is Route.THINK]
    return d0, d1


def mode_weights(dataset: Sequence[ChatExample]) -> tuple[float, float]:
    if not dataset:
        raise ValueError("dataset is empty")
    d0, d1 = split_by_mode(dataset)
    return len(d0) / len(dataset), len(d1) / len(dataset)


def full_objective(
    model: ModelParams | DenseModel,
    dataset: Sequence[ChatExample],
    reduction: str = "example_mean",
) -> float:
    """Example-frequency-weighted sum of the two mode losses."""
    pi0, pi1 = mode_weights(dataset)
    d0, d1 = split_by_mode(dataset)
    total = 0.0
    if d0:
        total += pi0 * mode_loss(model, d0, reduction)
    if d1:
        total += pi1 * mode_loss(model, d1, reduction)
    return total


def full_objective_grad(
    model: ModelParams | DenseModel,
    dataset: Sequence[ChatExample],
    reduction: str = "example_mean",
) -> tuple[float, ParamVector]:
    """Value and gradient of the weighted objective through a single graph."""
    pi0, pi1 = mode_weights(dataset)
    d0, d1 = split_by_mode(dataset)
    batches = [(Route(r), make_batch(part), pi) for r, (part, pi) in
               enumerate(((d0, pi0), (d1, pi1))) if part]

    def loss_fn(leaves: Mapping[str, Tensor], _batch) -> Tensor:
        total = None
        for route, batch, pi in batches:
            part = batch_loss_fn(model, route, reduction)(leaves, batch)
            term = mul(part, pi)
            total = term if total is None else add(total, term)
        return total

    return value_and_grad(loss_fn, model.params, None)


def sgd_step(params: ParamVector, grads: ParamVector, learning_rate: float) -> ParamVector:
    """p <- p - lr * g per coordinate."""
    return params.add_scaled(grads, -learning_rate)


# ---------------------------------------------------------------------------
# trajectory log
# ---------------------------------------------------------------------------

TRAJECTORY_COLUMNS = (
    "step",
    "mode",
    "loss",
    "active_grad_norm",
    "expert_gap_norm",
    "cum_grad_diff_norm",
)


@dataclass
class StepRecord:
    step: int
    mode: int
    loss: float
    active_grad_norm: float
    expert_gap_norm: float
    cum_grad_diff_norm: float


@dataclass
class TrajectoryLog:
    """Per-step training records plus the running sum of paired gradient differences.

    ``cum_grad_diff`` maps expert-local segment suffixes (e.g.
    ``layer0.w_gate``) to the running sum of (think - no-think) batch
    gradients over completed alternating pairs. Under plain SGD,
    beta1 - beta0 equals -learning_rate times that sum.
    """

    learning_rate: float
    records: list[StepRecord] = field(default_factory=list)
    cum_grad_diff: dict[str, np.ndarray] = field(default_factory=dict)
    paired_steps: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRAJECTORY_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [
                        r.step,
                        r.mode,
                        f"{r.loss:.17g}",
                        f"{r.active_grad_norm:.17g}",
                        f"{r.expert_gap_norm:.17g}",
                        f"{r.cum_grad_diff_norm:.17g}",
                    ]
                )

    def predicted_expert_gap(self) -> dict[str, np.ndarray]:
        """-lr * cumulative (g1 - g0), per expert-local suffix."""
        return {k: -self.learning_rate * v for k, v in self.cum_grad_diff.items()}


def expert_gap(params: ParamVector) -> dict[str, np.ndarray]:
    """beta1 - beta0, keyed by expert-local suffix."""
    out = {}
    for name, arr in params.items():
        if ".expert1." in name:
            suffix = name.replace(".expert1.", ".")
            out[suffix] = arr - params[name.replace(".expert1.", ".expert0.")]
    return out


def _gap_norm(params: ParamVector) -> float:
    gap = expert_gap(params)
    if not gap:
        return 0.0
    return float(np.sqrt(sum(float(np.sum(v * v)) for v in gap.values())))


def _expert_grad_slice(grads: ParamVector, route: int) -> dict[str, np.ndarray]:
    tag = f".expert{route}."
    return {n.replace(tag, "."): g for n, g in grads.items() if tag in n}


def validate_dataset(dataset: Sequence[ChatExample]) -> None:
    for i, ex in enumerate(dataset):
        if resolve_route(ex.prompt_ids) is not ex.mode:
            raise DataError(
                f"example {i}: prompt routes to {int(resolve_route(ex.prompt_ids))} "
                f"but is tagged mode {int(ex.mode)}"
            )
        if len(ex.loss_mask) != len(ex.tokens):
            raise DataError(f"example {i}: loss mask length mismatch")


def _chunks(pool: list[ChatExample], size: int) -> list[list[ChatExample]]:
    return [pool[i : i + size] for i in range(0, len(pool), size)]


def train(
    model: ModelParams | DenseModel,
    dataset: Sequence[ChatExample],
    cfg: TrainConfig,
    epoch_callback: Callable[[int, float, float], None] | None = None,
) -> tuple[ModelParams | DenseModel, TrajectoryLog]:
    """Mode-pure alternating-batch training; deterministic under the seed.

    Returns a new model of the same kind plus the trajectory log. When
    both mode pools are nonempty the schedule strictly alternates
    no-think/think batches; leftover batches of the larger pool follow.
    """
    validate_dataset(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    routed = isinstance(model, ModelParams)
    params = model.params.copy()
    log = TrajectoryLog(learning_rate=cfg.learning_rate)
    velocity: dict[str, np.ndarray] | None = None
    if cfg.optimizer == "sgd_momentum":
        velocity = {n: np.zeros_like(a) for n, a in params.items()}

    d0, d1 = split_by_mode(dataset)
    rng0 = np.random.default_rng([cfg.seed, 0])
    rng1 = np.random.default_rng([cfg.seed, 1])
    frozen_alpha = cfg.update_segments == "experts_only"

    pending_g0: dict[str, np.ndarray] | None = None
    step = 0
    for epoch in range(cfg.epochs):
        p0, p1 = list(d0), list(d1)
        if cfg.shuffle:
            if p0:
                rng0.shuffle(p0)
            if p1:
                rng1.shuffle(p1)
        b0 = _chunks(p0, cfg.batch_size)
        b1 = _chunks(p1, cfg.batch_size)
        schedule: list[list[ChatExample]] = []
        for pair in range(max(len(b0), len(b1))):
            if pair < len(b0):
                schedule.append(b0[pair])
            if pair < len(b1):
                schedule.append(b1[pair])

        for batch_examples in schedule:
            route = batch_examples[0].mode
            work = model.with_params(params) if routed else DenseModel(model.config, params)
            loss, grads = mode_loss_grad(work, batch_examples, cfg.reduction)

            if cfg.grad_clip is not None:
                gnorm = grads.norm()
                if gnorm > cfg.grad_clip:
                    grads = ParamVector((n, g * (cfg.grad_clip / gnorm)) for n, g in grads.items())

            if routed:
                active = _expert_grad_slice(grads, int(route))
                active_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in active.values())))
                if cfg.optimizer == "sgd":
                    if route is Route.NO_THINK:
                        pending_g0 = active
                    elif pending_g0 is not None:
                        for suffix, g1 in active.items():
                            diff = g1 - pending_g0[suffix]
                            if suffix in log.cum_grad_diff:
                                log.cum_grad_diff[suffix] = log.cum_grad_diff[suffix] + diff
                            else:
                                log.cum_grad_diff[suffix] = diff
                        log.paired_steps += 1
                        pending_g0 = None
            else:
                active_norm = grads.norm()

            if frozen_alpha:
                grads = ParamVector(
                    (n, g if segment_group(n) != "alpha" else np.zeros_like(g))
                    for n, g in grads.items()
                )
            if velocity is not None:
                for n, g in grads.items():
                    velocity[n] = cfg.momentum * velocity[n] + g
                params = ParamVector(
                    (n, a - cfg.learning_rate * velocity[n]) for n, a in params.items()
                )
            else:
                params = sgd_step(params, grads, cfg.learning_rate)

            cum_norm = float(
                np.sqrt(sum(float(np.sum(v * v)) for v in log.cum_grad_diff.values()))
            ) if log.cum_grad_diff else 0.0
            log.records.append(
                StepRecord(
                    step=step,
                    mode=int(route),
                    loss=loss,
                    active_grad_norm=active_norm,
                    expert_gap_norm=_gap_norm(params) if routed else 0.0,
                    cum_grad_diff_norm=cum_norm,
                )
            )
            step += 1

        if epoch_callback is not None:
            final = model.with_params(params) if routed else DenseModel(model.config, params)
            l0 = mode_loss(final, d0, cfg.reduction) if d0 else float("nan")
            l1 = mode_loss(final, d1, cfg.reduction) if d1 else float("nan")
            epoch_callback(epoch, l0, l1)

    result = model.with_params(params) if routed else DenseModel(model.config, params)
    return result, log


# ---------------------------------------------------------------------------
# token-level routing contrast
# ---------------------------------------------------------------------------


def token_level_route_variant(
    model: ModelParams, example: ChatExample, token_routes: Sequence[int]
) -> tuple[float, ParamVector]:
    """Gradients when each input position picks its own expert.

    ``token_routes`` aligns with the shifted input positions (length
    len(tokens) - 1). With a constant route this reproduces the
    sequence-level gradients; with mixed routes both expert partitions
    receive gradient, which is exactly the contrast the sequence-level
    design avoids.
    """
    batch = make_batch([example])
    routes = np.asarray(token_routes, dtype=np.int64)
    if routes.shape != (batch["inputs"].shape[1],):
        raise ValueError(
            f"token_routes must have length {batch['inputs'].shape[1]}, got {routes.shape}"
        )
    m1 = (routes == 1).astype(np.float64)[None, :, None]
    m0 = 1.0 - m1
    cfg = model.config

    def loss_fn(leaves: Mapping[str, Tensor], batch: dict) -> Tensor:
        def apply(layer: int, h: Tensor) -> Tensor:
            f0 = _swiglu(
                leaves[f"layer{layer}.expert0.w_gate"],
                leaves[f"layer{layer}.expert0.w_up"],
                leaves[f"layer{layer}.expert0.w_down"],
                h,
            )
            f1 = _swiglu(
                leaves[f"layer{layer}.expert1.w_gate"],
                leaves[f"layer{layer}.expert1.w_up"],
                leaves[f"layer{layer}.expert1.w_down"],
                h,
            )
            return add(mul(f0, m0), mul(f1, m1))

        logits = decoder_logits(cfg, leaves, batch["inputs"], apply)
        return softmax_cross_entropy(
            logits, batch["labels"], batch["label_mask"], reduction="example_mean"
        )

    return value_and_grad(loss_fn, model.params, batch)


# ---------------------------------------------------------------------------
# dataset file format
# ---------------------------------------------------------------------------

MODE_NAMES = {"no_think": Route.NO_THINK, "think": Route.THINK}


def example_from_record(
    record: dict, vocab: Vocabulary, where: str = "record"
) -> tuple[ChatExample, str | None]:
    """Build a ChatExample from one {"prompt","target","mode",["answer"]} record.

    Prompts get a leading BOS; the mode's control token is appended when
    no control token is present, and prompts that route differently than
    tagged are rejected.
    """
    try:
        mode = MODE_NAMES[record["mode"]]
    except KeyError as exc:
        raise DataError(f"{where}: mode must be one of {sorted(MODE_NAMES)}") from exc
    prompt = [BOS_ID] + encode(record["prompt"], vocab)
    if not any(t in (CTRL_THINK_ID, CTRL_NOTHINK_ID) for t in prompt):
        prompt = prompt + [control_token_id(mode)]
    if resolve_route(prompt) is not mode:
        raise DataError(f"{where}: prompt control tokens route to the other mode")
    target = encode(record["target"], vocab) + [EOS_ID]
    return ChatExample.build(prompt, target, mode), record.get("answer")


def load_dataset_jsonl(path, vocab: Vocabulary) -> tuple[list[ChatExample], list[str | None]]:
    examples, answers = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            ex, answer = example_from_record(record, vocab, where=f"{path}:{lineno}")
            examples.append(ex)
            answers.append(answer)
    return examples, answers


def dataset_texts(path) -> list[str]:
    """All prompt/target strings in a dataset file (for vocabulary building)."""
    texts = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            texts.append(record["prompt"])
            texts.append(record["target"])
    return texts
