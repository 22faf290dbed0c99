"""Per-batch training strategies behind one step interface.

Seven strategies: plain mixed-label descent, the same with centralized or
adaptively clipped gradients, two-pass ascent-descent (sam), and the three
noisy self-teacher variants that aggregate a task gradient with a soft-label
KL gradient taken against a perturbed copy of the freshly updated weights.

Every noisy variant follows the same shape: an initial update on a transient
optimizer clone produces the self-teacher weights; a perturbation of those
weights produces auxiliary teacher logits; the KL between pre-update logits
(held constant) and auxiliary logits is differentiated; the perturbation is
removed exactly; and the final update applies the aggregated gradient with
the persistent optimizer state.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, add, backward, kl_divergence, scale, softmax_cross_entropy
from .data import MixedBatch
from .nn import Model
from .optim import (
    AdamState,
    GradSet,
    adam_step,
    adaptive_gradient_clip,
    add_noise,
    aggregate_gradients,
    gradient_centralize,
    subtract_noise,
)

STRATEGY_IDS = ("baseline", "gc", "agc", "sam", "sadt_v1", "sadt_v2", "sadt_v3")


class NonFiniteLossError(RuntimeError):
    """A step produced a non-finite loss; carries diagnostics for the log."""


@dataclass
class StepReport:
    """Per-batch record: losses, learning rate, final gradient norm, timing."""

    task_loss: float
    kl_loss: float
    lr: float
    grad_norm: float
    wall_ms: float
    flags: tuple[str, ...] = ()


class StepTrace:
    """Optional instrumentation: named parameter snapshots taken mid-step,
    the noise records drawn, and the gradient fed to the final update."""

    def __init__(self):
        self.marks: dict[str, dict[str, np.ndarray]] = {}
        self.records: list = []
        self.final_grads: GradSet | None = None

    def mark(self, name: str, params) -> None:
        self.marks[name] = params.snapshot()


@dataclass
class Strategy:
    """Strategy id plus the hyperparameters its step consumes."""

    id: str
    rho: float = 0.05
    sigma_w: float = 0.0001
    sigma_g: float = 0.0001
    ascent_lr: float | None = None  # None: use the scheduled learning rate
    agc_lambda: float = 0.01
    rollback_to_w: bool = False

    def __post_init__(self):
        if self.id not in STRATEGY_IDS:
            raise ValueError(f"unknown strategy id {self.id!r} (choose from {STRATEGY_IDS})")

    def step(
        self,
        model: Model,
        batch: MixedBatch,
        state: AdamState,
        lr: float,
        noise_seed: np.random.SeedSequence | int | None = None,
        trace: StepTrace | None = None,
    ) -> StepReport:
        if self.id == "baseline":
            return baseline_step(model, batch, state, lr)
        if self.id == "gc":
            return gc_step(model, batch, state, lr)
        if self.id == "agc":
            return agc_step(model, batch, state, lr, self.agc_lambda)
        if self.id == "sam":
            return sam_step(model, batch, state, lr, self.rho, trace=trace)
        rngs = _noise_rngs(noise_seed, 2 if self.id == "sadt_v2" else 1)
        if self.id == "sadt_v1":
            return sadt_v1_step(
                model, batch, state, lr, self.sigma_w, rngs[0],
                rollback_to_w=self.rollback_to_w, trace=trace,
            )
        if self.id == "sadt_v2":
            return sadt_v2_step(
                model, batch, state, lr, self.sigma_w, rngs,
                rollback_to_w=self.rollback_to_w, trace=trace,
            )
        return sadt_v3_step(
            model, batch, state, lr, self.sigma_g,
            lr if self.ascent_lr is None else self.ascent_lr,
            rngs[0], rollback_to_w=self.rollback_to_w, trace=trace,
        )


def _noise_rngs(noise_seed, count: int) -> list[np.random.Generator]:
    if noise_seed is None:
        noise_seed = np.random.SeedSequence(0)
    elif isinstance(noise_seed, int):
        noise_seed = np.random.SeedSequence(noise_seed)
    return [np.random.default_rng(child) for child in noise_seed.spawn(count)]


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes, dtype=np.float64)[np.asarray(labels, dtype=np.int64)]


def mixed_cross_entropy(logits: Tensor, batch: MixedBatch, num_classes: int) -> Tensor:
    """lam * CE(label_a) + (1 - lam) * CE(label_b) with hard one-hot targets."""
    ce_a = softmax_cross_entropy(logits, Tensor(one_hot(batch.label_a, num_classes)))
    ce_b = softmax_cross_entropy(logits, Tensor(one_hot(batch.label_b, num_classes)))
    return add(scale(ce_a, batch.lam), scale(ce_b, 1.0 - batch.lam))


def _task_pass(model: Model, batch: MixedBatch) -> tuple[np.ndarray, float, GradSet]:
    """Forward + backward of the mixed-label task loss at the current weights."""
    with Tape():
        logits = model.forward(Tensor(batch.images))
        loss = mixed_cross_entropy(logits, batch, model.num_classes)
    task_loss = loss.item()
    if not np.isfinite(task_loss):
        raise NonFiniteLossError(f"task loss is {task_loss!r}")
    grads = GradSet.from_backward(model.params, backward(loss))
    return logits.data.copy(), task_loss, grads


def _kl_pass(model: Model, batch: MixedBatch, teacher_logits: np.ndarray) -> tuple[float, GradSet]:
    """KL(teacher || current model) with the teacher side held constant."""
    with Tape():
        aux_logits = model.forward(Tensor(batch.images))
        kl = kl_divergence(Tensor(teacher_logits), aux_logits, detach_p=True)
    kl_loss = kl.item()
    if not np.isfinite(kl_loss):
        raise NonFiniteLossError(f"KL loss is {kl_loss!r}")
    grads = GradSet.from_backward(model.params, backward(kl))
    return kl_loss, grads


def baseline_step(model: Model, batch: MixedBatch, state: AdamState, lr: float) -> StepReport:
    """One forward on the mixed batch, one backward, one Adam update."""
    start = time.perf_counter()
    _, task_loss, grads = _task_pass(model, batch)
    adam_step(model.params, grads, state, lr)
    return StepReport(task_loss, 0.0, lr, grads.global_norm(), (time.perf_counter() - start) * 1e3)


def gc_step(model: Model, batch: MixedBatch, state: AdamState, lr: float) -> StepReport:
    """Baseline flow with weight gradients centralized before the update."""
    start = time.perf_counter()
    _, task_loss, grads = _task_pass(model, batch)
    grads = gradient_centralize(grads)
    adam_step(model.params, grads, state, lr)
    return StepReport(task_loss, 0.0, lr, grads.global_norm(), (time.perf_counter() - start) * 1e3)


def agc_step(
    model: Model, batch: MixedBatch, state: AdamState, lr: float, lam: float = 0.01
) -> StepReport:
    """Baseline flow with adaptively clipped gradients before the update."""
    start = time.perf_counter()
    _, task_loss, grads = _task_pass(model, batch)
    grads = adaptive_gradient_clip(model.params, grads, lam)
    adam_step(model.params, grads, state, lr)
    return StepReport(task_loss, 0.0, lr, grads.global_norm(), (time.perf_counter() - start) * 1e3)


def sam_step(
    model: Model,
    batch: MixedBatch,
    state: AdamState,
    lr: float,
    rho: float,
    trace: StepTrace | None = None,
) -> StepReport:
    """Ascend rho along the normalized gradient, re-evaluate the gradient
    there, restore the weights exactly, then descend at the original point.

    A zero task gradient skips the perturbation (the step degenerates to
    baseline) and is flagged in the report.
    """
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    start = time.perf_counter()
    _, task_loss, grads = _task_pass(model, batch)
    flags: tuple[str, ...] = ()
    norm = grads.global_norm()
    if norm == 0.0:
        flags = ("zero-gradient",)
        final = grads
    else:
        snap = model.params.snapshot()
        if trace is not None:
            trace.mark("w", model.params)
        model.params.add_scaled(grads, rho / norm)
        if trace is not None:
            trace.mark("perturbed", model.params)
        _, _, final = _task_pass(model, batch)
        model.params.restore(snap)
        if trace is not None:
            trace.mark("restored", model.params)
    if trace is not None:
        trace.final_grads = final
    adam_step(model.params, final, state, lr)
    return StepReport(
        task_loss, 0.0, lr, final.global_norm(), (time.perf_counter() - start) * 1e3, flags
    )


def _initial_update(model: Model, grads: GradSet, state: AdamState, lr: float) -> None:
    # transient clone: the initial update must not advance persistent moments
    adam_step(model.params, grads, state.clone(), lr)


def sadt_v1_step(
    model: Model,
    batch: MixedBatch,
    state: AdamState,
    lr: float,
    sigma_w: float,
    rng: np.random.Generator,
    rollback_to_w: bool = False,
    trace: StepTrace | None = None,
) -> StepReport:
    """Noisy self-teacher over every layer.

    Flow: task gradient at w; transient update to the self-teacher weights;
    N(0, sigma_w^2) noise on all layers forms the auxiliary teacher; KL
    between the pre-update logits (constant) and auxiliary logits gives the
    auxiliary gradient; the noise is removed exactly; the task and auxiliary
    gradients are summed and applied with the persistent optimizer state.
    """
    if sigma_w < 0:
        raise ValueError(f"sigma_w must be >= 0, got {sigma_w}")
    start = time.perf_counter()
    logits_w, task_loss, g_up = _task_pass(model, batch)
    w_snap = model.params.snapshot() if rollback_to_w else None
    _initial_update(model, g_up, state, lr)
    if trace is not None:
        trace.mark("w_up", model.params)
    record = add_noise(model.params, sigma_w, "all", rng)
    if trace is not None:
        trace.records.append(record)
        trace.mark("aux_0", model.params)
    kl_loss, g_aux = _kl_pass(model, batch, logits_w)
    subtract_noise(model.params, record)
    if trace is not None:
        trace.mark("rollback_0", model.params)
    g_final = aggregate_gradients([g_up, g_aux])
    if trace is not None:
        trace.final_grads = g_final
    if w_snap is not None:
        model.params.restore(w_snap)
    adam_step(model.params, g_final, state, lr)
    return StepReport(
        task_loss, kl_loss, lr, g_final.global_norm(), (time.perf_counter() - start) * 1e3
    )


def sadt_v2_step(
    model: Model,
    batch: MixedBatch,
    state: AdamState,
    lr: float,
    sigma_w: float,
    rngs: list[np.random.Generator],
    rollback_to_w: bool = False,
    trace: StepTrace | None = None,
) -> StepReport:
    """Two auxiliary teachers: noise on the last conv layer, then on the last
    dense layer, each evaluated and rolled back in turn; the final gradient
    aggregates the task gradient with both KL gradients.
    """
    if sigma_w < 0:
        raise ValueError(f"sigma_w must be >= 0, got {sigma_w}")
    if model.params.last_conv_layer() is None:
        raise ValueError("sadt_v2 requires an architecture with a conv layer")
    start = time.perf_counter()
    logits_w, task_loss, g_up = _task_pass(model, batch)
    w_snap = model.params.snapshot() if rollback_to_w else None
    _initial_update(model, g_up, state, lr)
    if trace is not None:
        trace.mark("w_up", model.params)
    kl_total = 0.0
    aux_grads = []
    for i, layer_filter in enumerate(("last-conv", "last-dense")):
        record = add_noise(model.params, sigma_w, layer_filter, rngs[i])
        if trace is not None:
            trace.records.append(record)
            trace.mark(f"aux_{i}", model.params)
        kl_loss, g_aux = _kl_pass(model, batch, logits_w)
        subtract_noise(model.params, record)
        if trace is not None:
            trace.mark(f"rollback_{i}", model.params)
        kl_total += kl_loss
        aux_grads.append(g_aux)
    g_final = aggregate_gradients([g_up, *aux_grads])
    if trace is not None:
        trace.final_grads = g_final
    if w_snap is not None:
        model.params.restore(w_snap)
    adam_step(model.params, g_final, state, lr)
    return StepReport(
        task_loss, kl_total, lr, g_final.global_norm(), (time.perf_counter() - start) * 1e3
    )


def sadt_v3_step(
    model: Model,
    batch: MixedBatch,
    state: AdamState,
    lr: float,
    sigma_g: float,
    ascent_lr: float,
    rng: np.random.Generator,
    rollback_to_w: bool = False,
    trace: StepTrace | None = None,
) -> StepReport:
    """Gradient-noise variant: perturb the task gradient, ascend along it
    from the self-teacher weights to form the auxiliary teacher, then proceed
    as the other variants (KL gradient, exact rollback, aggregated update).
    """
    if sigma_g < 0:
        raise ValueError(f"sigma_g must be >= 0, got {sigma_g}")
    if ascent_lr < 0:
        raise ValueError(f"ascent_lr must be >= 0, got {ascent_lr}")
    start = time.perf_counter()
    logits_w, task_loss, g_up = _task_pass(model, batch)
    w_snap = model.params.snapshot() if rollback_to_w else None
    _initial_update(model, g_up, state, lr)
    if trace is not None:
        trace.mark("w_up", model.params)
    g_noisy = g_up.clone()
    record = add_noise(g_noisy, sigma_g, "gradient-all", rng)
    up_snap = model.params.snapshot()
    model.params.add_scaled(g_noisy, ascent_lr)
    if trace is not None:
        trace.records.append(record)
        trace.mark("aux_0", model.params)
    kl_loss, g_aux = _kl_pass(model, batch, logits_w)
    model.params.restore(up_snap)
    if trace is not None:
        trace.mark("rollback_0", model.params)
    g_final = aggregate_gradients([g_up, g_aux])
    if trace is not None:
        trace.final_grads = g_final
    if w_snap is not None:
        model.params.restore(w_snap)
    adam_step(model.params, g_final, state, lr)
    return StepReport(
        task_loss, kl_loss, lr, g_final.global_norm(), (time.perf_counter() - start) * 1e3
    )
