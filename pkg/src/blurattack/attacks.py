"""The two blur-driven attacks: feature peak suppression and kernel search.

Peak suppression runs gradient descent on the input to shrink the gap
between each feature channel's maximum and mean, clamping back to the
image domain after every step. The kernel-search attack never touches the
input: it blurs the original image and trains only the kernel's
per-channel standard deviations against the reversed training criterion.
Both stop the moment the network's prediction leaves the original label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import SIGMA_FLOOR, blur, build_kernel, build_kernel_traced, sigma_gradient_analytic
from .models import Network
from .tensor import (
    ConfigError,
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    UsageError,
    absolute,
    add,
    backward,
    neg,
    reduce_max,
    reduce_mean,
    select,
    softmax_cross_entropy,
    softmax_probs,
    sub,
)

MODES = ("peak_suppression", "gaussian_blur")
SIGMA_RULES = ("exact", "analytic")


@dataclass
class AttackConfig:
    """Full specification of one attack run."""

    mode: str
    max_iterations: int = 5000
    step_length: float = 1.0
    kernel_scale: int = 9
    sigma_init: float = 10.0
    padding: str = "reflect"
    feature_layer: int | None = None  # None = the network's deepest tap
    sigma_rule: str = "exact"         # "analytic" selects the closed-form update
    targeted: bool = False
    target_label: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.step_length <= 0:
            raise ConfigError(f"step_length must be > 0, got {self.step_length}")
        if self.sigma_init <= 0:
            raise ConfigError(f"sigma_init must be > 0, got {self.sigma_init}")
        if self.kernel_scale % 2 == 0:
            raise ConfigError(f"kernel_scale must be odd, got {self.kernel_scale}")
        if self.sigma_rule not in SIGMA_RULES:
            raise ConfigError(f"sigma_rule must be one of {SIGMA_RULES}")
        if self.targeted and self.target_label is None:
            raise ConfigError("targeted attacks need a target_label")


@dataclass
class AttackResult:
    """Outcome record of one attack run.

    ``peak_trace``/``confidence_trace`` hold one entry per evaluated state:
    index t is the state after t update steps, so entry 0 is the original
    input and the last entry is the final state.
    """

    success: bool
    iterations_used: int
    original_label: int
    adversarial_label: int
    adversarial_confidence: float
    single_step_flip: bool
    final_input: Tensor
    final_sigmas: np.ndarray | None = None
    peak_trace: list = field(default_factory=list)
    confidence_trace: list = field(default_factory=list)


def clamp_image(x: Tensor) -> Tensor:
    """Project values back into the image domain [0, 1]."""
    return Tensor(np.clip(x.data, 0.0, 1.0))


def evaluate(net: Network, x: Tensor):
    """Predicted label and softmax probability vector; ties go to the
    lowest class index."""
    logits = net.forward(x)
    probs = softmax_probs(logits.data[0])
    return int(np.argmax(probs)), probs


def ps_loss(features, tape: Tape | None = None) -> Tensor:
    """Sum over feature tensors of |max - mean|, the peak-flatness pressure."""
    features = list(features)
    if not features:
        raise UsageError("ps_loss needs at least one feature tensor")
    total = None
    for f in features:
        term = absolute(sub(reduce_max(f, tape=tape), reduce_mean(f, tape=tape),
                            tape), tape)
        total = term if total is None else add(total, term, tape)
    return total


def _check_image_domain(x: Tensor):
    if np.any(x.data < 0.0) or np.any(x.data > 1.0):
        raise DomainError("attack input must lie in [0, 1]")


def peak_suppression_attack(net: Network, x0: Tensor, y0: int,
                            cfg: AttackConfig) -> AttackResult:
    """Descend the peak-suppression loss on the input until the label flips.

    Each iteration takes one raw-gradient step of ``step_length`` and
    clamps back to [0, 1]; traces record the feature peak and the original
    label's confidence at every evaluated state.
    """
    _check_image_domain(x0)
    tap = net.feature_layer if cfg.feature_layer is None else cfg.feature_layer

    def forward_state(x):
        tape = Tape()
        tape.watch_input(x)
        logits, captured = net.forward(x, tape=tape, want_features=True)
        block = captured[tap]
        chans = [select(block, c, axis=0, tape=tape) for c in range(block.shape[0])]
        loss = ps_loss(chans, tape)
        probs = softmax_probs(logits.data[0])
        return loss, float(block.data.max()), probs

    x = x0
    loss, peak, probs = forward_state(x)
    peak_trace = [peak]
    confidence_trace = [float(probs[y0])]
    label = int(np.argmax(probs))
    success = False
    iterations = 0
    for t in range(1, cfg.max_iterations + 1):
        grad = backward(loss).input_grad.data
        x = clamp_image(Tensor(x.data - cfg.step_length * grad))
        loss, peak, probs = forward_state(x)
        peak_trace.append(peak)
        confidence_trace.append(float(probs[y0]))
        label = int(np.argmax(probs))
        iterations = t
        if label != y0:
            success = True
            break
    else:
        iterations = cfg.max_iterations
    return AttackResult(
        success=success,
        iterations_used=iterations,
        original_label=y0,
        adversarial_label=label,
        adversarial_confidence=float(probs[label]),
        single_step_flip=False,
        final_input=x,
        final_sigmas=None,
        peak_trace=peak_trace,
        confidence_trace=confidence_trace,
    )


def gaussian_blur_attack(net: Network, x0: Tensor, y0: int,
                         cfg: AttackConfig) -> AttackResult:
    """Train per-channel kernel sigmas until the blurred input flips.

    The original input is never modified. Every iteration blurs ``x0``
    with the current kernel, checks the prediction, and on no flip ascends
    the network's own training criterion by stepping the sigmas against
    the reversed loss, clamped to at least ``SIGMA_FLOOR``. A flip on the
    very first blur (before any sigma update) sets ``single_step_flip``.
    """
    _check_image_domain(x0)
    if x0.ndim != 3:
        raise ShapeError(f"blur attack expects [C, H, W] input, got {x0.shape}")
    C = x0.shape[0]
    sigmas = np.full((C, 2), float(cfg.sigma_init))

    success = False
    single_step = False
    confidence_trace = []
    blurred = x0
    probs = None
    iterations = cfg.max_iterations
    for t in range(1, cfg.max_iterations + 1):
        tape = Tape()
        sigma_leaf = Tensor(sigmas)
        kernel = build_kernel_traced(cfg.kernel_scale, sigma_leaf, tape)
        tape.watch_param("kweights", kernel.weights)
        blurred = blur(x0, kernel, padding=cfg.padding, tape=tape)
        logits = net.forward(blurred, tape=tape)
        probs = softmax_probs(logits.data[0])
        confidence_trace.append(float(probs[y0]))
        label = int(np.argmax(probs))
        if label != y0:
            success = True
            single_step = t == 1
            iterations = t
            break
        if t == cfg.max_iterations:
            iterations = t
            break
        if cfg.targeted:
            loss = softmax_cross_entropy(logits, [cfg.target_label], tape=tape)
        else:
            loss = neg(softmax_cross_entropy(logits, [y0], tape=tape), tape)
        if cfg.sigma_rule == "analytic":
            bundle = backward(loss, wanted=("kweights",), include_input=False)
            grad = sigma_gradient_analytic(bundle.param_grads["kweights"], kernel)
        else:
            bundle = backward(loss, wanted=("sigma",), include_input=False)
            grad = bundle.param_grads["sigma"].data
        sigmas = np.maximum(sigmas - cfg.step_length * grad, SIGMA_FLOOR)

    label = int(np.argmax(probs))
    return AttackResult(
        success=success,
        iterations_used=iterations,
        original_label=y0,
        adversarial_label=label,
        adversarial_confidence=float(probs[label]),
        single_step_flip=single_step,
        final_input=Tensor(blurred.data),
        final_sigmas=sigmas.copy(),
        peak_trace=[],
        confidence_trace=confidence_trace,
    )


def run_attack(net: Network, x0: Tensor, y0: int, cfg: AttackConfig) -> AttackResult:
    if cfg.mode == "peak_suppression":
        return peak_suppression_attack(net, x0, y0, cfg)
    return gaussian_blur_attack(net, x0, y0, cfg)
