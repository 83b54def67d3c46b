"""Finite-difference verification of reverse-mode gradients.

Central differences (f(t+h) - f(t-h)) / 2h against the recorded-tape
gradient, elementwise, reported as a per-parameter maximum relative error.
Only meaningful in double precision; the check refuses to run in single.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericError


@dataclass
class GradCheckReport:
    h: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passes(self, tol: float) -> bool:
        return self.max_error <= tol

    def lines(self):
        for name, err in self.errors.items():
            yield f"{name} max_rel_err={err:.3e}"


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


def grad_check(f, params: dict[str, T.Tensor], h: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar f() against central differences.

    f must be a deterministic closure over `params` (tensors with
    requires_grad) returning a scalar Tensor.
    """
    if T.get_precision() != "double":
        raise NumericError("grad_check requires double precision mode")
    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check aborted: loss is not finite")
    loss.backward()
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            analytic[name] = np.zeros_like(p.data)
        else:
            analytic[name] = p.grad.copy()

    report = GradCheckReport(h=h)
    with T.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(
                        f"grad_check aborted: non-finite loss perturbing {name}[{i}]")
                numeric[i] = (fp - fm) / (2.0 * h)
            err = relative_error(analytic[name].reshape(-1), numeric)
            report.errors[name] = float(err.max()) if err.size else 0.0
    return report


def full_model_gradcheck(quick: bool = False, h: float = 1e-5, seed: int = 0):
    """End-to-end check of every trainable parameter at toy dimensions.

    Runs the whole pipeline — patch embedding, both attention stages,
    cross-channel encoding, and the label projector — under double
    precision and central differences.  ``quick=True`` shrinks the model
    for a seconds-scale smoke run; the default configuration is the full
    two-granularity check.  The loss mixes a small random quadratic head
    on the encoding with a down-scaled classification term so every
    parameter influences a scalar of magnitude ~1e-3: central differences
    lose digits to float64 rounding in proportion to |loss|/h, so a small
    loss keeps the noise floor well below the relative-error tolerance
    even for parameters whose true gradient is exactly zero.

    Returns (GradCheckReport, elapsed seconds).
    """
    from .encoder import (AttentionConfig, EncoderConfig, GranularitySpec,
                          SparseformerModel)
    from .labels import (HashedTextProvider, LabelProjector,
                         build_label_table, classification_loss)

    started = time.perf_counter()
    with T.precision("double"):
        if quick:
            length, channels, embed_dim, hidden = 10, 1, 6, 3
            config = EncoderConfig(
                granularities=GranularitySpec((5,)), intra_token_list=(3, 2),
                inter_tokens=2, cross_tokens=1,
                attention=AttentionConfig(model_dim=4, num_heads=2,
                                          dropout=0.0, prior_dim=2),
                max_patches=2)
        else:
            length, channels, embed_dim, hidden = 20, 2, 12, 6
            config = EncoderConfig(
                granularities=GranularitySpec((5, 10)),
                intra_token_list=(6, 4), inter_tokens=3, cross_tokens=2,
                attention=AttentionConfig(model_dim=8, num_heads=2,
                                          dropout=0.0, prior_dim=4),
                max_patches=4)
        rng = np.random.default_rng(seed)
        model = SparseformerModel(rng, config)
        projector = LabelProjector(rng, embed_dim, config.model_dim,
                                   hidden=hidden)
        # the projector's outer layer initializes to zero, which would
        # leave some of its gradients exactly zero; randomize for coverage
        projector.w1.data = 0.4 * rng.standard_normal(projector.w1.data.shape)
        projector.b.data = 0.3 * rng.standard_normal(projector.b.data.shape)
        provider = HashedTextProvider(embed_dim)
        classes = [(1, "steady low-frequency rhythm"),
                   (2, "sharp transient burst")]
        x = rng.standard_normal((1, length, channels))
        prior = T.Tensor(0.5 * rng.standard_normal(config.prior_dim))
        weight = T.Tensor(rng.standard_normal((1, config.model_dim)) / 4096.0)

        def loss_fn():
            encoded = model.encode_batch(x, prior=prior)
            quadratic = T.sum_all(T.mul(T.mul(encoded, weight), encoded))
            table = build_label_table(classes, provider, projector)
            aligned = classification_loss(encoded, [1], table)
            return T.add(quadratic, T.scale(aligned, 1.0 / 256.0))

        params = dict(model.named_params())
        params.update({f"labels.{n}": p
                       for n, p in projector.named_params()})
        report = grad_check(loss_fn, params, h=h)
    return report, time.perf_counter() - started
