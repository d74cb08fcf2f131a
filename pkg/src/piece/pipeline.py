"""The explanation pipeline: locate the test image in the generator's latent
space, pick the counterfactual class, replace exceptional features with their
expected values, and render the modified features back into an image.

Counterfactual mode replaces every eligible exceptional feature. Semifactual
mode stops right before the replacement that would flip the predicted class.
Proportional mode applies a prefix (25/50/75/100 percent) of the replacement
sequence the semifactual run would apply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import netcore as nc
from .hurdle import ExceptionalFeature, Rule, StatsTable, classify_exceptional

MODES = ("counterfactual", "semifactual", "proportional")
FRACTIONS = (0.25, 0.5, 0.75, 1.0)


class PipelineError(Exception):
    pass


class InversionError(PipelineError):
    pass


class SelectionError(PipelineError):
    pass


class VisualizationError(PipelineError):
    pass


@dataclass(frozen=True)
class OptimSettings:
    invert_restarts: int = 8
    invert_steps: int = 800
    invert_lr: float = 0.05
    ascent_lr: float = 0.02
    ascent_max_steps: int = 2000
    visualize_steps: int = 400
    visualize_lr: float = 0.05


@dataclass(frozen=True)
class ExplanationRequest:
    image: np.ndarray  # (H, W)
    true_label: int
    mode: str  # counterfactual | semifactual | proportional
    fraction: Optional[float] = None  # proportional only
    alpha: float = 0.05
    settings: OptimSettings = OptimSettings()
    seed: int = 0
    image_id: int = -1
    target_class: Optional[int] = None  # override, bypasses selection

    def validate(self) -> None:
        if self.mode not in MODES:
            raise PipelineError(f"unknown mode {self.mode!r}")
        if self.mode == "proportional":
            if self.fraction not in FRACTIONS:
                raise PipelineError(
                    f"proportional fraction must be one of {FRACTIONS}, "
                    f"got {self.fraction}"
                )
        if not (0.0 < self.alpha < 0.5):
            raise PipelineError(f"alpha must be in (0, 0.5), got {self.alpha}")


# ---------------------------------------------------------------------------
# Latent inversion


@dataclass
class InversionResult:
    z: np.ndarray
    combined_loss: float
    feature_loss: float
    pixel_loss: float
    restart_losses: list
    restart_index: int


def invert_image(
    generator: nc.Network,
    feature_net: nc.Network,
    image: np.ndarray,
    settings: OptimSettings,
    seed: int,
) -> InversionResult:
    """Gradient-descend latent codes so the generated image matches the
    target both in pixels and in feature space; best of several restarts.

    Restarts are drawn from the standard normal and optimized as one batch
    (their losses are row-independent). A restart whose values turn
    non-finite is effectively abandoned: its loss becomes infinite and it
    can never be selected.
    """
    flat = np.asarray(image, dtype=np.float64).ravel()
    target_feats = nc.forward(feature_net, flat).output
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((settings.invert_restarts, generator.input_dim))
    state = nc.AdamState.init([z])
    for _ in range(settings.invert_steps):
        tg = nc.forward(generator, z, check_finite=False)
        imgs = tg.outputs[-1]
        tc = nc.forward(feature_net, imgs, check_finite=False)
        feats = tc.outputs[-1]
        g_feat = 2.0 * (feats - target_feats)
        _, g_img = nc.backward(feature_net, tc, g_feat)
        g_img = g_img + 2.0 * (imgs - flat)
        _, g_z = nc.backward(generator, tg, g_img)
        (z,), state = nc.adam_step([z], [g_z], state, settings.invert_lr)

    imgs = nc.forward(generator, z, check_finite=False).output
    feats = nc.forward(feature_net, imgs, check_finite=False).output
    f_loss = np.sum((feats - target_feats) ** 2, axis=1)
    p_loss = np.sum((imgs - flat) ** 2, axis=1)
    combined = f_loss + p_loss
    combined = np.where(np.isfinite(combined), combined, np.inf)
    if not np.any(np.isfinite(combined)):
        raise InversionError("all inversion restarts diverged to non-finite values")
    best = int(np.argmin(combined))
    return InversionResult(
        z[best].copy(),
        float(combined[best]),
        float(f_loss[best]),
        float(p_loss[best]),
        [float(v) for v in combined],
        best,
    )


# ---------------------------------------------------------------------------
# Counterfactual class selection


@dataclass
class SelectionResult:
    c_prime: int
    trivial: bool  # misclassification: true label taken directly
    steps: int
    argmax_trace: list = field(default_factory=list)
    prob_c_trace: list = field(default_factory=list)


def select_cf_class(
    classifier: nc.Network,
    generator: nc.Network,
    z: np.ndarray,
    image: np.ndarray,
    true_label: int,
    settings: OptimSettings,
) -> SelectionResult:
    """Pick the counterfactual class for a test image.

    Misclassified image: the true label, directly. Correctly classified
    image: push a copy of the inverted latent code away from the predicted
    class (maximizing the distance of the softmax output from the one-hot
    prediction) and return the first different class the probe reaches. The
    probe latent is discarded; only the class is kept.
    """
    flat = np.asarray(image, dtype=np.float64).ravel()
    probs = nc.forward(classifier, flat).output
    c = int(np.argmax(probs))
    if c != true_label:
        return SelectionResult(true_label, True, 0)
    n_classes = len(probs)
    y_c = nc.one_hot(c, n_classes)

    def ascent_step(zv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        tg = nc.forward(generator, zv)
        tc = nc.forward(classifier, tg.outputs[-1])
        out = tc.outputs[-1]
        _, g_out = nc.loss("l2_sq", out, y_c[None, :])
        _, g_img = nc.backward(classifier, tc, g_out)
        _, g_z = nc.backward(generator, tg, g_img)
        return g_z, out[0]

    z_probe = z.copy()
    state = nc.AdamState.init([z_probe])
    argmax_trace: list = []
    prob_c_trace: list = []
    g_z, probe_probs = ascent_step(z_probe)
    for step in range(1, settings.ascent_max_steps + 1):
        # ascend: feed the negated gradient to the descent update
        (z_probe,), state = nc.adam_step([z_probe], [-g_z], state, settings.ascent_lr)
        g_z, probe_probs = ascent_step(z_probe)
        top = int(np.argmax(probe_probs))
        argmax_trace.append(top)
        prob_c_trace.append(float(probe_probs[c]))
        if top != c:
            return SelectionResult(top, False, step, argmax_trace, prob_c_trace)
    raise SelectionError(
        f"no decision boundary crossed within {settings.ascent_max_steps} steps; "
        f"final probabilities {np.round(probe_probs, 4).tolist()}"
    )


# ---------------------------------------------------------------------------
# Feature modification


@dataclass
class ModStep:
    neuron: int
    rule: str
    probability: float
    old: float
    new: float
    applied: bool
    reason: str  # applied | wrong_branch | zero_weight | already_replaced |
    #              would_flip | beyond_budget
    prob_c: float
    prob_c_prime: float


@dataclass
class ModificationResult:
    x_mod: np.ndarray
    steps: list
    applied_count: int
    eligible_count: int
    status: str  # ok | no_eligible_exceptional_features
    k_reference: int  # length of the full semifactual sequence (proportional)


def _eligible(rule: Rule, weight: float) -> bool:
    if weight > 0.0:
        return rule in (Rule.ABSENT, Rule.UNEXPECTED, Rule.LOW_TAIL)
    if weight < 0.0:
        return rule in (Rule.UNEXPECTED, Rule.HIGH_TAIL)
    return False


def modify_features(
    x: np.ndarray,
    features: list,
    w: np.ndarray,
    head: nc.Network,
    c: int,
    c_prime: int,
    mode: str,
    fraction: Optional[float] = None,
) -> ModificationResult:
    """Walk the exceptional features (lowest probability first) and replace
    each eligible one with its expected value for the counterfactual class.

    A feature is eligible when the sign of its connection weight to the
    counterfactual class logit matches its rule: positive weight with a
    feature that is absent, unexpectedly firing, or in the low tail;
    negative weight with one unexpectedly firing or in the high tail. Zero
    weight never qualifies. A neuron already replaced is not replaced again.

    Counterfactual mode applies everything eligible. Semifactual mode checks
    the head after each tentative replacement and stops, without applying,
    at the first one that would change the predicted class away from `c`.
    Proportional mode applies the first ceil(fraction * k) entries of the
    semifactual sequence, where k is that sequence's full length.
    """
    x = np.asarray(x, dtype=np.float64).copy()
    if any(
        features[i].probability > features[i + 1].probability
        for i in range(len(features) - 1)
    ):
        raise PipelineError("exceptional features must be sorted by probability")
    if mode == "proportional":
        if fraction is None:
            raise PipelineError("proportional mode needs a fraction")
        base = modify_features(x, features, w, head, c, c_prime, "semifactual")
        k = base.applied_count
        budget = math.ceil(fraction * k)
        return _apply_walk(x, features, w, head, c, c_prime, "proportional", budget, k)
    return _apply_walk(x, features, w, head, c, c_prime, mode, None, None)


def _head_probs(head: nc.Network, x: np.ndarray) -> np.ndarray:
    return nc.forward(head, x).output


def _apply_walk(
    x: np.ndarray,
    features: list,
    w: np.ndarray,
    head: nc.Network,
    c: int,
    c_prime: int,
    mode: str,
    budget: Optional[int],
    k_reference: Optional[int],
) -> ModificationResult:
    cur = x.copy()
    steps: list = []
    replaced: set = set()
    eligible_count = 0
    applied = 0
    probs = _head_probs(head, cur)

    def record(feat: ExceptionalFeature, ok: bool, reason: str, p) -> None:
        steps.append(
            ModStep(
                feat.neuron,
                feat.rule.value,
                feat.probability,
                feat.observed,
                feat.replacement,
                ok,
                reason,
                float(p[c]),
                float(p[c_prime]),
            )
        )

    for feat in features:
        weight = float(w[feat.neuron])
        if weight == 0.0:
            record(feat, False, "zero_weight", probs)
            continue
        if not _eligible(feat.rule, weight):
            record(feat, False, "wrong_branch", probs)
            continue
        if feat.neuron in replaced:
            record(feat, False, "already_replaced", probs)
            continue
        eligible_count += 1
        if budget is not None and applied >= budget:
            record(feat, False, "beyond_budget", probs)
            continue
        tentative = cur.copy()
        tentative[feat.neuron] = feat.replacement
        new_probs = _head_probs(head, tentative)
        if mode == "semifactual" and int(np.argmax(new_probs)) != c:
            record(feat, False, "would_flip", probs)
            break
        cur = tentative
        probs = new_probs
        replaced.add(feat.neuron)
        applied += 1
        record(feat, True, "applied", probs)

    status = "ok" if eligible_count else "no_eligible_exceptional_features"
    return ModificationResult(
        cur,
        steps,
        applied,
        eligible_count,
        status,
        k_reference if k_reference is not None else applied,
    )


# ---------------------------------------------------------------------------
# Visualization


@dataclass
class VisualizationResult:
    z: np.ndarray
    image: np.ndarray  # (H, W)
    residual_before: float
    residual_after: float


def visualize(
    generator: nc.Network,
    feature_net: nc.Network,
    x_target: np.ndarray,
    z_init: np.ndarray,
    settings: OptimSettings,
    image_shape: tuple,
) -> VisualizationResult:
    """Descend from the inversion latent until the generated image's features
    match the modified feature vector; returns the best latent seen."""
    x_target = np.asarray(x_target, dtype=np.float64)

    def vis_step(zv: np.ndarray) -> tuple[np.ndarray, float]:
        tg = nc.forward(generator, zv, check_finite=False)
        tc = nc.forward(feature_net, tg.outputs[-1], check_finite=False)
        feats = tc.outputs[-1]
        g_feat = 2.0 * (feats - x_target)
        _, g_img = nc.backward(feature_net, tc, g_feat)
        _, g_z = nc.backward(generator, tg, g_img)
        return g_z, float(np.sum((feats - x_target) ** 2))

    z = z_init.copy()
    g_z, before = vis_step(z)
    best_z = z.copy()
    best_loss = before
    state = nc.AdamState.init([z])
    for _ in range(settings.visualize_steps):
        (z,), state = nc.adam_step([z], [g_z], state, settings.visualize_lr)
        if not np.all(np.isfinite(z)):
            raise VisualizationError("visualization latent diverged to non-finite")
        g_z, cur = vis_step(z)
        if cur < best_loss:
            best_loss = cur
            best_z = z.copy()
    image = nc.forward(generator, best_z).output.reshape(image_shape)
    return VisualizationResult(best_z, image, before, best_loss)


# ---------------------------------------------------------------------------
# Orchestration


@dataclass
class ExplanationContext:
    """Mode-independent work for one test image, reusable across modes."""

    c: int
    inversion: InversionResult
    selection: SelectionResult
    x: np.ndarray
    features: list
    skipped_degenerate: int
    probs_original: np.ndarray


def prepare_context(
    request: ExplanationRequest,
    classifier: nc.Network,
    generator: nc.Network,
    stats: StatsTable,
) -> ExplanationContext:
    request.validate()
    flat = np.asarray(request.image, dtype=np.float64).ravel()
    probs = nc.forward(classifier, flat).output
    c = int(np.argmax(probs))
    inversion = invert_image(
        generator, nc.split_at_tap(classifier)[0], request.image, request.settings,
        request.seed,
    )
    if request.target_class is not None:
        selection = SelectionResult(int(request.target_class), True, 0)
    else:
        selection = select_cf_class(
            classifier, generator, inversion.z, request.image, request.true_label,
            request.settings,
        )
    body, _ = nc.split_at_tap(classifier)
    x = nc.forward(body, flat).output
    features, skipped = classify_exceptional(
        x, stats.models[selection.c_prime], request.alpha
    )
    return ExplanationContext(c, inversion, selection, x, features, skipped, probs)


@dataclass
class ExplanationResult:
    mode: str
    fraction: Optional[float]
    image_id: int
    true_label: int
    c: int
    c_prime: int
    trivially_selected: bool
    alpha: float
    z: np.ndarray
    x: np.ndarray
    exceptional: list
    skipped_degenerate: int
    mod_steps: list
    x_mod: np.ndarray
    z_prime: np.ndarray
    image_prime: np.ndarray
    probs_original: np.ndarray
    probs_prime: np.ndarray
    applied_count: int
    eligible_count: int
    k_reference: int
    status: str
    intended_class: int
    verified: bool
    inversion_losses: dict
    residuals: dict
    backoff_steps: int
    recheck_violations: int
    exceptional_ks_p: list  # ks p-values of the flagged features' models

    def prob_c_prime_before(self) -> float:
        return float(self.probs_original[self.c_prime])

    def prob_c_prime_after(self) -> float:
        head_trace = self.mod_steps
        if not head_trace:
            return self.prob_c_prime_before()
        return head_trace[-1].prob_c_prime


def _proportional_from_reference(
    ctx: ExplanationContext,
    reference: "ExplanationResult",
    fraction: float,
    head: nc.Network,
    c: int,
    c_prime: int,
) -> ModificationResult:
    """Prefix of the delivered semifactual's replacement sequence."""
    seq = [s for s in reference.mod_steps if s.applied]
    k = len(seq)
    budget = math.ceil(fraction * k)
    cur = ctx.x.copy()
    steps: list = []
    applied = 0
    probs = _head_probs(head, cur)
    for s in seq:
        if applied >= budget:
            steps.append(
                ModStep(
                    s.neuron, s.rule, s.probability, s.old, s.new, False,
                    "beyond_budget", float(probs[c]), float(probs[c_prime]),
                )
            )
            continue
        cur[s.neuron] = s.new
        probs = _head_probs(head, cur)
        applied += 1
        steps.append(
            ModStep(
                s.neuron, s.rule, s.probability, s.old, s.new, True,
                "applied", float(probs[c]), float(probs[c_prime]),
            )
        )
    status = "ok" if reference.eligible_count else "no_eligible_exceptional_features"
    return ModificationResult(cur, steps, applied, reference.eligible_count, status, k)


def _recheck_violations(
    x_mod: np.ndarray, applied: list, stats: StatsTable, c_prime: int, alpha: float
) -> int:
    """Count replaced features that still trigger their original rule.

    The unexpected-activation rule is excluded: any positive replacement
    keeps the neuron active, so it re-triggers by definition.
    """
    redone, _ = classify_exceptional(x_mod, stats.models[c_prime], alpha)
    applied_rules = {
        (s.neuron, s.rule) for s in applied if s.applied and s.rule != Rule.UNEXPECTED.value
    }
    return sum(1 for f in redone if (f.neuron, f.rule.value) in applied_rules)


def explain(
    request: ExplanationRequest,
    classifier: nc.Network,
    generator: nc.Network,
    stats: StatsTable,
    context: Optional[ExplanationContext] = None,
    reference: Optional["ExplanationResult"] = None,
) -> ExplanationResult:
    """Full pipeline for one request.

    `context` lets callers reuse the inversion and class selection when
    explaining one image several ways. Proportional requests measure their
    budget against the delivered max-edit semifactual (the one whose
    rendered image still classifies as `c`), so fraction 1.0 reproduces it
    exactly; pass that semifactual as `reference` to avoid recomputing it.
    """
    request.validate()
    ctx = context or prepare_context(request, classifier, generator, stats)
    body, head = nc.split_at_tap(classifier)
    c, c_prime = ctx.c, ctx.selection.c_prime
    w = nc.class_weight_vector(classifier, c_prime)
    shape = np.asarray(request.image).shape

    if request.mode == "proportional":
        if reference is None:
            sf_request = ExplanationRequest(
                image=request.image,
                true_label=request.true_label,
                mode="semifactual",
                alpha=request.alpha,
                settings=request.settings,
                seed=request.seed,
                image_id=request.image_id,
                target_class=request.target_class,
            )
            reference = explain(sf_request, classifier, generator, stats, context=ctx)
        elif reference.mode != "semifactual" or reference.image_id != request.image_id:
            raise PipelineError("reference must be a semifactual result for this image")
        mod = _proportional_from_reference(
            ctx, reference, request.fraction, head, c, c_prime
        )
    else:
        mod = modify_features(
            ctx.x, ctx.features, w, head, c, c_prime, request.mode, request.fraction
        )

    vis = visualize(
        generator, body, mod.x_mod, ctx.inversion.z, request.settings, shape
    )
    probs_prime = nc.forward(classifier, vis.image.ravel()).output
    pred_prime = int(np.argmax(probs_prime))
    intended = c_prime if request.mode == "counterfactual" else c

    backoff = 0
    if request.mode == "semifactual" and pred_prime != intended:
        # the rendered image may land past the boundary even though the
        # feature vector does not; retreat one replacement at a time
        applied_seq = [s for s in mod.steps if s.applied]
        while pred_prime != intended and applied_seq:
            dropped = applied_seq.pop()
            dropped.applied = False
            dropped.reason = "backoff_visual_flip"
            x_mod = ctx.x.copy()
            for s in applied_seq:
                x_mod[s.neuron] = s.new
            vis = visualize(
                generator, body, x_mod, ctx.inversion.z, request.settings, shape
            )
            probs_prime = nc.forward(classifier, vis.image.ravel()).output
            pred_prime = int(np.argmax(probs_prime))
            backoff += 1
            mod = ModificationResult(
                x_mod,
                mod.steps,
                len(applied_seq),
                mod.eligible_count,
                mod.status,
                len(applied_seq),
            )

    violations = _recheck_violations(mod.x_mod, mod.steps, stats, c_prime, request.alpha)
    ks_list = []
    for feat in ctx.features:
        model = stats.models[c_prime][feat.neuron]
        if not model.degenerate:
            ks_list.append(model.dist.ks_p)

    return ExplanationResult(
        mode=request.mode,
        fraction=request.fraction,
        image_id=request.image_id,
        true_label=request.true_label,
        c=c,
        c_prime=c_prime,
        trivially_selected=ctx.selection.trivial,
        alpha=request.alpha,
        z=ctx.inversion.z,
        x=ctx.x,
        exceptional=ctx.features,
        skipped_degenerate=ctx.skipped_degenerate,
        mod_steps=mod.steps,
        x_mod=mod.x_mod,
        z_prime=vis.z,
        image_prime=vis.image,
        probs_original=ctx.probs_original,
        probs_prime=probs_prime,
        applied_count=mod.applied_count,
        eligible_count=mod.eligible_count,
        k_reference=mod.k_reference,
        status=mod.status,
        intended_class=intended,
        verified=pred_prime == intended,
        inversion_losses={
            "combined": ctx.inversion.combined_loss,
            "feature": ctx.inversion.feature_loss,
            "pixel": ctx.inversion.pixel_loss,
        },
        residuals={"before": vis.residual_before, "after": vis.residual_after},
        backoff_steps=backoff,
        recheck_violations=violations,
        exceptional_ks_p=ks_list,
    )


def result_to_dict(res: ExplanationResult) -> dict:
    """JSON-ready view of an explanation result."""
    return {
        "mode": res.mode,
        "fraction": res.fraction,
        "image_id": res.image_id,
        "true_label": res.true_label,
        "c": res.c,
        "c_prime": res.c_prime,
        "trivially_selected": res.trivially_selected,
        "alpha": res.alpha,
        "z": [float(v) for v in res.z],
        "x": [float(v) for v in res.x],
        "exceptional": [
            {
                "neuron": f.neuron,
                "rule": f.rule.value,
                "probability": f.probability,
                "observed": f.observed,
                "replacement": f.replacement,
            }
            for f in res.exceptional
        ],
        "skipped_degenerate": res.skipped_degenerate,
        "steps": [
            {
                "neuron": s.neuron,
                "rule": s.rule,
                "probability": s.probability,
                "old": s.old,
                "new": s.new,
                "applied": s.applied,
                "reason": s.reason,
                "prob_c": s.prob_c,
                "prob_c_prime": s.prob_c_prime,
            }
            for s in res.mod_steps
        ],
        "x_mod": [float(v) for v in res.x_mod],
        "z_prime": [float(v) for v in res.z_prime],
        "probs_original": [float(v) for v in res.probs_original],
        "probs_prime": [float(v) for v in res.probs_prime],
        "applied_count": res.applied_count,
        "eligible_count": res.eligible_count,
        "k_reference": res.k_reference,
        "status": res.status,
        "intended_class": res.intended_class,
        "verified": res.verified,
        "inversion_losses": res.inversion_losses,
        "residuals": res.residuals,
        "backoff_steps": res.backoff_steps,
        "recheck_violations": res.recheck_violations,
        "exceptional_ks_p": res.exceptional_ks_p,
    }
