"""The optimization core: transfer attacks on white-box surrogates, the
zero-order query attack on the black-box victim, and the combined
two-stage pipeline.

Transfer stage (feature matching, solved by projected gradient descent):
maximize the similarity between the adversarial image's surrogate features
and either the targeted image's features (``mf-ii``) or the targeted
text's features (``mf-it``).  Each step is a unit sign-gradient update on
the noise followed by projection onto the L-infinity ball and the pixel
range, in that order.

Query stage (``mf-tt``): maximize the similarity between the victim's
generated text and the targeted text.  Gradients are estimated by the
random gradient-free method: average of [loss(x + sigma*delta_n) -
loss(x)] * delta_n over N random directions, divided by sigma.  One outer
step costs exactly N+1 victim queries (the baseline is evaluated once and
reused), after which the estimated gradient drives several sign-update
inner steps.

All iterates, intermediate and final, satisfy both the budget and the
pixel-range constraints by construction.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import rng
from .datasets import AttackCase, TargetImageProvider, resolve_target_image
from .encoders import (
    EmbeddingVector,
    EncoderError,
    ImageEncoder,
    TextEncoder,
    normalize_vector,
    similarity_vjp,
)
from .errors import AttackError, ConfigError
from .imagecore import (
    PIXEL_MAX,
    PIXEL_MIN,
    LinfBudget,
    PixelImage,
    clamp_pixels,
    load_png,
)
from .victims import Prompt, VictimOracle

TRANSFER_OBJECTIVES = ("mf-ii", "mf-it")
DELTA_DISTRIBUTIONS = ("normal", "sphere")

# stream label for zero-order perturbation draws
_RGF_STREAM = 0x52474600


@dataclass(frozen=True)
class TransferConfig:
    """Settings for the surrogate-side PGD stage."""

    steps: int = 100
    step_size: float = 1.0
    budget: LinfBudget = LinfBudget(8.0)
    objective: str = "mf-ii"

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"transfer steps must be >= 0, got {self.steps}")
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.objective not in TRANSFER_OBJECTIVES:
            raise ConfigError(
                f"objective must be one of {TRANSFER_OBJECTIVES}, got {self.objective!r}"
            )


@dataclass(frozen=True)
class QueryConfig:
    """Settings for the victim-side zero-order stage.

    ``steps`` (the outer step count) has no blessed default and must be
    set explicitly; 0 disables the stage.
    """

    steps: int
    queries: int = 100
    sigma: float = 8.0
    inner_pgd_steps: int = 8
    step_size: float = 1.0
    budget: LinfBudget = LinfBudget(8.0)
    distribution: str = "normal"
    seed: int = 0
    max_parallel_queries: int = 1

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"query steps must be >= 0, got {self.steps}")
        if self.queries < 1:
            raise ConfigError(f"queries per step must be >= 1, got {self.queries}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.inner_pgd_steps < 1:
            raise ConfigError(
                f"inner_pgd_steps must be >= 1, got {self.inner_pgd_steps}"
            )
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.distribution not in DELTA_DISTRIBUTIONS:
            raise ConfigError(
                f"distribution must be one of {DELTA_DISTRIBUTIONS}, "
                f"got {self.distribution!r}"
            )
        if self.max_parallel_queries < 1:
            raise ConfigError("max_parallel_queries must be >= 1")


@dataclass
class AttackTrace:
    """Per-step objective record for one stage."""

    objective_values: list[float] = field(default_factory=list)
    best_so_far: list[float] = field(default_factory=list)
    query_count: int = 0
    wall_time_seconds: float = 0.0
    truncated: bool = False


@dataclass
class AttackResult:
    """Outcome of the full pipeline on one case."""

    case_id: str
    x_adv: PixelImage
    x_trans: PixelImage
    transfer_trace: AttackTrace
    query_trace: AttackTrace
    final_text: str | None


def _unit(v: EmbeddingVector) -> np.ndarray:
    return v.values if v.normalized else normalize_vector(v.values)


def mf_it_objective(
    x: PixelImage, c_tar: str, f: ImageEncoder, g: TextEncoder
) -> float:
    """Cosine between the image's and the targeted text's embeddings."""
    if f.embed_dim != g.embed_dim:
        raise EncoderError(
            f"embed dims differ: image {f.embed_dim} vs text {g.embed_dim}"
        )
    return float(np.dot(_unit(f.encode(x)), _unit(g.encode(c_tar))))


def mf_ii_objective(x: PixelImage, target_img: PixelImage, f: ImageEncoder) -> float:
    """Cosine between the image's and the targeted image's embeddings."""
    return float(np.dot(_unit(f.encode(x)), _unit(f.encode(target_img))))


def transfer_target_embedding(
    objective: str,
    surrogate: ImageEncoder,
    text_encoder: TextEncoder,
    targeted_text: str,
    targeted_image: PixelImage | None,
) -> EmbeddingVector:
    """The fixed embedding the transfer stage matches against."""
    if objective == "mf-ii":
        if targeted_image is None:
            raise AttackError("mf-ii needs a targeted image")
        return surrogate.encode(targeted_image)
    if objective == "mf-it":
        if surrogate.embed_dim != text_encoder.embed_dim:
            raise EncoderError(
                f"embed dims differ: image {surrogate.embed_dim} "
                f"vs text {text_encoder.embed_dim}"
            )
        return text_encoder.encode(targeted_text)
    raise ConfigError(f"unknown transfer objective {objective!r}")


def pgd_transfer(
    x_cle: PixelImage,
    target: EmbeddingVector,
    encoder: ImageEncoder,
    cfg: TransferConfig,
    step_callback: Callable[[PixelImage], None] | None = None,
) -> tuple[PixelImage, AttackTrace]:
    """Sign-gradient PGD maximizing <encode(x_adv), target>.

    Each step evaluates the similarity and its gradient at the current
    iterate, then updates delta <- clamp(delta + step_size * sign(grad),
    -eps, +eps); the adversarial image is clamp(x_cle + delta, 0, 255).
    sign(0) is 0, so a constant objective leaves the image untouched.
    The similarity uses the encoder's configured output (normalized or
    raw); the recorded value at step i belongs to the pre-update iterate.
    """
    if target.dim != encoder.embed_dim:
        raise EncoderError(
            f"target dim {target.dim} != encoder embed_dim {encoder.embed_dim}"
        )
    eps = cfg.budget.epsilon
    start = time.perf_counter()
    delta = np.zeros_like(x_cle.pixels)
    trace = AttackTrace()
    for _ in range(cfg.steps):
        raw = x_cle.pixels + delta
        x_adv = PixelImage(clamp_pixels(raw))
        sim = float(np.dot(encoder.encode(x_adv).values, target.values))
        grad_x = similarity_vjp(encoder, x_adv, target)
        if not np.all(np.isfinite(grad_x)):
            raise AttackError(
                f"non-finite gradient at step {len(trace.objective_values)} "
                f"(objective {sim!r})"
            )
        # pixels already clamped pass no gradient back to delta
        passthrough = (raw >= PIXEL_MIN) & (raw <= PIXEL_MAX)
        step = cfg.step_size * np.sign(grad_x * passthrough)
        delta = np.clip(delta + step, -eps, eps)
        trace.objective_values.append(sim)
        trace.best_so_far.append(
            sim if not trace.best_so_far else max(sim, trace.best_so_far[-1])
        )
        if step_callback is not None:
            step_callback(PixelImage(clamp_pixels(x_cle.pixels + delta)))
    trace.wall_time_seconds = time.perf_counter() - start
    return PixelImage(clamp_pixels(x_cle.pixels + delta)), trace


def mf_tt_loss_and_text(
    x: PixelImage,
    victim: VictimOracle,
    g: TextEncoder,
    c_tar: str,
    prompt: Prompt,
    case_id: str | None = None,
    target_embedding: np.ndarray | None = None,
) -> tuple[float, str]:
    """One victim query plus the text-text similarity of its response.

    An empty victim response (e.g. a refusal) scores 0 rather than raising.
    """
    text = victim.generate(x, prompt, case_id=case_id)
    if not text.strip():
        return 0.0, text
    e_tar = (
        target_embedding
        if target_embedding is not None
        else _unit(g.encode(c_tar))
    )
    return float(np.dot(_unit(g.encode(text)), e_tar)), text


def mf_tt_loss(
    x: PixelImage,
    victim: VictimOracle,
    g: TextEncoder,
    c_tar: str,
    prompt: Prompt,
    case_id: str | None = None,
) -> float:
    return mf_tt_loss_and_text(x, victim, g, c_tar, prompt, case_id)[0]


def sample_delta(cfg: QueryConfig, step: int, index: int, shape: tuple[int, ...]) -> np.ndarray:
    """The index-th random direction of an outer step, reproducible from
    (seed, step, index) alone so evaluation order cannot matter."""
    key = rng.derive_key(cfg.seed, _RGF_STREAM, step, index)
    d = rng.normals(key, shape)
    if cfg.distribution == "sphere":
        # uniform direction scaled to radius sqrt(n) keeps E[dd^T] = I
        d = d * (np.sqrt(d.size) / np.linalg.norm(d))
    return d


def rgf_estimate(
    loss: Callable[[PixelImage], float],
    x: PixelImage,
    cfg: QueryConfig,
    step: int = 0,
    baseline_loss: float | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Random gradient-free estimate of grad loss at x.

    (1 / (N * sigma)) * sum_n [loss(clamp(x + sigma*delta_n)) - loss(x)]
    * delta_n, with delta_n drawn i.i.d. from the configured distribution.
    Costs exactly N+1 loss evaluations unless the baseline is supplied.
    Aggregation always runs in sample order, so threaded evaluation gives
    bit-identical results.
    """
    if baseline_loss is None:
        baseline_loss = loss(x)
    n = cfg.queries
    deltas = [sample_delta(cfg, step, i, x.shape) for i in range(n)]

    def eval_sample(i: int) -> float:
        return loss(PixelImage(clamp_pixels(x.pixels + cfg.sigma * deltas[i])))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=min(workers, n)) as pool:
            losses = list(pool.map(eval_sample, range(n)))
    else:
        losses = [eval_sample(i) for i in range(n)]

    grad = np.zeros_like(x.pixels)
    for i in range(n):
        grad += (losses[i] - baseline_loss) * deltas[i]
    return grad / (n * cfg.sigma)


def pgd_query(
    x_init: PixelImage,
    x_cle: PixelImage,
    cfg: QueryConfig,
    victim: VictimOracle,
    text_encoder: TextEncoder,
    c_tar: str,
    prompt: Prompt,
    case_id: str | None = None,
    query_cap: int | None = None,
    step_callback: Callable[[PixelImage], None] | None = None,
) -> tuple[PixelImage, AttackTrace, str | None]:
    """Zero-order refinement of x_init against the live victim.

    Each outer step scores the current iterate (the baseline query),
    estimates a pseudo-gradient with N more queries, and applies
    ``inner_pgd_steps`` sign updates clamped to the budget around x_cle.
    Returns the scored iterate with the best loss -- zero-order steps are
    noisy, so the last iterate is not trusted blindly -- plus the victim's
    response for it.  With steps == 0 (or a cap below one step's cost)
    nothing is queried and x_init comes back with no response text.

    A ``query_cap`` bounds total victim queries; hitting it returns the
    best-so-far with the trace flagged truncated.
    """
    eps = cfg.budget.epsilon
    if x_init.shape != x_cle.shape:
        raise AttackError("x_init and x_cle shapes differ")
    gap = float(np.abs(x_init.pixels - x_cle.pixels).max())
    if gap > eps + 1e-9:
        raise AttackError(
            f"infeasible init: |x_init - x_cle|_inf = {gap} > epsilon = {eps}"
        )
    start = time.perf_counter()
    delta = np.clip(x_init.pixels - x_cle.pixels, -eps, eps)
    target_emb = _unit(text_encoder.encode(c_tar))
    workers = min(cfg.max_parallel_queries, victim.max_concurrency)

    trace = AttackTrace()
    best_loss = -np.inf
    best_x = x_init
    best_text: str | None = None
    cost_per_step = cfg.queries + 1
    for j in range(cfg.steps):
        if query_cap is not None and trace.query_count + cost_per_step > query_cap:
            trace.truncated = True
            break
        x_adv = PixelImage(clamp_pixels(x_cle.pixels + delta))
        loss0, text = mf_tt_loss_and_text(
            x_adv, victim, text_encoder, c_tar, prompt, case_id, target_emb
        )
        if loss0 > best_loss:
            best_loss, best_x, best_text = loss0, x_adv, text
        trace.objective_values.append(loss0)
        trace.best_so_far.append(
            loss0 if not trace.best_so_far else max(loss0, trace.best_so_far[-1])
        )

        def sample_loss(img: PixelImage) -> float:
            return mf_tt_loss_and_text(
                img, victim, text_encoder, c_tar, prompt, case_id, target_emb
            )[0]

        pseudo_grad = rgf_estimate(
            sample_loss, x_adv, cfg, step=j, baseline_loss=loss0, workers=workers
        )
        trace.query_count += cost_per_step
        step = cfg.step_size * np.sign(pseudo_grad)
        for _ in range(cfg.inner_pgd_steps):
            delta = np.clip(delta + step, -eps, eps)
        if step_callback is not None:
            step_callback(PixelImage(clamp_pixels(x_cle.pixels + delta)))
    trace.wall_time_seconds = time.perf_counter() - start
    return best_x, trace, best_text


def attack_pipeline(
    case: AttackCase,
    tcfg: TransferConfig,
    qcfg: QueryConfig,
    surrogate: ImageEncoder,
    text_encoder: TextEncoder,
    victim: VictimOracle,
    provider: TargetImageProvider | None = None,
    target_cache: dict[str, PixelImage] | None = None,
    query_cap: int | None = None,
    transfer_callback: Callable[[PixelImage], None] | None = None,
    query_callback: Callable[[PixelImage], None] | None = None,
) -> AttackResult:
    """Two-stage attack on one case: transfer PGD, then query refinement
    initialized at the transfer output.

    Either stage degenerates cleanly: steps == 0 skips it.  A pure
    transfer run makes no victim queries at all, so its result carries no
    response text (use the eval harness to score it).
    """
    x_cle = load_png(case.clean_image)
    if tcfg.steps > 0:
        targeted_image = None
        if tcfg.objective == "mf-ii":
            targeted_image = resolve_target_image(provider, case, target_cache)
        target = transfer_target_embedding(
            tcfg.objective, surrogate, text_encoder, case.targeted_text, targeted_image
        )
        x_trans, transfer_trace = pgd_transfer(
            x_cle, target, surrogate, tcfg, step_callback=transfer_callback
        )
    else:
        x_trans, transfer_trace = x_cle, AttackTrace()

    if qcfg.steps > 0:
        x_adv, query_trace, final_text = pgd_query(
            x_trans,
            x_cle,
            qcfg,
            victim,
            text_encoder,
            case.targeted_text,
            case.prompt,
            case_id=case.id,
            query_cap=query_cap,
            step_callback=query_callback,
        )
    else:
        x_adv, query_trace, final_text = x_trans, AttackTrace(), None

    return AttackResult(
        case_id=case.id,
        x_adv=x_adv,
        x_trans=x_trans,
        transfer_trace=transfer_trace,
        query_trace=query_trace,
        final_text=final_text,
    )


def split_budget_configs(
    tcfg: TransferConfig, qcfg: QueryConfig, eps_t: float, eps_q: float
) -> tuple[TransferConfig, QueryConfig]:
    """Stage configs for one transfer/query budget split.

    The transfer stage is confined to [-eps_t, +eps_t]; the query stage
    may grow the cumulative noise to the full eps_t + eps_q around the
    clean image.  A zero sub-budget disables its stage outright.
    """
    if eps_t < 0 or eps_q < 0:
        raise ConfigError(f"negative sub-budgets rejected: ({eps_t}, {eps_q})")
    split_t = replace(
        tcfg,
        budget=LinfBudget(eps_t),
        steps=tcfg.steps if eps_t > 0 else 0,
    )
    split_q = replace(
        qcfg,
        budget=LinfBudget(eps_t + eps_q),
        steps=qcfg.steps if eps_q > 0 else 0,
    )
    return split_t, split_q


def split_label(eps_t: float, eps_q: float) -> str:
    def fmt(v: float) -> str:
        return str(int(v)) if float(v).is_integer() else str(v)

    return f"t{fmt(eps_t)}-q{fmt(eps_q)}"
