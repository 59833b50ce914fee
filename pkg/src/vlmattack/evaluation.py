"""Attack-success measurement and the experiment harnesses: embedding
similarity scores with per-encoder and ensemble columns, the epsilon
sweep with a pluggable perceptual distance, the Gaussian-noise
sensitivity sweep, and deterministic CSV/JSON report emission."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng
from .attack import AttackResult, QueryConfig, TransferConfig, attack_pipeline
from .datasets import AttackCase, TargetImageProvider
from .encoders import EncoderError, ImageEncoder, TextEncoder, normalize_vector
from .errors import ConfigError
from .imagecore import LinfBudget, PixelImage, clamp_pixels
from .victims import Prompt, VictimOracle

# stream label for sensitivity-sweep noise draws
_NOISE_STREAM = 0x4E4F4953


@dataclass(frozen=True)
class ClipScoreReport:
    """Per-encoder cosine scores plus their unweighted mean."""

    per_encoder: dict[str, float]
    ensemble: float

    def __post_init__(self):
        mean = sum(self.per_encoder.values()) / len(self.per_encoder)
        if abs(mean - self.ensemble) > 1e-9:
            raise ConfigError("ensemble must equal the mean of per-encoder scores")


@dataclass(frozen=True)
class SensitivityCurve:
    """Mean targeted-similarity as a function of added noise level."""

    noise_sigmas: list[float]
    mean_scores: list[float]
    trials_per_point: int
    seed: int

    def __post_init__(self):
        if len(self.noise_sigmas) != len(self.mean_scores):
            raise ConfigError("sigma and score lists must have equal length")
        if 0.0 not in self.noise_sigmas:
            raise ConfigError("sigma 0 must be present as the baseline")


def _unit_text(enc: TextEncoder, text: str) -> np.ndarray:
    e = enc.encode(text)
    return e.values if e.normalized else normalize_vector(e.values)


def clip_score(
    text_a: str, text_b: str, encoders: Sequence[TextEncoder]
) -> ClipScoreReport:
    """Text-text similarity under each configured encoder, plus the mean."""
    if not text_a.strip() or not text_b.strip():
        raise EncoderError("cannot score empty text")
    if not encoders:
        raise ConfigError("clip_score needs at least one text encoder")
    per = {
        enc.name: float(np.dot(_unit_text(enc, text_a), _unit_text(enc, text_b)))
        for enc in encoders
    }
    return ClipScoreReport(per, sum(per.values()) / len(per))


def image_text_score(
    x: PixelImage, c: str, f: ImageEncoder, g: TextEncoder
) -> float:
    """Cosine between normalized image and text embeddings."""
    if f.embed_dim != g.embed_dim:
        raise EncoderError(
            f"embed dims differ: image {f.embed_dim} vs text {g.embed_dim}"
        )
    img = f.encode(x)
    img_v = img.values if img.normalized else normalize_vector(img.values)
    return float(np.dot(img_v, _unit_text(g, c)))


def mean_abs_pixel_distance(a: PixelImage, b: PixelImage) -> float:
    """Built-in perceptual-distance stand-in: mean |a - b| / 255 in [0, 1].

    Learned metrics (LPIPS-style) plug in through the same two-image
    callable interface.
    """
    return float(np.abs(a.pixels - b.pixels).mean() / 255.0)


@dataclass
class SweepPoint:
    epsilon: float
    final_score: float | None
    distance: float | None
    query_count: int
    error: str | None = None


def eps_sweep(
    case: AttackCase,
    eps_list: Sequence[float],
    tcfg: TransferConfig,
    qcfg: QueryConfig,
    surrogate: ImageEncoder,
    text_encoder: TextEncoder,
    victim: VictimOracle,
    provider: TargetImageProvider | None = None,
    distance_metric: Callable[[PixelImage, PixelImage], float] = mean_abs_pixel_distance,
    score_fn: Callable[[AttackResult], float | None] | None = None,
) -> list[SweepPoint]:
    """Run the pipeline at each budget and record score vs. distortion.

    ``eps_list`` must be nonnegative and strictly increasing.  Failures at
    one epsilon are recorded and the sweep continues.
    """
    if any(e < 0 for e in eps_list):
        raise ConfigError("epsilon values must be >= 0")
    if list(eps_list) != sorted(set(eps_list)):
        raise ConfigError("epsilon values must be strictly increasing")
    from .imagecore import load_png

    x_cle = load_png(case.clean_image)
    target_cache: dict[str, PixelImage] = {}
    points: list[SweepPoint] = []
    for eps in eps_list:
        t = replace(tcfg, budget=LinfBudget(eps))
        q = replace(qcfg, budget=LinfBudget(eps))
        try:
            result = attack_pipeline(
                case, t, q, surrogate, text_encoder, victim,
                provider=provider, target_cache=target_cache,
            )
            score = score_fn(result) if score_fn is not None else None
            points.append(
                SweepPoint(
                    epsilon=eps,
                    final_score=score,
                    distance=distance_metric(x_cle, result.x_adv),
                    query_count=result.query_trace.query_count,
                )
            )
        except Exception as exc:
            points.append(
                SweepPoint(
                    epsilon=eps, final_score=None, distance=None,
                    query_count=0, error=str(exc),
                )
            )
    return points


def sensitivity_sweep(
    x_adv: PixelImage,
    c_tar: str,
    victim: VictimOracle,
    text_encoders: Sequence[TextEncoder],
    sigmas: Sequence[float],
    trials: int,
    seed: int,
    prompt: Prompt = Prompt(),
    case_id: str | None = None,
) -> SensitivityCurve:
    """Mean targeted-similarity after adding seeded Gaussian pixel noise.

    Every (sigma, trial) point costs exactly one victim query, including
    the sigma = 0 baseline points.  Noise is applied in real-valued pixel
    space and clamped to [0, 255]; nothing is re-quantized between trials.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    if any(s < 0 for s in sigmas):
        raise ConfigError("noise sigmas must be >= 0")
    scorer = lambda text: clip_score(text, c_tar, text_encoders).ensemble
    means: list[float] = []
    for si, sigma in enumerate(sigmas):
        scores = []
        for trial in range(trials):
            if sigma == 0:
                perturbed = x_adv
            else:
                key = rng.derive_key(seed, _NOISE_STREAM, si, trial)
                noise = sigma * rng.normals(key, x_adv.shape)
                perturbed = PixelImage(clamp_pixels(x_adv.pixels + noise))
            text = victim.generate(perturbed, prompt, case_id=case_id)
            scores.append(scorer(text) if text.strip() else 0.0)
        means.append(sum(scores) / trials)
    return SensitivityCurve(
        noise_sigmas=list(sigmas),
        mean_scores=means,
        trials_per_point=trials,
        seed=seed,
    )


@dataclass
class CaseScores:
    """One report row: a case's per-encoder scores and run accounting."""

    case_id: str
    per_encoder: dict[str, float] = field(default_factory=dict)
    ensemble: float | None = None
    query_count: int = 0
    wall_time_seconds: float = 0.0
    error: str | None = None


def score_response(
    text: str | None, c_tar: str, encoders: Sequence[TextEncoder]
) -> tuple[dict[str, float], float | None]:
    """Per-encoder + ensemble scores of a victim response against the
    targeted text; an absent or empty response scores 0 everywhere."""
    if text is None or not text.strip():
        per = {enc.name: 0.0 for enc in encoders}
        return per, 0.0
    report = clip_score(text, c_tar, encoders)
    return dict(report.per_encoder), report.ensemble


def generate_and_score(
    x: PixelImage,
    case: AttackCase,
    victim: VictimOracle,
    encoders: Sequence[TextEncoder],
) -> tuple[str, dict[str, float], float]:
    """Evaluation-time query: fetch the victim's response for an image and
    score it against the case's targeted text."""
    text = victim.generate(x, case.prompt, case_id=case.id)
    per, ensemble = score_response(text, case.targeted_text, encoders)
    return text, per, ensemble


def emit_report(
    rows: list[CaseScores], out_dir: str | Path, encoder_names: Sequence[str]
) -> tuple[Path, Path]:
    """Write report.csv (one row per case) and summary.json (means and
    medians).  Ordering is by case id and emission is byte-deterministic
    for identical inputs."""
    if not rows:
        raise ConfigError("emit_report needs at least one result row")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(encoder_names)
    ordered = sorted(rows, key=lambda r: r.case_id)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["case_id", *names, "ensemble", "query_count", "wall_time_seconds", "error"]
    )
    for row in ordered:
        writer.writerow(
            [
                row.case_id,
                *[_fmt(row.per_encoder.get(n)) for n in names],
                _fmt(row.ensemble),
                row.query_count,
                _fmt(row.wall_time_seconds),
                row.error or "",
            ]
        )
    csv_path = out / "report.csv"
    csv_path.write_text(buf.getvalue())

    scored = [r.ensemble for r in ordered if r.ensemble is not None]
    summary = {
        "cases": len(ordered),
        "errors": sum(1 for r in ordered if r.error),
        "total_queries": sum(r.query_count for r in ordered),
        "ensemble_mean": statistics.fmean(scored) if scored else None,
        "ensemble_median": statistics.median(scored) if scored else None,
        "per_encoder_mean": {
            n: statistics.fmean(
                [r.per_encoder[n] for r in ordered if n in r.per_encoder]
            )
            for n in names
            if any(n in r.per_encoder for r in ordered)
        },
    }
    json_path = out / "summary.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    return repr(float(value))
