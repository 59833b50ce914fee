"""Command execution: turns a validated run spec into components, drives
the attack/eval harnesses over a manifest, and writes run artifacts.

Every command writes into ``<output_dir>/<command>/``: a fully resolved
config echo (config.json), per-case outputs where applicable, report.csv
and summary.json.  Sequential mode (workers=1) is bit-reproducible:
rerunning an identical spec rewrites identical x_adv.png and result.json
bytes.
"""

from __future__ import annotations

import json
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import rng, toyworld
from .attack import (
    AttackResult,
    QueryConfig,
    TransferConfig,
    attack_pipeline,
    split_budget_configs,
    split_label,
)
from .datasets import AttackCase, DirectoryTargetProvider, load_manifest
from .encoders import (
    ImageEncoder,
    TextEncoder,
    create_image_encoder,
    create_text_encoder,
)
from .errors import ConfigError, ManifestError, VlmattackError
from .evaluation import (
    CaseScores,
    emit_report,
    eps_sweep,
    generate_and_score,
    mean_abs_pixel_distance,
    score_response,
    sensitivity_sweep,
)
from .imagecore import LinfBudget, PixelImage, load_png, save_png
from .service.schemas import (
    EncoderSpec,
    EvalRequest,
    HttpVictimSpec,
    QuerySpec,
    RunSpec,
    RunSummary,
    CaseOutcome,
    SensitivityRequest,
    SplitBudgetRequest,
    SubprocessVictimSpec,
    SweepEpsRequest,
    ToyVictimSpec,
    TransferSpec,
    ValidateRequest,
    ValidateResponse,
    VictimSpec,
)
from .victims import (
    RemoteHttpVictim,
    SubprocessVictim,
    ToyRetrievalVictim,
    VictimOracle,
)

VICTIM_ENDPOINT_ENV = "VLMATTACK_VICTIM_ENDPOINT"

# stream label for per-case query seeds
_CASE_STREAM = 0x43415345


def _image_shape(cases: list[AttackCase]) -> tuple[int, int]:
    first = load_png(cases[0].clean_image)
    return first.height, first.width


def build_image_encoder(spec: EncoderSpec, height: int, width: int) -> ImageEncoder:
    return create_image_encoder(
        spec.name, height, width, seed=spec.seed, normalize=spec.normalize,
        shared_seed=spec.shared_seed, share=spec.share, center=spec.center,
    )


def build_victim(spec: VictimSpec, height: int, width: int) -> VictimOracle:
    if isinstance(spec, ToyVictimSpec):
        captions = spec.captions or list(toyworld.DEFAULT_CAPTIONS)
        return ToyRetrievalVictim(
            captions,
            build_image_encoder(spec.image_encoder, height, width),
            create_text_encoder(spec.text_encoder),
            max_concurrency=spec.max_concurrency,
        )
    if isinstance(spec, HttpVictimSpec):
        endpoint = os.environ.get(VICTIM_ENDPOINT_ENV, spec.endpoint)
        return RemoteHttpVictim(
            endpoint, max_concurrency=spec.max_concurrency,
            retries=spec.retries, backoff_seconds=spec.backoff_seconds,
            timeout=spec.timeout,
        )
    if isinstance(spec, SubprocessVictimSpec):
        return SubprocessVictim(spec.argv)
    raise ConfigError(f"unknown victim spec {spec!r}")


def transfer_config(spec: TransferSpec) -> TransferConfig:
    return TransferConfig(
        steps=spec.steps, step_size=spec.step_size,
        budget=LinfBudget(spec.epsilon), objective=spec.objective,
    )


def query_config(spec: QuerySpec, seed: int) -> QueryConfig:
    return QueryConfig(
        steps=spec.steps, queries=spec.queries, sigma=spec.sigma,
        inner_pgd_steps=spec.inner_pgd_steps, step_size=spec.step_size,
        budget=LinfBudget(spec.epsilon), distribution=spec.distribution,
        seed=seed, max_parallel_queries=spec.max_parallel_queries,
    )


class _RunContext:
    """Components shared by every case of one run."""

    def __init__(self, spec: RunSpec, command: str):
        self.spec = spec
        self.command = command
        self.out_dir = Path(spec.output_dir) / command
        self.cases = load_manifest(spec.manifest)
        self.provider = (
            DirectoryTargetProvider(spec.targets_dir) if spec.targets_dir else None
        )
        if self.cases:
            height, width = _image_shape(self.cases)
            self.surrogate = build_image_encoder(spec.surrogate, height, width)
            self.victim = build_victim(spec.victim, height, width)
        else:
            self.surrogate = None
            self.victim = None
        self.text_encoder = create_text_encoder(spec.text_encoder)
        self.eval_encoders = [create_text_encoder(n) for n in spec.eval_encoders]

    def write_config_echo(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        echo = self.spec.model_dump(mode="json")
        (self.out_dir / "config.json").write_text(
            json.dumps(echo, indent=2, sort_keys=True) + "\n"
        )

    def case_query_seed(self, index: int) -> int:
        return rng.derive_key(self.spec.seed, _CASE_STREAM, index)


def _summary(
    ctx: _RunContext, rows: list[CaseScores], outcomes: list[CaseOutcome], detail: dict | None = None
) -> RunSummary:
    failures = sum(1 for o in outcomes if not o.ok)
    if rows:
        emit_report(rows, ctx.out_dir, [e.name for e in ctx.eval_encoders])
    status = "empty" if not outcomes else ("partial" if failures else "ok")
    return RunSummary(
        command=ctx.command,
        status=status,
        output_dir=str(ctx.out_dir),
        cases=len(outcomes),
        failures=failures,
        total_queries=sum(o.query_count for o in outcomes),
        outcomes=outcomes,
        detail=detail or {},
    )


def _write_case_artifacts(
    case_dir: Path,
    case: AttackCase,
    result: AttackResult,
    scores: tuple[dict[str, float], float | None] | None,
    config_echo: dict,
    seeds: dict,
) -> None:
    case_dir.mkdir(parents=True, exist_ok=True)
    save_png(result.x_adv, case_dir / "x_adv.png")
    save_png(result.x_trans, case_dir / "x_trans.png")
    trace = {
        "transfer": {
            "objective_values": result.transfer_trace.objective_values,
            "best_so_far": result.transfer_trace.best_so_far,
            "query_count": result.transfer_trace.query_count,
            "wall_time_seconds": result.transfer_trace.wall_time_seconds,
        },
        "query": {
            "objective_values": result.query_trace.objective_values,
            "best_so_far": result.query_trace.best_so_far,
            "query_count": result.query_trace.query_count,
            "wall_time_seconds": result.query_trace.wall_time_seconds,
            "truncated": result.query_trace.truncated,
        },
    }
    (case_dir / "trace.json").write_text(json.dumps(trace, indent=2) + "\n")
    result_doc = {
        "case_id": case.id,
        "targeted_text": case.targeted_text,
        "prompt": case.prompt.text,
        "final_text": result.final_text,
        "scores": None
        if scores is None
        else {"per_encoder": scores[0], "ensemble": scores[1]},
        "query_count": result.query_trace.query_count,
        "truncated": result.query_trace.truncated,
        "seeds": seeds,
        "config": config_echo,
    }
    (case_dir / "result.json").write_text(
        json.dumps(result_doc, indent=2, sort_keys=True) + "\n"
    )


def run_attack(spec: RunSpec) -> RunSummary:
    ctx = _RunContext(spec, "attack")
    ctx.write_config_echo()
    tcfg = transfer_config(spec.transfer)
    config_echo = spec.model_dump(mode="json")

    def one_case(indexed: tuple[int, AttackCase]) -> tuple[CaseOutcome, CaseScores]:
        index, case = indexed
        qseed = ctx.case_query_seed(index)
        qcfg = query_config(spec.query, qseed)
        if spec.workers > 1:
            qcfg = replace(qcfg, max_parallel_queries=1)
        try:
            result = attack_pipeline(
                case, tcfg, qcfg, ctx.surrogate, ctx.text_encoder, ctx.victim,
                provider=ctx.provider, query_cap=spec.query_cap,
            )
            scores = (
                score_response(result.final_text, case.targeted_text, ctx.eval_encoders)
                if result.final_text is not None
                else None
            )
            _write_case_artifacts(
                ctx.out_dir / "cases" / case.id, case, result, scores,
                config_echo, {"run_seed": spec.seed, "query_seed": qseed},
            )
            wall = (
                result.transfer_trace.wall_time_seconds
                + result.query_trace.wall_time_seconds
            )
            row = CaseScores(
                case_id=case.id,
                per_encoder=scores[0] if scores else {},
                ensemble=scores[1] if scores else None,
                query_count=result.query_trace.query_count,
                wall_time_seconds=wall,
            )
            outcome = CaseOutcome(
                case_id=case.id, ok=True, final_text=result.final_text,
                ensemble=row.ensemble, query_count=row.query_count,
            )
        except VlmattackError as exc:
            row = CaseScores(case_id=case.id, error=str(exc))
            outcome = CaseOutcome(case_id=case.id, ok=False, error=str(exc))
        return outcome, row

    indexed = list(enumerate(ctx.cases))
    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(one_case, indexed))
    else:
        results = [one_case(item) for item in indexed]
    outcomes = [r[0] for r in results]
    rows = [r[1] for r in results]
    return _summary(ctx, rows, outcomes)


def run_eval(spec: EvalRequest) -> RunSummary:
    ctx = _RunContext(spec, "eval")
    ctx.write_config_echo()
    if spec.images == "adversarial" and not spec.run_dir:
        raise ConfigError("eval over adversarial images needs run_dir")

    outcomes: list[CaseOutcome] = []
    rows: list[CaseScores] = []
    for case in ctx.cases:
        try:
            if spec.images == "clean":
                image = load_png(case.clean_image)
            else:
                image = load_png(Path(spec.run_dir) / "cases" / case.id / "x_adv.png")
            text, per, ensemble = generate_and_score(
                image, case, ctx.victim, ctx.eval_encoders
            )
            rows.append(
                CaseScores(case.id, per_encoder=per, ensemble=ensemble, query_count=1)
            )
            outcomes.append(
                CaseOutcome(
                    case_id=case.id, ok=True, final_text=text,
                    ensemble=ensemble, query_count=1,
                )
            )
        except VlmattackError as exc:
            rows.append(CaseScores(case.id, error=str(exc)))
            outcomes.append(CaseOutcome(case_id=case.id, ok=False, error=str(exc)))
    return _summary(ctx, rows, outcomes, detail={"images": spec.images})


def run_sweep_eps(spec: SweepEpsRequest) -> RunSummary:
    ctx = _RunContext(spec, "sweep-eps")
    ctx.write_config_echo()
    tcfg = transfer_config(spec.transfer)

    outcomes: list[CaseOutcome] = []
    table: list[dict] = []
    for index, case in enumerate(ctx.cases):
        qcfg = query_config(spec.query, ctx.case_query_seed(index))

        def score(result: AttackResult) -> float | None:
            if result.final_text is None:
                text, _, ensemble = generate_and_score(
                    result.x_adv, case, ctx.victim, ctx.eval_encoders
                )
                return ensemble
            return score_response(
                result.final_text, case.targeted_text, ctx.eval_encoders
            )[1]

        try:
            points = eps_sweep(
                case, spec.eps_list, tcfg, qcfg, ctx.surrogate, ctx.text_encoder,
                ctx.victim, provider=ctx.provider,
                distance_metric=mean_abs_pixel_distance, score_fn=score,
            )
            queries = sum(p.query_count for p in points)
            for p in points:
                table.append(
                    {
                        "case_id": case.id, "epsilon": p.epsilon,
                        "score": p.final_score, "distance": p.distance,
                        "query_count": p.query_count, "error": p.error,
                    }
                )
            outcomes.append(
                CaseOutcome(case_id=case.id, ok=True, query_count=queries)
            )
        except VlmattackError as exc:
            outcomes.append(CaseOutcome(case_id=case.id, ok=False, error=str(exc)))

    _write_table(ctx.out_dir, table, ["case_id", "epsilon", "score", "distance", "query_count", "error"])
    by_eps = {
        str(eps): {
            "mean_score": _mean([r["score"] for r in table if r["epsilon"] == eps]),
            "mean_distance": _mean([r["distance"] for r in table if r["epsilon"] == eps]),
        }
        for eps in spec.eps_list
    }
    _write_summary(ctx.out_dir, {"eps_list": spec.eps_list, "by_epsilon": by_eps})
    return _summary(ctx, [], outcomes, detail={"by_epsilon": by_eps})


def run_split_budget(spec: SplitBudgetRequest) -> RunSummary:
    ctx = _RunContext(spec, "split-budget")
    total = spec.transfer.epsilon
    for eps_t, eps_q in spec.splits:
        if eps_t < 0 or eps_q < 0:
            raise ConfigError(f"negative sub-budgets rejected: ({eps_t}, {eps_q})")
        if abs(eps_t + eps_q - total) > 1e-9:
            raise ConfigError(
                f"split ({eps_t}, {eps_q}) does not sum to the declared "
                f"total budget {total}"
            )
    ctx.write_config_echo()
    base_t = transfer_config(spec.transfer)

    outcomes: list[CaseOutcome] = []
    table: list[dict] = []
    for index, case in enumerate(ctx.cases):
        base_q = query_config(spec.query, ctx.case_query_seed(index))
        queries = 0
        try:
            for eps_t, eps_q in spec.splits:
                tcfg, qcfg = split_budget_configs(base_t, base_q, eps_t, eps_q)
                result = attack_pipeline(
                    case, tcfg, qcfg, ctx.surrogate, ctx.text_encoder, ctx.victim,
                    provider=ctx.provider, query_cap=spec.query_cap,
                )
                # uniform eval-time scoring: one victim response per split
                text, _, ensemble = generate_and_score(
                    result.x_adv, case, ctx.victim, ctx.eval_encoders
                )
                queries += result.query_trace.query_count + 1
                table.append(
                    {
                        "split": split_label(eps_t, eps_q), "case_id": case.id,
                        "final_text": text, "ensemble": ensemble,
                        "hit": text == case.targeted_text,
                        "query_count": result.query_trace.query_count,
                    }
                )
            outcomes.append(CaseOutcome(case_id=case.id, ok=True, query_count=queries))
        except VlmattackError as exc:
            outcomes.append(CaseOutcome(case_id=case.id, ok=False, error=str(exc)))

    _write_table(
        ctx.out_dir, table,
        ["split", "case_id", "final_text", "ensemble", "hit", "query_count"],
    )
    by_split = {}
    for eps_t, eps_q in spec.splits:
        label = split_label(eps_t, eps_q)
        split_rows = [r for r in table if r["split"] == label]
        by_split[label] = {
            "ensemble_mean": _mean([r["ensemble"] for r in split_rows]),
            "hit_rate": _mean([1.0 if r["hit"] else 0.0 for r in split_rows]),
        }
    _write_summary(ctx.out_dir, {"total_budget": total, "by_split": by_split})
    return _summary(ctx, [], outcomes, detail={"by_split": by_split})


def run_sensitivity(spec: SensitivityRequest) -> RunSummary:
    ctx = _RunContext(spec, "sensitivity")
    if 0.0 not in spec.noise_sigmas:
        raise ConfigError("noise_sigmas must include 0 as the baseline")
    ctx.write_config_echo()

    outcomes: list[CaseOutcome] = []
    table: list[dict] = []
    curves: dict[str, list[float]] = {}
    for index, case in enumerate(ctx.cases):
        try:
            x_adv = load_png(Path(spec.run_dir) / "cases" / case.id / "x_adv.png")
            curve = sensitivity_sweep(
                x_adv, case.targeted_text, ctx.victim, ctx.eval_encoders,
                spec.noise_sigmas, spec.trials,
                seed=rng.derive_key(spec.seed, _CASE_STREAM, index),
                prompt=case.prompt, case_id=case.id,
            )
            curves[case.id] = curve.mean_scores
            for sigma, score in zip(curve.noise_sigmas, curve.mean_scores):
                table.append({"case_id": case.id, "sigma": sigma, "mean_score": score})
            outcomes.append(
                CaseOutcome(
                    case_id=case.id, ok=True,
                    query_count=spec.trials * len(spec.noise_sigmas),
                )
            )
        except VlmattackError as exc:
            outcomes.append(CaseOutcome(case_id=case.id, ok=False, error=str(exc)))

    _write_table(ctx.out_dir, table, ["case_id", "sigma", "mean_score"])
    mean_curve = [
        _mean([curves[cid][i] for cid in curves])
        for i in range(len(spec.noise_sigmas))
    ] if curves else []
    _write_summary(
        ctx.out_dir,
        {
            "noise_sigmas": spec.noise_sigmas,
            "trials": spec.trials,
            "mean_curve": mean_curve,
        },
    )
    return _summary(
        ctx, [], outcomes,
        detail={"noise_sigmas": spec.noise_sigmas, "mean_curve": mean_curve},
    )


def run_validate(spec: ValidateRequest) -> ValidateResponse:
    cases = load_manifest(spec.manifest)
    return ValidateResponse(
        status="ok", cases=len(cases), case_ids=[c.id for c in cases]
    )


def _mean(values: list) -> float | None:
    vals = [v for v in values if v is not None]
    return statistics.fmean(vals) if vals else None


def _write_table(out_dir: Path, rows: list[dict], columns: list[str]) -> None:
    import csv

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else row.get(c) for c in columns])


def _write_summary(out_dir: Path, doc: dict) -> None:
    (out_dir / "summary.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n"
    )
