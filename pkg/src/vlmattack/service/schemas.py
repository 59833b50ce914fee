"""Request/response models for the service API and the config-file schema.

The same models validate CLI config files (flags > file > defaults), the
HTTP request bodies, and the config echo written into every run directory,
so one schema governs all three surfaces.
"""

from __future__ import annotations

from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field


class EncoderSpec(BaseModel):
    """An image encoder by registry name plus its settings."""

    model_config = ConfigDict(extra="forbid")

    name: str = "ref-linear-128"
    seed: int = 0
    normalize: bool = True
    shared_seed: int | None = None
    share: float | None = None
    center: bool = False


class ToyVictimSpec(BaseModel):
    """The deterministic caption-retrieval victim (hermetic default)."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["toy-retrieval"] = "toy-retrieval"
    captions: list[str] | None = None  # None = built-in bank
    image_encoder: EncoderSpec = EncoderSpec(
        seed=303, shared_seed=101, share=0.96, normalize=False, center=True
    )
    text_encoder: str = "ref-hash-128"
    max_concurrency: int = 8


class HttpVictimSpec(BaseModel):
    """A served victim speaking the pinned JSON protocol over HTTP."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["http"]
    endpoint: str
    retries: int = 3
    backoff_seconds: float = 0.5
    timeout: float = 60.0
    max_concurrency: int = 4


class SubprocessVictimSpec(BaseModel):
    """A victim behind a child process, JSON lines over stdin/stdout."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["subprocess"]
    argv: list[str]


VictimSpec = Annotated[
    Union[ToyVictimSpec, HttpVictimSpec, SubprocessVictimSpec],
    Field(discriminator="kind"),
]


class TransferSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = 100
    step_size: float = 1.0
    epsilon: float = 8.0
    objective: Literal["mf-ii", "mf-it"] = "mf-ii"


class QuerySpec(BaseModel):
    """Zero-order stage settings; ``steps`` is deliberately required."""

    model_config = ConfigDict(extra="forbid")

    steps: int
    queries: int = 100
    sigma: float = 8.0
    inner_pgd_steps: int = 8
    step_size: float = 1.0
    epsilon: float = 8.0
    distribution: Literal["normal", "sphere"] = "normal"
    max_parallel_queries: int = 1


class RunSpec(BaseModel):
    """Fully resolved configuration of one run; echoed into the run dir."""

    model_config = ConfigDict(extra="forbid")

    manifest: str
    output_dir: str
    seed: int = 0
    workers: int = 1
    query_cap: int | None = None
    targets_dir: str | None = None
    surrogate: EncoderSpec = EncoderSpec(
        seed=202, shared_seed=101, share=0.8, normalize=True, center=True
    )
    text_encoder: str = "ref-hash-128"
    eval_encoders: list[str] = ["ref-hash-64", "ref-hash-128", "ref-hash-256"]
    victim: VictimSpec = ToyVictimSpec()
    transfer: TransferSpec = TransferSpec()
    query: QuerySpec


class EvalRequest(RunSpec):
    """Score victim responses for clean or previously attacked images."""

    images: Literal["clean", "adversarial"] = "clean"
    run_dir: str | None = None  # attack output dir; required for adversarial


class SweepEpsRequest(RunSpec):
    eps_list: list[float] = [2.0, 4.0, 8.0, 16.0, 64.0]


class SplitBudgetRequest(RunSpec):
    """Fixed total budget shared between the stages; the total is
    transfer.epsilon and every split must sum to it."""

    splits: list[tuple[float, float]] = [
        (0.0, 8.0), (2.0, 6.0), (4.0, 4.0), (6.0, 2.0), (8.0, 0.0),
    ]


class SensitivityRequest(RunSpec):
    run_dir: str  # attack output dir holding per-case x_adv.png
    noise_sigmas: list[float] = [0.0, 2.0, 4.0, 8.0, 16.0]
    trials: int = 5


class ValidateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    manifest: str


class CaseOutcome(BaseModel):
    case_id: str
    ok: bool
    final_text: str | None = None
    ensemble: float | None = None
    query_count: int = 0
    error: str | None = None


class RunSummary(BaseModel):
    command: str
    status: Literal["ok", "partial", "empty"]
    output_dir: str | None = None
    cases: int = 0
    failures: int = 0
    total_queries: int = 0
    outcomes: list[CaseOutcome] = []
    detail: dict = {}


class ValidateResponse(BaseModel):
    status: Literal["ok"]
    cases: int
    case_ids: list[str]


class VictimGenerateRequest(BaseModel):
    """The pinned black-box victim wire format."""

    image: str  # base64-encoded PNG bytes
    prompt: str


class VictimGenerateResponse(BaseModel):
    text: str


class HealthResponse(BaseModel):
    status: Literal["ok"]
    version: str
    victim: str
