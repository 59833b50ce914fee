"""A self-contained desk-scale rig for exercising the full attack loop.

The rig plays all three roles of the real setting with seeded analytic
components:

* a "world" stream of encoder weights shared (partially) by every model,
  standing in for the common visual structure that makes transfer between
  independently trained encoders possible at all;
* a surrogate image encoder and a victim image encoder, each mixing the
  shared stream with a private one, so the surrogate is correlated with,
  but not equal to, the victim;
* a caption-retrieval victim over a fixed bank, and targeted images
  synthesized as matched filters of the shared stream -- the picture any
  well-trained encoder "recognizes" as a given caption.

Fixtures (clean images, targeted images, manifest) are plain files, so the
CLI, the service, and the tests all run against the same artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .datasets import AttackCase, save_manifest, slugify
from .encoders import (
    HashingTextEncoder,
    ImageEncoder,
    TextEncoder,
    blended_linear_encoder,
    reference_weight,
)
from .imagecore import PixelImage, clamp_pixels, save_png
from .victims import Prompt, ToyRetrievalVictim

_CLEAN_STREAM = 0x434C4541
_PAIR_STREAM = 0x50414952

# distinct content words keep bank captions well separated in hash space,
# so the query stage's similarity ladder leads to the target rather than
# into a near-duplicate attractor caption
DEFAULT_CAPTIONS = (
    "a red fox trotting across fresh snow",
    "a vintage sports car parked downtown",
    "a white sailboat crossing rough water",
    "a tabby cat asleep on cushions",
    "a ceramic bowl holding ripe oranges",
    "a stone castle above terraced vineyards",
    "an astronaut floating beside the station",
    "a violin resting against sheet music",
    "a lighthouse beam sweeping the cliffs",
    "a steam locomotive hauling timber wagons",
    "a penguin colony huddled against wind",
    "a striped balloon drifting over peaks",
    "a marble chessboard between two players",
    "a jungle waterfall feeding green pools",
    "a lantern lit market after dusk",
    "a honey bee probing a sunflower",
)


@dataclass(frozen=True)
class ToyWorldConfig:
    """Knobs of the toy rig.  The defaults were frozen after a calibration
    sweep of the end-to-end success rates (see tests/test_acceptance.py)."""

    height: int = 10
    width: int = 10
    embed_dim: int = 128
    shared_seed: int = 101
    surrogate_seed: int = 202
    victim_seed: int = 303
    surrogate_share: float = 0.8
    victim_share: float = 0.96
    target_scale: float = 48.0
    clean_contrast: float = 40.0
    captions: tuple[str, ...] = DEFAULT_CAPTIONS

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, 3)


def build_text_encoder(cfg: ToyWorldConfig) -> TextEncoder:
    return HashingTextEncoder(cfg.embed_dim)


def build_surrogate(cfg: ToyWorldConfig, normalize: bool = True) -> ImageEncoder:
    """Surrogate encoder: blended weights, row-centered so features ignore
    global brightness.  DC invariance keeps caption decisions about image
    content, not the mid-gray bias that no small L-infinity noise could
    ever overcome."""
    return blended_linear_encoder(
        cfg.embed_dim, cfg.height, cfg.width,
        shared_seed=cfg.shared_seed, private_seed=cfg.surrogate_seed,
        share=cfg.surrogate_share, normalize_output=normalize,
        name=f"toy-surrogate-{cfg.embed_dim}", center_rows=True,
    )


def build_victim_encoder(cfg: ToyWorldConfig) -> ImageEncoder:
    return blended_linear_encoder(
        cfg.embed_dim, cfg.height, cfg.width,
        shared_seed=cfg.shared_seed, private_seed=cfg.victim_seed,
        share=cfg.victim_share, normalize_output=False,
        name=f"toy-victim-encoder-{cfg.embed_dim}", center_rows=True,
    )


def build_victim(cfg: ToyWorldConfig) -> ToyRetrievalVictim:
    return ToyRetrievalVictim(
        list(cfg.captions), build_victim_encoder(cfg), build_text_encoder(cfg)
    )


def make_target_image(cfg: ToyWorldConfig, caption: str) -> PixelImage:
    """The world's picture of a caption: a matched filter of the shared
    weight stream against the caption's text embedding, standardized and
    centered on mid-gray."""
    g = build_text_encoder(cfg)
    w_shared = reference_weight(cfg.shared_seed, cfg.embed_dim, cfg.height, cfg.width)
    w_shared = w_shared - w_shared.mean(axis=1, keepdims=True)
    signal = w_shared.T @ g.encode(caption).values
    signal = signal / signal.std()
    return PixelImage(clamp_pixels(128.0 + cfg.target_scale * signal).reshape(cfg.shape))


def random_clean_image(cfg: ToyWorldConfig, seed: int, index: int) -> PixelImage:
    """Uniform noise of configurable contrast around mid-gray.  The
    contrast (half-width of the pixel distribution) sets how strongly the
    clean content competes with an attack of a given budget."""
    u = rng.uniforms(
        rng.derive_key(seed, _CLEAN_STREAM, index),
        cfg.height * cfg.width * 3,
    )
    half = min(cfg.clean_contrast, 127.5)
    return PixelImage(((u * 2.0 - 1.0) * half + 127.5).reshape(cfg.shape))


def pick_targeted_caption(
    cfg: ToyWorldConfig, seed: int, index: int, exclude: str
) -> str:
    """Seeded choice of an attack target that differs from the victim's
    clean response, mirroring the clean-image/targeted-text irrelevance of
    the real pairing."""
    options = [c for c in cfg.captions if c != exclude]
    u = rng.uniforms(rng.derive_key(seed, _PAIR_STREAM, index), 1)[0]
    return options[int(u * len(options)) % len(options)]


@dataclass
class ToyFixture:
    root: Path
    manifest_path: Path
    targets_dir: Path
    cases: list[AttackCase] = field(default_factory=list)
    config: ToyWorldConfig = ToyWorldConfig()


def write_fixture(
    root: str | Path,
    n_cases: int,
    seed: int = 1,
    cfg: ToyWorldConfig = ToyWorldConfig(),
    prompt: Prompt = Prompt(),
) -> ToyFixture:
    """Materialize a toy dataset: clean PNGs, one targeted PNG per bank
    caption (addressed by slug), and a JSON-lines manifest."""
    root = Path(root)
    images = root / "images"
    targets = root / "targets"
    images.mkdir(parents=True, exist_ok=True)
    targets.mkdir(parents=True, exist_ok=True)

    for caption in cfg.captions:
        save_png(make_target_image(cfg, caption), targets / f"{slugify(caption)}.png")

    victim = build_victim(cfg)
    cases: list[AttackCase] = []
    for i in range(n_cases):
        clean = random_clean_image(cfg, seed, i)
        clean_path = images / f"clean-{i:04d}.png"
        save_png(clean, clean_path)
        clean_response = victim.generate(clean, prompt)
        targeted = pick_targeted_caption(cfg, seed, i, exclude=clean_response)
        cases.append(
            AttackCase(
                id=f"case-{i:04d}",
                clean_image=clean_path,
                targeted_text=targeted,
                prompt=prompt,
            )
        )
    manifest_path = root / "manifest.jsonl"
    save_manifest(cases, manifest_path)
    return ToyFixture(
        root=root, manifest_path=manifest_path, targets_dir=targets,
        cases=cases, config=cfg,
    )
