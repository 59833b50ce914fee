"""Attack-case manifests: clean image + targeted text (+ optional targeted
image) tuples, stored as JSON lines with paths relative to the manifest.

Targeted images are pre-generated artifacts (the text-to-image generator is
treated as an offline black box); the directory-backed provider addresses
them by a deterministic slug of the targeted text.
"""

from __future__ import annotations

import json
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

from .errors import ManifestError
from .imagecore import PixelImage, load_png
from .victims import Prompt

_MANIFEST_FIELDS = {"id", "clean_image", "targeted_text", "targeted_image", "prompt"}


@dataclass(frozen=True)
class AttackCase:
    """One attack unit: which image to perturb, toward which text/image."""

    id: str
    clean_image: Path
    targeted_text: str
    targeted_image: Path | None = None
    prompt: Prompt = Prompt()


def slugify(text: str) -> str:
    """Lowercase, collapse non-alphanumerics to single hyphens, trim."""
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")


def load_manifest(path: str | Path) -> list[AttackCase]:
    """Parse and validate a JSON-lines manifest.

    Rejects malformed lines (with their line number), missing required
    fields (by name), duplicate ids, and dangling file references (by
    case id).  Paths resolve relative to the manifest's directory.
    """
    p = Path(path)
    if not p.is_file():
        raise ManifestError(f"manifest not found: {p}")
    base = p.parent
    cases: list[AttackCase] = []
    seen: set[str] = set()
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{p}:{lineno}: invalid JSON ({exc})") from exc
        if not isinstance(record, dict):
            raise ManifestError(f"{p}:{lineno}: expected a JSON object")
        unknown = set(record) - _MANIFEST_FIELDS
        if unknown:
            raise ManifestError(f"{p}:{lineno}: unknown fields {sorted(unknown)}")
        for required in ("id", "clean_image", "targeted_text"):
            if required not in record:
                raise ManifestError(f"{p}:{lineno}: missing field {required!r}")
        case_id = str(record["id"])
        if case_id in seen:
            raise ManifestError(f"{p}:{lineno}: duplicate case id {case_id!r}")
        seen.add(case_id)
        clean = base / record["clean_image"]
        if not clean.is_file():
            raise ManifestError(
                f"case {case_id!r}: clean image not found: {clean}"
            )
        targeted_image = None
        if record.get("targeted_image") is not None:
            targeted_image = base / record["targeted_image"]
            if not targeted_image.is_file():
                raise ManifestError(
                    f"case {case_id!r}: targeted image not found: {targeted_image}"
                )
        prompt = Prompt(record["prompt"]) if record.get("prompt") else Prompt()
        cases.append(
            AttackCase(
                id=case_id,
                clean_image=clean,
                targeted_text=str(record["targeted_text"]),
                targeted_image=targeted_image,
                prompt=prompt,
            )
        )
    return cases


def save_manifest(cases: list[AttackCase], path: str | Path) -> None:
    """Serialize back to JSON lines with paths relative to the target dir;
    load(save(cases)) round-trips."""
    p = Path(path)
    base = p.parent
    lines = []
    for case in cases:
        record = {
            "id": case.id,
            "clean_image": _relative_to(case.clean_image, base),
            "targeted_text": case.targeted_text,
        }
        if case.targeted_image is not None:
            record["targeted_image"] = _relative_to(case.targeted_image, base)
        if case.prompt.text != Prompt().text:
            record["prompt"] = case.prompt.text
        lines.append(json.dumps(record, sort_keys=True))
    p.write_text("\n".join(lines) + ("\n" if lines else ""))


def _relative_to(path: Path, base: Path) -> str:
    try:
        return path.relative_to(base).as_posix()
    except ValueError:
        return str(path)


class TargetImageProvider(ABC):
    """Source of targeted images for texts with no explicit image path."""

    name: str = "provider"

    @abstractmethod
    def get(self, targeted_text: str) -> PixelImage: ...


class DirectoryTargetProvider(TargetImageProvider):
    """Looks up ``<root>/<slug(targeted_text)>.png``; caches by slug."""

    name = "directory"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._cache: dict[str, PixelImage] = {}

    def get(self, targeted_text: str) -> PixelImage:
        key = slugify(targeted_text)
        if key not in self._cache:
            path = self.root / f"{key}.png"
            if not path.is_file():
                raise ManifestError(
                    f"no targeted image for {targeted_text!r}: expected file {path}"
                )
            self._cache[key] = load_png(path)
        return self._cache[key]


def resolve_target_image(
    provider: TargetImageProvider | None,
    case: AttackCase,
    cache: dict[str, PixelImage] | None = None,
) -> PixelImage:
    """Targeted image for a case: the explicit path wins, else the provider.

    ``cache`` (keyed by case id) avoids re-decoding across pipeline stages.
    """
    if cache is not None and case.id in cache:
        return cache[case.id]
    if case.targeted_image is not None:
        image = load_png(case.targeted_image)
    elif provider is not None:
        image = provider.get(case.targeted_text)
    else:
        raise ManifestError(
            f"case {case.id!r} has no targeted image and no provider is configured"
        )
    if cache is not None:
        cache[case.id] = image
    return image
