"""Textual prompt assembly from the sarcasm target and optional image-derived strings."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DataError

TARGET_TEMPLATE = "The target of sarcasm is {}. Write a sarcastic comment based on this."
OCR_TEMPLATE = "OCR text: {}"
CAPTION_TEMPLATE = "Image caption: {}"
OBJECTS_TEMPLATE = "Objects in image: {}"
JOINER = " "


@dataclass(frozen=True)
class PromptConfig:
    use_ocr: bool = False
    use_objects: bool = False
    use_caption: bool = False


@dataclass(frozen=True)
class PromptText:
    text: str
    segment_spans: tuple[tuple[str, tuple[int, int]], ...]

    def segment(self, name: str) -> str:
        for seg, (start, end) in self.segment_spans:
            if seg == name:
                return self.text[start:end]
        raise KeyError(name)


def dedupe_objects(objects) -> list[str]:
    """Drop repeated object labels, keeping first occurrences (case-sensitive)."""
    return list(dict.fromkeys(objects))


def build_prompt(sample, config: PromptConfig = PromptConfig()) -> PromptText:
    """Render the prompt for ``sample`` (anything with target/ocr_text/caption/objects).

    Segments are emitted in the order target, OCR, caption, objects and joined
    with a single space. An enabled segment whose field is missing raises.
    """
    if not sample.target:
        raise DataError("cannot build a prompt without a sarcasm target")
    segments = [("target", TARGET_TEMPLATE.format(sample.target))]
    if config.use_ocr:
        segments.append(("ocr", OCR_TEMPLATE.format(_require(sample, "ocr_text"))))
    if config.use_caption:
        segments.append(("caption", CAPTION_TEMPLATE.format(_require(sample, "caption"))))
    if config.use_objects:
        objects = dedupe_objects(_require(sample, "objects"))
        segments.append(("objects", OBJECTS_TEMPLATE.format(", ".join(objects))))

    spans = []
    pos = 0
    for i, (name, seg) in enumerate(segments):
        if i:
            pos += len(JOINER)
        spans.append((name, (pos, pos + len(seg))))
        pos += len(seg)
    return PromptText(JOINER.join(seg for _, seg in segments), tuple(spans))


def _require(sample, name):
    value = getattr(sample, name, None)
    if value is None:
        raise DataError(f"sample {getattr(sample, 'id', '?')}: prompt needs {name!r} but it is missing")
    return value
